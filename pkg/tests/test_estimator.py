from dataclasses import replace

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from hybrid_contact import manifold as mf
from hybrid_contact import sim
from hybrid_contact.estimator import (EstimatorNoise, HybridContactSmoother, build_graph,
                                      keyframe_times, noise_from_config)
from hybrid_contact.exceptions import ConfigError


@pytest.fixture(scope="module")
def fitted(noise_free_walk):
    _, truth, data = noise_free_walk
    return HybridContactSmoother().fit(data), truth, data


def test_keyframe_cadence(noise_free_walk):
    _, _, data = noise_free_walk
    t = keyframe_times(data, 0.25)
    assert len(t) == 41 and t[0] == 0.0
    np.testing.assert_allclose(np.diff(t), 0.25)
    with pytest.raises(ConfigError):
        keyframe_times(data, 0.0)


@pytest.mark.parametrize("factors,kinds", [
    ("i", {"prior", "imu", "bias_walk"}),
    ("vi", {"prior", "imu", "bias_walk", "relpose"}),
    ("ic", {"prior", "imu", "bias_walk", "fk", "contact"}),
    ("vic", {"prior", "imu", "bias_walk", "relpose", "fk", "contact"}),
])
def test_factor_sets(noise_free_walk, factors, kinds):
    _, _, data = noise_free_walk
    kg = build_graph(data, factors)
    assert {f.kind for f in kg.graph.factors} == kinds
    assert len(kg.graph.nodes) == 41
    has_c = "contact" in kinds
    assert all((n.C is not None) == has_c for n in kg.graph.nodes.values())


def test_build_graph_errors(noise_free_walk):
    _, _, data = noise_free_walk
    with pytest.raises(ConfigError, match="unknown factor set"):
        build_graph(data, "vc")
    with pytest.raises(ConfigError, match="terrain"):
        build_graph(data, "vi", terrain=True)
    with pytest.raises(ConfigError, match="does not match"):
        build_graph(data, "vic", keyframe_dt=0.5)
    with pytest.raises(ConfigError, match="IMU samples"):
        build_graph(data, "i", keyframe_dt=0.2501)
    with pytest.raises(ConfigError, match="initial state"):
        build_graph(replace(data, initial=None), "i")


def test_fit_recovers_noise_free_truth(fitted):
    model, truth, _ = fitted
    assert model.report_.converged
    tr = model.trajectory_
    idx = [int(np.argmin(np.abs(truth.t - t))) for t in tr.t]
    np.testing.assert_allclose(tr.X[:, :3, 3], truth.X[idx, :3, 3], atol=1e-4)
    np.testing.assert_allclose(tr.C, truth.C[idx], atol=1e-4)
    assert tr.pose_logdet.shape == (41,)
    assert np.all(np.diff(tr.pose_logdet[:5]) > 0)
    assert model.score(None, truth) > -1e-4


def test_predict_interpolates(fitted):
    model, truth, _ = fitted
    tr = model.trajectory_
    rows = model.predict(tr.t)
    for row, X in zip(rows, tr.X):
        np.testing.assert_allclose(mf.qp_to_pose(row[:4], row[4:]), X, atol=1e-12)
    mid = model.predict([0.125])[0]
    np.testing.assert_allclose(mid[4:], 0.5 * (tr.X[0, :3, 3] + tr.X[1, :3, 3]), atol=1e-12)
    R_mid = tr.X[0, :3, :3] @ mf.so3_exp(0.5 * mf.so3_log(tr.X[0, :3, :3].T @ tr.X[1, :3, :3]))
    np.testing.assert_allclose(mf.qp_to_pose(mid[:4], mid[4:])[:3, :3], R_mid, atol=1e-12)
    np.testing.assert_allclose(model.predict([-5.0, 99.0])[:, 4:], tr.X[[0, -1], :3, 3], atol=1e-12)


def test_estimator_api():
    m = HybridContactSmoother(factors="ic", terrain=True)
    assert m.get_params()["factors"] == "ic"
    c = clone(m)
    assert c.get_params() == m.get_params() and c is not m
    with pytest.raises(NotFittedError):
        m.predict([0.0])


def test_noise_from_config():
    cfg = sim.ScenarioConfig(relpose_sigma_rot=1e-3, sigma_alpha=5e-3)
    n = noise_from_config(cfg)
    assert n.relpose_sigma_rot == 1e-3 and n.sigma_alpha == 5e-3
    assert n.terrain_sigma_z == EstimatorNoise().terrain_sigma_z
    assert noise_from_config(sim.ScenarioConfig()).relpose_sigma_trans == EstimatorNoise().relpose_sigma_trans
