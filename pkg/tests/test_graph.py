from collections import OrderedDict

import numpy as np
import pytest

from hybrid_contact import manifold as mf
from hybrid_contact.estimator import build_graph
from hybrid_contact.exceptions import (BadCovariance, ResidualEvaluationFailed,
                                       SingularNormalEquations, UnknownKey)
from hybrid_contact.graph import (FACTOR_KINDS, BiasWalkFactor, FactorGraph, FKFactor, PriorFactor,
                                  RelPoseFactor, StateNode, TerrainFactor, pose_logdet,
                                  relpose_factor_residual, richardson_ratio, terrain_factor_residual,
                                  whitening)
from hybrid_contact.kinematics import EncoderReading, fk_factor_covariance

from factories import factor_setup, random_node, spd

POSE_COV = np.diag([1e-4] * 3 + [4e-4] * 3)


def prior_graph(rng, n_nodes=1, cov=None):
    g = FactorGraph()
    for k in range(n_nodes):
        g.add_node(random_node(rng, k, contact=False))
    node = g.nodes[0]
    means = OrderedDict([("x", node.X), ("v", node.v), ("b", node.b)])
    cov = np.diag([1e-4] * 6 + [1e-2] * 3 + [1e-6] * 6) if cov is None else cov
    g.add_factor(PriorFactor(0, means, cov))
    return g


def test_add_node_and_factor(rng, robot):
    g = prior_graph(rng)
    assert len(g.nodes) == 1 and len(g.factors) == 1
    with pytest.raises(UnknownKey):
        g.add_factor(RelPoseFactor(0, 5, np.eye(4), POSE_COV))
    with pytest.raises(UnknownKey):
        g.add_factor(TerrainFactor(0, 1e-3))  # node has no contact block
    c = FactorGraph().add_node(random_node(rng, 0)).add_node(random_node(rng, 1))
    f, _ = factor_setup("contact", rng, robot)
    c.add_factor(f)
    assert f.keys == (0, 1) and f.blocks == ((0, "c"), (1, "c"))


@pytest.mark.parametrize("cov", [np.diag([1.0, -1.0]), np.array([[1.0, 2.0], [0.0, 1.0]]),
                                 np.array([[np.nan]]), np.zeros((2, 3))])
def test_bad_covariance(cov):
    with pytest.raises(BadCovariance):
        whitening(cov)


def test_whitening_inverts_cholesky(rng):
    S = spd(rng, 6, 0.3)
    W = whitening(S)
    np.testing.assert_allclose(W @ S @ W.T, np.eye(6), atol=1e-12)


def test_prior_at_mean_has_zero_gradient(rng):
    g = prior_graph(rng)
    H, grad, cost = g.normal_equations()
    assert cost == 0.0
    np.testing.assert_allclose(grad, 0.0, atol=1e-12)


def test_linear_graph_single_gauss_newton_step(rng):
    # bias-only least squares: priors on three biases plus two random walks
    g = prior_graph(rng, 3)
    cov_b = [spd(rng, 6, 1e-2) for _ in range(3)]
    means_b = [rng.normal(size=6) * 0.1 for _ in range(3)]
    walk = [spd(rng, 6, 2e-2) for _ in range(2)]
    g.factors = []
    for k in range(3):
        node = g.nodes[k]
        cov = np.zeros((15, 15))
        cov[:6, :6] = POSE_COV
        cov[6:9, 6:9] = np.eye(3) * 1e-2
        cov[9:, 9:] = cov_b[k]
        g.add_factor(PriorFactor(k, OrderedDict([("x", node.X), ("v", node.v), ("b", means_b[k])]), cov))
    for k in range(2):
        g.add_factor(BiasWalkFactor(k, k + 1, walk[k]))
    H, grad, _ = g.normal_equations()
    delta = np.linalg.solve(H.toarray(), -grad)
    sol = g.retract(g.nodes, delta)
    # closed form weighted least squares over the stacked biases
    A, y = [], []
    for k in range(3):
        W = whitening(cov_b[k])
        row = np.zeros((6, 18))
        row[:, 6 * k:6 * k + 6] = W
        A.append(row)
        y.append(W @ means_b[k])
    for k in range(2):
        W = whitening(walk[k])
        row = np.zeros((6, 18))
        row[:, 6 * k:6 * k + 6] = -W
        row[:, 6 * k + 6:6 * k + 12] = W
        A.append(row)
        y.append(np.zeros(6))
    b_star = np.linalg.lstsq(np.vstack(A), np.concatenate(y), rcond=None)[0]
    np.testing.assert_allclose(np.concatenate([sol[k].b for k in range(3)]), b_star, atol=1e-8)
    for k in range(3):
        np.testing.assert_allclose(sol[k].X, g.nodes[k].X, atol=1e-12)


def test_fk_jacobians_match_closed_form(rng, robot):
    node = random_node(rng, 0)
    alpha = rng.normal(size=12) * 0.2
    H = robot.fk_base_to_contact("left", alpha)
    node.C = node.X @ H
    f = FKFactor(0, H, fk_factor_covariance(EncoderReading(0.0, alpha, 1e-6), "left", robot))
    Jx, Jc = f.jacobian([node])
    # at a consistent point: d/dx = Ad(H^-1), d/dc = -I
    np.testing.assert_allclose(Jx, mf.adjoint(mf.inverse(H)), atol=1e-8)
    np.testing.assert_allclose(Jc, -np.eye(6), atol=1e-8)
    Jx2, _ = f.jacobian([node], h=1e-5)
    assert np.linalg.norm(Jx2 - Jx) / np.linalg.norm(Jx) < 1e-5


def test_residual_failure_is_wrapped(rng):
    g = prior_graph(rng, 2)
    g.add_factor(RelPoseFactor(0, 1, mf.inverse(g.nodes[0].X) @ g.nodes[1].X @ mf.se3_exp([0, 0, np.pi, 0, 0, 0]),
                               POSE_COV))
    with pytest.raises(ResidualEvaluationFailed):
        g.cost()


def test_prior_only_solve_recovers_mean(rng):
    g = prior_graph(rng)
    mean = g.nodes[0].X.copy()
    init = OrderedDict([(0, g.nodes[0].retract(np.concatenate([rng.normal(size=6) * 0.3, np.zeros(9)])))])
    sol, report = g.solve_lm(init)
    assert report.converged and report.final_cost <= report.initial_cost
    np.testing.assert_allclose(sol[0].X, mean, atol=1e-8)


def test_two_node_relpose_composition(rng):
    g = prior_graph(rng, 2)
    L = mf.se3_exp(rng.normal(size=6) * 0.5)
    g.add_factor(RelPoseFactor(0, 1, L, POSE_COV))
    g.add_factor(BiasWalkFactor(0, 1, np.eye(6) * 1e-6))
    g.add_factor(PriorFactor(1, OrderedDict([("v", np.zeros(3))]), np.eye(3)))
    sol, report = g.solve_lm()
    assert report.converged
    np.testing.assert_allclose(sol[1].X, sol[0].X @ L, atol=1e-8)
    np.testing.assert_allclose(sol[0].X, g.nodes[0].X, atol=1e-8)


def test_resolving_a_solution_takes_no_steps(rng):
    g = prior_graph(rng, 2)
    g.add_factor(RelPoseFactor(0, 1, mf.se3_exp(rng.normal(size=6) * 0.5), POSE_COV))
    g.add_factor(BiasWalkFactor(0, 1, np.eye(6) * 1e-6))
    g.add_factor(PriorFactor(1, OrderedDict([("v", np.zeros(3))]), np.eye(3)))
    sol, _ = g.solve_lm()
    again, report = g.solve_lm(sol)
    assert report.converged and report.accepted == 0


def test_unanchored_graph_is_singular(rng):
    g = FactorGraph()
    g.add_node(random_node(rng, 0, contact=False)).add_node(random_node(rng, 1, contact=False))
    g.add_factor(RelPoseFactor(0, 1, np.eye(4), POSE_COV))
    g.add_factor(BiasWalkFactor(0, 1, np.eye(6)))
    with pytest.raises(SingularNormalEquations):
        g.solve_lm()
    h = prior_graph(rng, 2)
    with pytest.raises(SingularNormalEquations):
        h.solve_lm()


def test_noise_free_walk_is_exact_optimum(noise_free_walk):
    _, truth, data = noise_free_walk
    kg = build_graph(data, "vic")
    sol, report = kg.graph.solve_lm()
    assert report.converged
    assert report.final_cost < 1e-10


def test_prior_only_marginal_equals_prior(rng):
    cov = np.diag([1e-4] * 6 + [1e-2] * 3 + [1e-6] * 6)
    cov[:6, :6] = spd(rng, 6, 1e-2)
    g = prior_graph(rng, cov=cov)
    M = g.marginal_covariance(g.nodes, 0)
    np.testing.assert_allclose(M, cov, atol=1e-9, rtol=1e-6)


def test_two_node_marginal_matches_dense_inverse(rng):
    g = prior_graph(rng, 2)
    L = mf.inverse(g.nodes[0].X) @ g.nodes[1].X
    g.add_factor(RelPoseFactor(0, 1, L, POSE_COV))
    g.add_factor(BiasWalkFactor(0, 1, np.eye(6) * 1e-6))
    g.add_factor(PriorFactor(1, OrderedDict([("v", np.zeros(3))]), np.eye(3)))
    H, _, _ = g.normal_equations()
    dense = np.linalg.inv(H.toarray())
    M = g.marginal_covariance(g.nodes, 1)
    np.testing.assert_allclose(M, dense[15:, 15:], rtol=1e-8, atol=1e-14)
    # first-order transport: Ad(L^-1) P0 Ad(L^-1)^T + relpose covariance
    Ad = mf.adjoint(mf.inverse(L))
    np.testing.assert_allclose(M[:6, :6], Ad @ (np.eye(6) * 1e-4) @ Ad.T + POSE_COV, rtol=1e-4, atol=1e-12)


def test_dropping_factors_never_lowers_logdet(rng):
    for trial in range(10):
        n = 4
        g = prior_graph(rng, n)
        for k in range(n - 1):
            g.add_factor(RelPoseFactor(k, k + 1, mf.inverse(g.nodes[k].X) @ g.nodes[k + 1].X, POSE_COV))
            g.add_factor(BiasWalkFactor(k, k + 1, np.eye(6) * 1e-6))
            g.add_factor(PriorFactor(k + 1, OrderedDict([("v", np.zeros(3))]), np.eye(3)))
        extra = [RelPoseFactor(0, k, mf.retract(mf.inverse(g.nodes[0].X) @ g.nodes[k].X, rng.normal(size=6) * 0.01),
                               spd(rng, 6, 0.05)) for k in range(2, n)]
        full = FactorGraph()
        full.nodes = g.nodes
        full.factors = g.factors + extra
        for k in range(n):
            lo = pose_logdet(full.marginal_covariance(full.nodes, k))
            hi = pose_logdet(g.marginal_covariance(g.nodes, k))
            assert hi >= lo - 1e-9


def test_terrain_residual_examples():
    assert terrain_factor_residual(np.eye(4)) == 0.0
    assert terrain_factor_residual(mf.make_pose(p=[1.0, 2.0, 0.03])) == pytest.approx(0.03, abs=1e-15)
    f = TerrainFactor(0, 1e-3, height=0.5)
    node = StateNode(0, 0.0, np.eye(4), np.zeros(3), np.zeros(6), mf.make_pose(p=[0, 0, 0.7]))
    assert f.residual([node])[0] == pytest.approx(0.2, abs=1e-15)


def test_relpose_residual_examples(rng):
    Xi, Xj = mf.se3_exp(rng.normal(size=6)), mf.se3_exp(rng.normal(size=6))
    L = mf.inverse(Xi) @ Xj
    np.testing.assert_allclose(relpose_factor_residual(Xi, Xj, L), 0.0, atol=1e-12)
    eps = rng.normal(size=6) * 1e-2
    np.testing.assert_allclose(relpose_factor_residual(Xi, Xj @ mf.se3_exp(eps), L), eps, atol=1e-12)
    # non-adjacent keys use the same residual
    g = prior_graph(rng, 4)
    f = RelPoseFactor(0, 3, mf.inverse(g.nodes[0].X) @ g.nodes[3].X, POSE_COV)
    g.add_factor(f)
    np.testing.assert_allclose(f.residual([g.nodes[0], g.nodes[3]]), 0.0, atol=1e-12)


@pytest.mark.parametrize("kind", FACTOR_KINDS)
def test_batched_jacobian_matches_single_evaluations(kind, rng, robot):
    f, nodes = factor_setup(kind, rng, robot)
    h = 1e-6
    index = {k: i for i, k in enumerate(f.keys)}
    for (key, block), J in zip(f.blocks, f.jacobian(nodes)):
        n = J.shape[1]
        for c in range(n):
            d = np.zeros(n)
            d[c] = h
            plus, minus = list(nodes), list(nodes)
            plus[index[key]] = nodes[index[key]].retract_block(block, d)
            minus[index[key]] = nodes[index[key]].retract_block(block, -d)
            col = (f.residual(plus) - f.residual(minus)) / (2 * h)
            np.testing.assert_allclose(J[:, c], col, atol=1e-7)


@pytest.mark.parametrize("kind", FACTOR_KINDS)
def test_richardson_ratio(kind, rng, robot):
    for _ in range(5):
        f, nodes = factor_setup(kind, rng, robot)
        ratio, rel = richardson_ratio(f, nodes)
        assert ratio >= 3.5 or rel < 1e-12
