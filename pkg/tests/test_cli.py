import json

import numpy as np
import pytest

from hybrid_contact import cli, io
from hybrid_contact.exceptions import ConfigError, SingularNormalEquations
from hybrid_contact.graph import FactorGraph


def simulate(tmp_path, name, config_text, seed=None):
    cfg = tmp_path / f"{name}.cfg"
    cfg.write_text(config_text)
    out = tmp_path / f"{name}.jsonl"
    argv = ["simulate", "--config", str(cfg), "--out", str(out)]
    if seed is not None:
        argv += ["--seed", str(seed)]
    return cli.main(argv), out


def estimate(dataset, out, factors="vic", terrain="off"):
    return cli.main(["estimate", "--dataset", str(dataset), "--factors", factors,
                     "--keyframe-dt", "0.25", "--terrain", terrain, "--out", str(out)])


def evaluate(out, truth):
    code = cli.main(["evaluate", "--estimate", str(out / "trajectory.csv"), "--truth", str(truth),
                     "--out", str(out / "eval")])
    assert code == 0
    return json.loads((out / "eval" / "summary.json").read_text())


def test_parse_config_text():
    cfg = cli.parse_config_text("# walk\nduration = 5   # seconds\nseed=3\n\n"
                                "dropout_windows = [(1, 2), (3.5, 4)]\n")
    assert cfg == {"duration": 5.0, "seed": 3, "dropout_windows": ((1.0, 2.0), (3.5, 4.0))}
    assert isinstance(cfg["seed"], int)
    with pytest.raises(ConfigError, match="line 2: unknown config key 'walk_speed'"):
        cli.parse_config_text("seed = 1\nwalk_speed = 2\n")
    for bad in ["duration", "duration = fast", "seed = 1.5", "seed = True", "duration = [1]"]:
        with pytest.raises(ConfigError):
            cli.parse_config_text(bad)


def test_default_config_simulate(tmp_path, capsys):
    code, out = simulate(tmp_path, "d", "duration = 3.0\n")
    assert code == 0
    printed = capsys.readouterr().out
    assert "switches: 4" in printed and "imu: 1201" in printed and "relpose: 12" in printed
    truth = cli.truth_path_for(out)
    assert truth.name == "d.truth.jsonl" and truth.exists()
    recs = io.read_dataset(out)
    assert recs[0]["type"] == "truth"
    assert len(io.read_dataset(truth)) == 1201


def test_bad_key_exits_2(tmp_path, capsys):
    code, out = simulate(tmp_path, "bad", "duration = 3.0\nfoot_colour = 1\n")
    assert code == 2
    assert "foot_colour" in capsys.readouterr().err
    assert not out.exists()
    code, _ = simulate(tmp_path, "inf", "duration = 3.0\nstep_length = 3.0\n")
    assert code == 2


def test_same_seed_identical_files(tmp_path):
    _, a = simulate(tmp_path, "a", "duration = 2.0\n", seed=9)
    _, b = simulate(tmp_path, "b", "duration = 2.0\n", seed=9)
    _, c = simulate(tmp_path, "c", "duration = 2.0\n", seed=10)
    assert a.read_bytes() == b.read_bytes()
    assert a.read_bytes() != c.read_bytes()


def test_noise_free_vic_recovers_truth(tmp_path):
    noise_free = ("duration = 10.0\nsigma_alpha = 0\ngyro_sigma = 0\naccel_sigma = 0\n"
                  "gyro_walk = 0\naccel_walk = 0\nrelpose_sigma_rot = 0\nrelpose_sigma_trans = 0\n")
    _, data = simulate(tmp_path, "nf", noise_free)
    out = tmp_path / "nf_vic"
    assert estimate(data, out) == 0
    header, table = io.read_csv(out / "trajectory.csv")
    assert header[:8] == ["t", "qw", "qx", "qy", "qz", "px", "py", "pz"] and len(table) == 41
    h, logdet = io.read_csv(out / "pose_logdet.csv")
    assert h == ["t", "logdet"] and np.all(np.isfinite(logdet[:, 1]))
    report = json.loads((out / "report.json").read_text())
    assert report["converged"] and report["factors"] == "vic"
    summary = evaluate(out, cli.truth_path_for(data))
    assert summary["ate_max"] < 1e-4
    header, cdf = io.read_csv(out / "eval" / "rpe_cdf.csv")
    assert header == ["error", "fraction"] and cdf[-1, 1] == 1.0


@pytest.fixture(scope="module")
def noisy_dataset(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("noisy")
    code, data = simulate(tmp, "walk", "duration = 20.0\nseed = 2\n")
    assert code == 0
    return tmp, data


def test_imu_only_drifts_more_than_vic(noisy_dataset):
    tmp, data = noisy_dataset
    drift = {}
    for fs in ("i", "vic"):
        assert estimate(data, tmp / fs, factors=fs) == 0
        drift[fs] = evaluate(tmp / fs, cli.truth_path_for(data))["final_drift"]
    assert drift["i"] > drift["vic"]


def test_terrain_reduces_z_error(noisy_dataset):
    tmp, data = noisy_dataset
    truth = io.records_to_truth(io.read_dataset(cli.truth_path_for(data)))
    err = {}
    for terrain in ("off", "on"):
        out = tmp / f"terrain_{terrain}"
        assert estimate(data, out, terrain=terrain) == 0
        t, X = cli._read_trajectory_csv(out / "trajectory.csv")
        idx = np.searchsorted(truth[0], t - 1e-9)
        err[terrain] = np.sqrt(np.mean((X[:, 2, 3] - truth[1][idx, 2, 3]) ** 2))
    assert err["on"] < err["off"]


def test_terrain_requires_contact(noisy_dataset, capsys):
    tmp, data = noisy_dataset
    assert estimate(data, tmp / "bad", factors="vi", terrain="on") == 2
    assert "terrain" in capsys.readouterr().err


def test_solver_failure_exits_3_with_report(noisy_dataset, monkeypatch):
    tmp, data = noisy_dataset

    def fail(self, *a, **k):
        raise SingularNormalEquations("forced failure")

    monkeypatch.setattr(FactorGraph, "solve_lm", fail)
    out = tmp / "fail"
    assert estimate(data, out) == 3
    report = json.loads((out / "report.json").read_text())
    assert report["converged"] is False and "forced failure" in report["message"]


def test_evaluate_errors(noisy_dataset, tmp_path):
    _, data = noisy_dataset
    est = tmp_path / "est.csv"
    io.write_csv(est, ["t", "qw", "qx", "qy", "qz", "px", "py", "pz"],
                 [[100.0 + k, 1, 0, 0, 0, 0, 0, 0] for k in range(5)])
    argv = ["evaluate", "--estimate", str(est), "--truth", str(cli.truth_path_for(data)),
            "--out", str(tmp_path / "e")]
    assert cli.main(argv) == 2
    io.write_csv(est, ["t", "px"], [[0.0, 0.0]])
    assert cli.main(argv) == 2
    assert cli.main(["estimate", "--dataset", str(tmp_path / "missing.jsonl"), "--out", str(tmp_path)]) == 2


def test_usage_errors():
    with pytest.raises(SystemExit) as e:
        cli.main(["estimate", "--dataset", "x", "--factors", "vc", "--out", "y"])
    assert e.value.code == 2
