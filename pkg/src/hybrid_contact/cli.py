"""Command line entry points: ``simulate``, ``estimate`` and ``evaluate``.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
"""

import argparse
import ast
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import io, sim
from .estimator import TRAJECTORY_HEADER, HybridContactSmoother
from .evaluation import cdf_table, evaluate
from .manifold import qp_to_pose
from .exceptions import (ConfigError, HybridContactError, InfeasibleConfig, ParseError,
                         ResidualEvaluationFailed, SingularNormalEquations, TimestampMismatch)

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def parse_config_text(text):
    """``key = value`` lines into a dict of ScenarioConfig overrides.

    ``#`` starts a comment.  Values are Python literals; ``dropout_windows``
    takes a list of ``(t0, t1)`` pairs.
    """
    types = {f.name: f.type for f in fields(sim.ScenarioConfig)}
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        try:
            parsed = ast.literal_eval(value)
        except (ValueError, SyntaxError):
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {value!r}") from None
        out[key] = _coerce(key, types[key], parsed, lineno)
    return out


def _coerce(key, kind, value, lineno):
    kind = kind if isinstance(kind, str) else kind.__name__
    try:
        if kind == "float":
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if kind == "int":
            if isinstance(value, bool) or int(value) != value:
                raise TypeError
            return int(value)
        return tuple(tuple(float(x) for x in w) for w in value)
    except (TypeError, ValueError):
        raise ConfigError(f"line {lineno}: bad value for {key!r}: {value!r}") from None


def load_config(path, seed=None):
    overrides = parse_config_text(Path(path).read_text()) if path else {}
    cfg = sim.ScenarioConfig(**overrides)
    if seed is not None:
        cfg = replace(cfg, seed=int(seed))
    return cfg


def truth_path_for(dataset_path):
    p = Path(dataset_path)
    return p.with_name(p.stem + ".truth.jsonl")


def cmd_simulate(args):
    try:
        cfg = load_config(args.config, args.seed)
        truth, data = sim.generate(cfg)
    except (ConfigError, InfeasibleConfig) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    records = io.dataset_to_records(data)
    io.write_dataset(out, records)
    truth_out = truth_path_for(out)
    io.write_dataset(truth_out, io.truth_to_records(truth))
    counts = {}
    for rec in records:
        counts[rec["type"]] = counts.get(rec["type"], 0) + 1
    print(f"wrote {out} and {truth_out}")
    for kind in sorted(counts):
        print(f"{kind}: {counts[kind]}")
    print(f"switches: {len(truth.switch_times)}")
    return EXIT_OK


def _write_report(path, report):
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


def cmd_estimate(args):
    try:
        data = io.records_to_dataset(io.read_dataset(args.dataset))
    except (OSError, ParseError) as e:
        print(f"cannot read dataset: {e}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = HybridContactSmoother(factors=args.factors, keyframe_dt=args.keyframe_dt,
                                  terrain=args.terrain == "on")
    try:
        model.fit(data)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (SingularNormalEquations, ResidualEvaluationFailed) as e:
        report = model.report_.summary() if hasattr(model, "report_") else {}
        report.update(factors=args.factors, converged=False, message=str(e))
        _write_report(out / "report.json", report)
        print(f"solver failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    tr = model.trajectory_
    io.write_csv(out / "trajectory.csv", TRAJECTORY_HEADER, tr.table())
    io.write_csv(out / "pose_logdet.csv", ["t", "logdet"], np.column_stack([tr.t, tr.pose_logdet]))
    report = model.report_.summary()
    report.update(factors=args.factors, keyframes=int(len(tr.t)), terrain=args.terrain == "on")
    _write_report(out / "report.json", report)
    print(f"{args.factors}: {report['iterations']} iterations, cost "
          f"{report['initial_cost']:.6g} -> {report['final_cost']:.6g} ({report['message']})")
    if not report["converged"]:
        print("solver did not converge", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _read_trajectory_csv(path):
    header, rows = io.read_csv(path)
    rows = np.atleast_2d(rows)
    col = {name: i for i, name in enumerate(header)}
    missing = [c for c in TRAJECTORY_HEADER[:8] if c not in col]
    if missing:
        raise ParseError(f"{path}: missing columns {missing}")
    q = rows[:, [col[c] for c in ("qw", "qx", "qy", "qz")]]
    p = rows[:, [col[c] for c in ("px", "py", "pz")]]
    return rows[:, col["t"]], np.array([qp_to_pose(a, b) for a, b in zip(q, p)])


def cmd_evaluate(args):
    try:
        t_est, X_est = _read_trajectory_csv(args.estimate)
        t_true, X_true, _, _ = io.records_to_truth(io.read_dataset(args.truth))
    except (OSError, ParseError) as e:
        print(f"cannot read inputs: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        ev = evaluate(t_est, X_est, t_true, X_true)
    except TimestampMismatch as e:
        print(f"timestamp mismatch: {e}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_csv(out / "ate.csv", ["t", "position_error", "rotation_error"],
                 np.column_stack([ev.t, ev.ate_position, ev.ate_rotation]))
    io.write_csv(out / "rpe.csv", ["error"], ev.rpe.reshape(-1, 1))
    io.write_csv(out / "rpe_cdf.csv", ["error", "fraction"], cdf_table(ev.rpe))
    summary = ev.summary()
    _write_report(out / "summary.json", summary)
    print(f"ATE rmse {summary['ate_rmse']:.6g} m, final drift {summary['final_drift']:.6g} m, "
          f"RPE median {summary['rpe_median']:.6g} m")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="hybrid-contact", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a dataset and its ground truth")
    p.add_argument("--config", help="key = value file of scenario settings")
    p.add_argument("--out", required=True, help="dataset JSONL path; truth goes to <stem>.truth.jsonl")
    p.add_argument("--seed", type=int, help="overrides the seed in the config")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", help="smooth a dataset with a chosen factor set")
    p.add_argument("--dataset", required=True)
    p.add_argument("--factors", choices=["vic", "ic", "vi", "i"], default="vic")
    p.add_argument("--keyframe-dt", type=float, default=0.25)
    p.add_argument("--terrain", choices=["on", "off"], default="off")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("evaluate", help="compare an estimated trajectory with ground truth")
    p.add_argument("--estimate", required=True, help="trajectory CSV from estimate")
    p.add_argument("--truth", required=True, help="truth JSONL from simulate")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except HybridContactError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
