"""``sdfreg`` command-line entry point.

Exit codes: 0 success, 2 config/parse error, 3 training failure, 4 solver failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .harness import (
    ConfigError,
    experiment_from_dict,
    registration_config_from_dict,
    run_benchmark,
    train_config_from_dict,
    write_benchmark,
)
from .neural import NeuralSdf, TrainingDivergedError, fit_sdf, load_mlp, save_mlp
from .pointcloud import CloudParseError, read_cloud, write_cloud
from .registration import CoarseToFineError, register, register_c2f
from .sdf import GridDomainError, load_grid, sample_surface, scene_from_dict

EXIT_OK, EXIT_CONFIG, EXIT_TRAIN, EXIT_SOLVER = 0, 2, 3, 4


class _Fail(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _load_json(path, what):
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise _Fail(EXIT_CONFIG, f"{what} file {path} does not exist")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise _Fail(EXIT_CONFIG, f"{path}: invalid JSON ({exc})") from exc


def _read_cloud(path):
    if not Path(path).is_file():
        raise _Fail(EXIT_CONFIG, f"input cloud {path} does not exist")
    try:
        return read_cloud(path)
    except (CloudParseError, ValueError) as exc:
        raise _Fail(EXIT_CONFIG, str(exc)) from exc


def _trace_csv(trace):
    rows = ["step,loss_self,loss_eikonal,loss_total"]
    rows += [f"{i},{ls!r},{le!r},{lt!r}" for i, (ls, le, lt) in enumerate(trace.tolist())]
    return "\n".join(rows) + "\n"


def cmd_fit_sdf(args):
    Q = _read_cloud(args.input)
    try:
        cfg = train_config_from_dict(_load_json(args.config, "config"))
        params, trace = fit_sdf(Q, cfg)
    except ConfigError as exc:
        raise _Fail(EXIT_CONFIG, f"config error: {exc}") from exc
    except TrainingDivergedError as exc:
        raise _Fail(EXIT_TRAIN, str(exc)) from exc
    except ValueError as exc:
        raise _Fail(EXIT_CONFIG, str(exc)) from exc
    save_mlp(params, args.out)
    trace_path = args.trace or f"{args.out}.loss.csv"
    Path(trace_path).write_text(_trace_csv(trace))
    print(f"wrote {args.out} and {trace_path} (final loss {trace[-1, 2]:.6g})")
    return EXIT_OK


def _load_sdf(path):
    p = Path(path)
    if not p.is_file():
        raise _Fail(EXIT_CONFIG, f"SDF file {path} does not exist")
    head = p.read_bytes()[:4]
    try:
        if head == b"SDFN":
            return NeuralSdf(load_mlp(p))
        if head == b"SDFG":
            return load_grid(p)
        return scene_from_dict(json.loads(p.read_text()))
    except (ValueError, TypeError, UnicodeDecodeError) as exc:
        raise _Fail(EXIT_CONFIG, f"{path}: cannot load SDF ({exc})") from exc


def _result_json(result):
    return {
        "theta_est": result.theta_est.matrix.tolist(),
        "iterations": result.iterations,
        "stop_reason": result.stop_reason,
        "query_count": result.query_count,
        "trace": [
            {"d_n": r.d_n, "lambda": r.lam, "step_norm": r.step_norm, "accepted": r.accepted, "eps": r.eps, "sse": r.sse}
            for r in result.trace
        ],
    }


def cmd_register(args):
    P = _read_cloud(args.source)
    sdf = _load_sdf(args.sdf)
    raw = dict(_load_json(args.config, "config"))
    try:
        train_cfg = train_config_from_dict(raw.pop("train", None))
        cfg = registration_config_from_dict(raw)
    except ConfigError as exc:
        raise _Fail(EXIT_CONFIG, f"config error: {exc}") from exc
    try:
        if cfg.c2f_enabled:
            if args.target is None:
                raise _Fail(EXIT_CONFIG, "config error: c2f_enabled needs --target")
            Q = _read_cloud(args.target)
            params = sdf.params if isinstance(sdf, NeuralSdf) else None
            result, _ = register_c2f(Q, P, train_cfg, cfg, params=params)
        else:
            result = register(sdf, P, cfg)
    except CoarseToFineError as exc:
        code = EXIT_TRAIN if "fit" in exc.stage or "refinement" in exc.stage else EXIT_SOLVER
        raise _Fail(code, str(exc)) from exc
    except GridDomainError as exc:
        raise _Fail(EXIT_SOLVER, str(exc)) from exc
    Path(args.out).write_text(json.dumps(_result_json(result), indent=2) + "\n")
    print(f"{result.stop_reason} after {result.iterations} iterations; wrote {args.out}")
    return EXIT_SOLVER if result.stop_reason == "solver_failure" else EXIT_OK


def cmd_benchmark(args):
    try:
        cfg = experiment_from_dict(_load_json(args.config, "config"))
    except ConfigError as exc:
        raise _Fail(EXIT_CONFIG, f"config error: {exc}") from exc

    def progress(t):
        note = f" ({t.error})" if t.error else ""
        print(f"trial {t.trial_id}: rot {t.rot_error_deg:.4f} deg, trans {t.trans_error:.5f}, {t.stop_reason}{note}")

    trials, summary = run_benchmark(cfg, progress if not args.quiet else None)
    report, table = write_benchmark(args.out_dir, cfg, trials, summary)
    print(
        f"success {summary.success_rate:.2%}; rot MAE {summary.rot_mae:.4f} RMSE {summary.rot_rmse:.4f}; "
        f"trans MAE {summary.trans_mae:.5f} RMSE {summary.trans_rmse:.5f}; wrote {report} and {table}"
    )
    return EXIT_OK


def cmd_synth(args):
    scene = _load_json(args.shape, "shape")
    try:
        model = scene_from_dict(scene)
        pts = sample_surface(model, args.n, args.seed)
    except (ValueError, TypeError) as exc:
        raise _Fail(EXIT_CONFIG, f"{args.shape}: {exc}") from exc
    write_cloud(args.out, pts)
    print(f"wrote {len(pts)} points to {args.out}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="sdfreg", description="SDF-based rigid point cloud registration")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit-sdf", help="train a neural SDF on a target cloud")
    p.add_argument("--input", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--trace", help="loss CSV path (default: <out>.loss.csv)")
    p.set_defaults(func=cmd_fit_sdf)

    p = sub.add_parser("register", help="register a source cloud against an SDF")
    p.add_argument("--source", required=True)
    p.add_argument("--sdf", required=True, help="SDFN model, SDFG grid or scene JSON")
    p.add_argument("--config")
    p.add_argument("--target", help="target cloud, required for coarse-to-fine runs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("benchmark", help="run a seeded benchmark suite")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("synth", help="sample points on an analytic scene")
    p.add_argument("--shape", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except _Fail as exc:
        print(f"sdfreg {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
