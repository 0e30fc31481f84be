"""Command-line interface: fit, test, simulate, predict-grid, summarize.

Every command writes deterministic artifacts for a given seed and config
(timestamps go only to run.log); output files start with comment lines
carrying the package version, the seed, and a hash of the effective
configuration.  Exit codes: 0 success, 2 user or configuration error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, data, design, inference, lmm, simulation
from .errors import FitError, InferenceError, PairsmoothError

USER_ERROR = 2
NUMERIC_ERROR = 3


def _config_hash(payload) -> str:
    canon = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _header(seed, payload) -> str:
    return (f"# pairsmooth {__version__}\n"
            f"# seed={seed} config_sha256={_config_hash(payload)}\n")


def _emit_error(exc, code):
    record = {"error": type(exc).__name__, "message": str(exc),
              "exit_code": code}
    print(json.dumps(record), file=sys.stderr)
    return code


def _load_schema(path):
    if path is None:
        return None
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _load_spec(path) -> design.ModelSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return design.ModelSpec.from_dict(json.load(fh))


def _delim(fmt: str) -> str:
    return "\t" if fmt == "tsv" else ","


def _log(out_dir: Path, message: str):
    with open(out_dir / "run.log", "a", encoding="utf-8") as fh:
        fh.write(f"[{time.strftime('%Y-%m-%dT%H:%M:%S')}] {message}\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_fit(args) -> int:
    ds = data.load_dataset(args.data, _load_schema(args.schema),
                           _delim(args.format))
    spec = _load_spec(args.spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"command": "fit", "spec": spec.to_dict(), "data": str(args.data)}
    _log(out, f"fit start data={args.data}")

    fm = lmm.fit(ds, spec)
    lmm.save_model(fm, out / "model.json")

    header = _header(args.seed, payload)
    rows = lmm.tau_confidence_intervals(fm)
    theta_se = lmm.theta_standard_errors(fm)
    with open(out / "parameters.txt", "w", encoding="utf-8") as fh:
        fh.write(header)
        fh.write(f"criterion: {fm.criterion}  value: {fm.loglik:.6f}  "
                 f"converged: {fm.converged}\n")
        fh.write("\nvariance components (95% CI from observed information)\n")
        fh.write(f"{'parameter':<16}{'estimate':>12}{'lower':>12}{'upper':>12}\n")
        for row in rows:
            fh.write(f"{row['name']:<16}{row['estimate']:>12.4f}"
                     f"{row['lower']:>12.4f}{row['upper']:>12.4f}\n")
        fh.write("\nfixed effects (SD from GLS covariance)\n")
        fh.write(f"{'coefficient':<24}{'estimate':>12}{'sd':>10}\n")
        for label, est, se in zip(fm.theta_labels, fm.theta, theta_se):
            fh.write(f"{label:<24}{est:>12.4f}{se:>10.4f}\n")
        fh.write("\neffective degrees of freedom per smooth\n")
        for label, edf in zip(fm.edf_labels, fm.edf):
            fh.write(f"{label:<24}{edf:>10.3f}\n")

    d = fm.design
    delim = _delim(args.format)
    u_rows = fm.subject_effects[d.row_subject, d.row_outcome - 1]
    with open(out / "residuals.csv", "w", encoding="utf-8") as fh:
        fh.write(header)
        fh.write(delim.join(["subject", "time", "outcome", "y", "mu_hat",
                             "subject_effect", "residual"]) + "\n")
        for k in range(d.y.shape[0]):
            sid = ds.subject_ids[d.row_subject[k]]
            fh.write(delim.join([
                sid, f"{d.row_time[k]:.10g}", str(int(d.row_outcome[k])),
                f"{d.y[k]:.10g}", f"{fm.fitted_mu[k]:.10g}",
                f"{u_rows[k]:.10g}", f"{fm.residuals[k]:.10g}"]) + "\n")
    _log(out, "fit done")
    return 0


def cmd_test(args) -> int:
    if args.seed is None:
        raise ValueError("--seed is required for test (no silent "
                         "nondeterminism)")
    ds = data.load_dataset(args.data, _load_schema(args.schema),
                           _delim(args.format))
    spec = _load_spec(args.spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"command": "test", "method": args.method,
               "spec": spec.to_dict(), "B": args.B, "seed": args.seed}
    _log(out, f"test start method={args.method}")

    if args.method == "bootstrap":
        result = inference.bootstrap_test(ds, spec, B=args.B, seed=args.seed,
                                          workers=args.threads)
    else:
        result = inference.adjusted_lrt(ds, spec, seed=args.seed)

    header = _header(args.seed, payload)
    with open(out / "report.txt", "w", encoding="utf-8") as fh:
        fh.write(header)
        fh.write(result.as_text() + "\n")
    with open(out / "result.json", "w", encoding="utf-8") as fh:
        json.dump(result.to_dict(), fh, indent=1)
    if result.bootstrap_stats is not None:
        delim = _delim(args.format)
        with open(out / "replicates.csv", "w", encoding="utf-8") as fh:
            fh.write(header)
            fh.write(delim.join(["replicate", "statistic", "converged"])
                     + "\n")
            for status, stat in zip(result.per_replicate_status,
                                    result.bootstrap_stats):
                fh.write(delim.join([
                    str(status["replicate"]), f"{stat:.10g}",
                    str(int(status.get("converged", True)))]) + "\n")
    _log(out, "test done")
    return 0


def cmd_simulate(args) -> int:
    with open(args.sim_config, "r", encoding="utf-8") as fh:
        cfg_dict = json.load(fh)
    if args.seed is not None:
        cfg_dict["seed"] = args.seed
    if args.reps is not None:
        cfg_dict["replications"] = args.reps
    if args.B is not None:
        cfg_dict["bootstrap_b"] = args.B
    cfg = simulation.SimConfig.from_dict(cfg_dict)
    if args.seed is None and "seed" not in cfg_dict:
        raise ValueError("--seed is required when the config carries none")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"command": "simulate", "config": cfg.to_dict()}
    header = _header(cfg.seed, payload)

    if args.export_dataset is not None:
        ds = simulation.simulate_dataset(cfg, args.replicate)
        data.write_dataset(ds, args.export_dataset, _delim(args.format),
                           header_comment=header.replace("# ", "").strip())
        return 0

    _log(out, f"simulate start reps={cfg.replications}")
    report = simulation.monte_carlo(cfg, workers=args.threads)
    delim = _delim(args.format)
    with open(out / "replicates.csv", "w", encoding="utf-8") as fh:
        fh.write(header)
        refs = sorted({k for o in report.outcomes for k in o.p_values})
        fh.write(delim.join(["replicate", "statistic", "converged",
                             *(f"p_{r}" for r in refs)]) + "\n")
        for o in report.outcomes:
            fh.write(delim.join([
                str(o.replicate), f"{o.statistic:.10g}",
                str(int(o.converged)),
                *(f"{o.p_values.get(r, float('nan')):.10g}" for r in refs)])
                + "\n")
    with open(out / "summary.txt", "w", encoding="utf-8") as fh:
        fh.write(header)
        fh.write(report.as_text() + "\n")
    _log(out, "simulate done")
    return 0


def cmd_predict_grid(args) -> int:
    saved = lmm.load_model(args.model)
    out_path = Path(args.out)
    if out_path.suffix == "" or out_path.is_dir():
        out_path.mkdir(parents=True, exist_ok=True)
        out_path = out_path / "grid.csv"
    groups = ([int(g) for g in args.groups.split(",")] if args.groups
              else list(range(1, saved.num_groups + 1)))
    outcomes = ([int(o) for o in args.outcomes.split(",")] if args.outcomes
                else [1, 2])
    payload = {"command": "predict-grid", "model": str(args.model),
               "grid_res": args.grid_res, "groups": groups,
               "outcomes": outcomes}
    delim = _delim(args.format)
    lines = [delim.join(["group", "outcome", "w", "h", "fit", "se",
                         "extrapolated"])]
    for g in groups:
        pts = np.asarray(saved.group_hulls[str(g)], dtype=float)
        w_grid = np.linspace(pts[:, 0].min(), pts[:, 0].max(), args.grid_res)
        h_grid = np.linspace(pts[:, 1].min(), pts[:, 1].max(), args.grid_res)
        gw, gh = np.meshgrid(w_grid, h_grid, indexing="ij")
        grid = np.column_stack([gw.ravel(), gh.ravel()])
        for outcome in outcomes:
            pred = lmm.predict_surface(saved, g, outcome, grid)
            for row, fit_v, se_v, ex in zip(grid, pred.fit, pred.se,
                                            pred.extrapolated):
                lines.append(delim.join([
                    str(g), str(outcome), f"{row[0]:.10g}", f"{row[1]:.10g}",
                    f"{fit_v:.10g}", f"{se_v:.10g}", str(int(ex))]))
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(_header(args.seed, payload))
        fh.write("\n".join(lines) + "\n")
    return 0


def cmd_summarize(args) -> int:
    ds = data.load_dataset(args.data, _load_schema(args.schema),
                           _delim(args.format))
    report = data.summarize(ds)
    text = report.as_text()
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        payload = {"command": "summarize", "data": str(args.data)}
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(_header(args.seed, payload))
            fh.write(text + "\n")
    print(text)
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pairsmooth",
        description="Joint smooth-surface models for paired longitudinal "
                    "outcomes: fitting, surface-equality tests, simulation.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data_arg=True):
        if data_arg:
            p.add_argument("--data", required=True, help="dataset file")
            p.add_argument("--schema", default=None,
                           help="JSON file mapping roles to column names")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--format", choices=("csv", "tsv"), default="csv")

    p_fit = sub.add_parser("fit", help="fit a joint model")
    common(p_fit)
    p_fit.add_argument("--spec", required=True, help="model spec JSON file")
    p_fit.set_defaults(func=cmd_fit)

    p_test = sub.add_parser("test", help="test equality of group surfaces")
    common(p_test)
    p_test.add_argument("--spec", required=True)
    p_test.add_argument("--method", choices=("bootstrap", "adjusted-lrt"),
                        default="bootstrap")
    p_test.add_argument("--B", type=int, default=1000,
                        help="bootstrap replications")
    p_test.set_defaults(func=cmd_test)

    p_sim = sub.add_parser("simulate", help="Monte Carlo size/power study")
    common(p_sim, data_arg=False)
    p_sim.add_argument("--sim-config", required=True)
    p_sim.add_argument("--reps", type=int, default=None)
    p_sim.add_argument("--B", type=int, default=None)
    p_sim.add_argument("--export-dataset", default=None,
                       help="write one simulated dataset to this path "
                            "instead of running the study")
    p_sim.add_argument("--replicate", type=int, default=0,
                       help="replicate index for --export-dataset")
    p_sim.set_defaults(func=cmd_simulate)

    p_grid = sub.add_parser("predict-grid",
                            help="export fitted surfaces on a grid")
    p_grid.add_argument("--model", required=True, help="model.json from fit")
    p_grid.add_argument("--out", required=True)
    p_grid.add_argument("--grid-res", type=int, default=25)
    p_grid.add_argument("--groups", default=None,
                        help="comma-separated group labels (default: all)")
    p_grid.add_argument("--outcomes", default=None,
                        help="comma-separated outcomes (default: 1,2)")
    p_grid.add_argument("--seed", type=int, default=None)
    p_grid.add_argument("--format", choices=("csv", "tsv"), default="csv")
    p_grid.set_defaults(func=cmd_predict_grid)

    p_sum = sub.add_parser("summarize", help="dataset summary")
    p_sum.add_argument("--data", required=True)
    p_sum.add_argument("--schema", default=None)
    p_sum.add_argument("--out", default=None)
    p_sum.add_argument("--seed", type=int, default=None)
    p_sum.add_argument("--format", choices=("csv", "tsv"), default="csv")
    p_sum.set_defaults(func=cmd_summarize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return USER_ERROR if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except (FitError, InferenceError) as exc:
        return _emit_error(exc, NUMERIC_ERROR)
    except PairsmoothError as exc:
        return _emit_error(exc, USER_ERROR)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        return _emit_error(exc, USER_ERROR)


if __name__ == "__main__":
    sys.exit(main())
