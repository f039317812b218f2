"""Command-line entry point.

Exit codes: 0 success, 1 partial failure (some sweep rows failed),
2 validation or domain error. Every output carries a schema version.
"""
from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import math
import sys
from importlib import resources
from pathlib import Path

import jsonschema
from scipy import stats

from . import detectors as det
from . import divergence as dv
from .model import ClassKind, ContaminationClass, InvalidClassError, ModelKind
from .risk import CSV_COLUMNS, Procedure, estimate_risk
from .sensing import History

SCHEMA_VERSION = 1
EXIT_OK, EXIT_PARTIAL, EXIT_INVALID = 0, 1, 2

DEFAULT_CLASS = {
    "uniform_scan": "disjoint_k_intervals",
    "uniform_sum": "disjoint_k_intervals",
    "st_intervals": "disjoint_k_intervals",
    "modified_st_intervals": "disjoint_k_intervals",
    "st_rectangles": "rectangles",
    "randomized_ksets": "k_sets",
    "variance_thresholding": "k_sets",
}
SWEEP_COLUMNS = CSV_COLUMNS + ("error",)
VALIDATION_ERRORS = (ValueError, jsonschema.ValidationError, KeyError)


class UsageError(ValueError):
    pass


def load_schema() -> dict:
    text = resources.files("corrsense").joinpath("schemas/experiment.schema.json").read_text()
    return json.loads(text)


def load_config(path: str, grid: bool) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON: {exc}") from exc
    jsonschema.validate(cfg, load_schema())
    if not grid:
        for key in ("procedure", "n", "k", "rho", "m"):
            if isinstance(cfg[key], list):
                raise UsageError(f"simulate takes a scalar {key!r}; use sweep for grids")
    return cfg


def _csv_writer(fh, columns) -> csv.DictWriter:
    fh.write(f"# schema_version={SCHEMA_VERSION}\n")
    writer = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    return writer


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def _rows_to_csv(rows, columns) -> str:
    buf = io.StringIO()
    writer = _csv_writer(buf, columns)
    for row in rows:
        writer.writerow({c: _fmt(row.get(c, "")) for c in columns})
    return buf.getvalue()


def build_class(kind: str, n: int, k: int, cfg: dict) -> ContaminationClass:
    if ClassKind(kind) is ClassKind.RECTANGLES:
        try:
            return ContaminationClass.rectangles(cfg["n1"], cfg["n2"], cfg["k1"], cfg["k2"])
        except KeyError as exc:
            raise UsageError("rectangles need n1, n2, k1 and k2") from exc
    return ContaminationClass(ClassKind(kind), n, k)


def build_procedure(cfg: dict, name: str, m: int) -> Procedure:
    options = {key: cfg[key] for key in ("alpha", "p", "calibration", "n_sims", "passes",
                                         "orientation") if key in cfg}
    return Procedure(name, m, **options)


def _as_list(v):
    return v if isinstance(v, list) else [v]


def grid_points(cfg: dict) -> list[dict]:
    keys = ("procedure", "n", "k", "rho", "m")
    return [dict(zip(keys, values))
            for values in itertools.product(*(_as_list(cfg[key]) for key in keys))]


def run_point(cfg: dict, point: dict, records=None, keep_history=False):
    name = point["procedure"]
    contamination = build_class(cfg.get("class", DEFAULT_CLASS[name]), point["n"], point["k"], cfg)
    procedure = build_procedure(cfg, name, point["m"])
    model = ModelKind(cfg["model"])
    est = estimate_risk(procedure, contamination, point["rho"], model, cfg["trials"],
                        alternatives=cfg.get("alternatives", "canonical"),
                        delta=cfg.get("delta", 0.05), master_seed=cfg["seed"],
                        workers=cfg.get("workers", 1), records=records,
                        keep_history=keep_history)
    return est, est.summary_row(procedure, contamination, point["rho"], model)


# ---------------------------------------------------------------------------
# subcommands

def cmd_kl(args) -> int:
    rows = []
    for rho, k in itertools.product(args.rho, args.k):
        if not 0 <= rho < 1:
            raise dv.DomainError(f"rho={rho} outside [0, 1) at grid point (rho={rho}, k={k})")
        if k < 1:
            raise dv.DomainError(f"k={k} must be positive at grid point (rho={rho}, k={k})")
        if args.model == "normalized":
            value = dv.kl_normalized(rho, k)
        elif args.model == "unnormalized":
            value = dv.kl_unnormalized(rho, k)
        else:
            value = dv.kl_chi2_scale(rho)
        rows.append({"model": args.model, "rho": rho, "k": k, "kl": value})
    sys.stdout.write(_rows_to_csv(rows, ("model", "rho", "k", "kl")))
    return EXIT_OK


def _class_from_args(args) -> ContaminationClass:
    cfg = {key: getattr(args, key) for key in ("n1", "n2", "k1", "k2") if getattr(args, key) is not None}
    return build_class(args.class_kind, args.n, args.k, cfg)


def cmd_bounds(args) -> int:
    contamination = _class_from_args(args)
    n, k = contamination.n, contamination.k
    budget = args.budget if args.budget is not None else args.m * n
    m_eff = budget / n
    report = {"schema_version": SCHEMA_VERSION, "model": args.model, **contamination.to_dict(),
              "rho": args.rho, "m": m_eff, "budget": budget,
              "d_bound": dv.d_bound(args.rho, k).to_dict(),
              "adaptive_lower_bound": dv.adaptive_lower_bound(args.rho, k, m_eff).to_dict()}
    if args.rho < 0.9:
        report["nonadaptive_lower_bound"] = dv.nonadaptive_lower_bound(
            contamination, args.rho, m_eff, ModelKind(args.model)).to_dict()
    else:
        report["nonadaptive_lower_bound"] = None
    try:
        report["class_complexity"] = dv.class_complexity(contamination, budget).to_dict()
    except dv.DomainError as exc:
        report["class_complexity"] = {"error": str(exc)}
    json.dump(report, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    contamination = _class_from_args(args)
    model = ModelKind(args.model)
    out = {"schema_version": SCHEMA_VERSION, **contamination.to_dict(), "model": model.value,
           "m": args.m, "alpha": args.alpha}
    out["scan_threshold_monte_carlo"] = det.scan_threshold(
        contamination, args.m, det.MonteCarloNull(args.alpha, args.n_sims, args.seed))
    out["scan_threshold_analytic"] = det.scan_threshold(contamination, args.m, det.AnalyticH(args.alpha))
    out["sum_threshold"] = contamination.n * float(stats.chi2.ppf(1.0 - args.alpha, args.m))
    if args.rho is not None:
        gammas = {}
        k = contamination.k
        reps = args.m // 4
        if reps >= 1:
            gammas["st_intervals"] = det.cached_null_median(
                det.EquicorrelatedRows(k, args.rho, model), reps, args.median_sims, args.seed)
            p = det.truncation_width(args.rho, k) if args.rho > 0 else k
            reps_p = (args.m * k // p) // 4
            gammas["modified_st_intervals"] = {"p": p, "gamma": det.cached_null_median(
                det.EquicorrelatedRows(p, args.rho, model), reps_p, args.median_sims, args.seed)}
        if model is ModelKind.UNNORMALIZED:
            p, _ = det.variance_subsample_size(contamination.n, k)
            reps_v = ((args.m * k) // (2 * p)) // 4
            if reps_v >= 1:
                gammas["variance_thresholding"] = det.cached_null_median(
                    det.ChiSquareScale(args.rho), reps_v, args.median_sims, args.seed)
        out["st_gamma"] = gammas
    text = json.dumps(out, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    sys.stdout.write(text + "\n")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = load_config(args.config, grid=False)
    point = {key: cfg[key] for key in ("procedure", "n", "k", "rho", "m")}
    records: list = []
    _, row = run_point(cfg, point, records, keep_history=bool(args.traces))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.csv").write_text(_rows_to_csv([row], CSV_COLUMNS))
    with open(out / "trials.jsonl", "w") as fh:
        for rec in records:
            history = rec.pop("history", None)
            fh.write(json.dumps({"schema_version": SCHEMA_VERSION, **rec}) + "\n")
            if args.traces and history is not None:
                tdir = Path(args.traces)
                tdir.mkdir(parents=True, exist_ok=True)
                name = f"trace_{rec['hypothesis']}_{rec['alt_index']}_{rec['trial']}.jsonl"
                with open(tdir / name, "w") as tf:
                    history.write_jsonl(tf)
    sys.stdout.write(_rows_to_csv([row], CSV_COLUMNS))
    return EXIT_OK


def _point_key(point: dict) -> tuple:
    return (point["procedure"], str(int(point["n"])), str(int(point["k"])),
            repr(float(point["rho"])), str(int(point["m"])))


def _completed_keys(path: Path) -> set:
    if not path.exists():
        return set()
    lines = [line for line in path.read_text().splitlines() if not line.startswith("#")]
    return {(r["procedure"], r["n"], r["k"], repr(float(r["rho"])), r["m"])
            for r in csv.DictReader(lines)}


def cmd_sweep(args) -> int:
    cfg = load_config(args.config, grid=True)
    out = Path(args.out or cfg.get("output") or "sweep.csv")
    points = grid_points(cfg)
    for point in points:
        name = point["procedure"]
        if name == "variance_thresholding" and cfg["model"] != "unnormalized":
            raise det.ModelMismatchError("variance_thresholding needs the unnormalized model")
    done = _completed_keys(out)
    fresh = not out.exists()
    failed = 0
    with open(out, "a") as fh:
        if fresh:
            writer = _csv_writer(fh, SWEEP_COLUMNS)
        else:
            writer = csv.DictWriter(fh, fieldnames=list(SWEEP_COLUMNS), lineterminator="\n")
        for point in points:
            if _point_key(point) in done:
                continue
            try:
                _, row = run_point(cfg, point)
                row["error"] = ""
            except Exception as exc:  # recorded per row; the sweep continues
                row = {"procedure": point["procedure"], "model": cfg["model"],
                       "class": cfg.get("class", DEFAULT_CLASS[point["procedure"]]),
                       "n": point["n"], "k": point["k"], "rho": float(point["rho"]),
                       "m": point["m"], "trials": cfg["trials"],
                       "error": f"{type(exc).__name__}: {exc}"}
                failed += 1
            writer.writerow({c: _fmt(row.get(c, "")) for c in SWEEP_COLUMNS})
            fh.flush()
    if failed == 0 and out.exists():
        lines = [line for line in out.read_text().splitlines() if not line.startswith("#")]
        failed = sum(1 for r in csv.DictReader(lines) if r["error"])
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_optimal_p(args) -> int:
    rows = []
    for rho in args.rho:
        if not 0 < rho < 1:
            raise dv.DomainError(f"rho={rho} outside (0, 1)")
        p, value = dv.optimal_truncation(rho, args.k, args.m)
        rows.append({"rho": rho, "k": args.k, "m": args.m, "p_opt": p, "objective": value,
                     "ceil_inv_rho": math.ceil(1.0 / rho), "rho_k": rho * args.k})
    sys.stdout.write(_rows_to_csv(rows, ("rho", "k", "m", "p_opt", "objective",
                                         "ceil_inv_rho", "rho_k")))
    return EXIT_OK


def cmd_replay(args) -> int:
    with open(args.trace) as fh:
        history = History.read_jsonl(fh)
    if history.n_rounds == 0:
        raise UsageError("trace holds no rounds")
    widths = sorted({len(q) for q, _ in history})
    out = {"schema_version": SCHEMA_VERSION, "rounds": history.n_rounds, "cost": history.cost,
           "query_widths": widths}
    if args.budget is not None:
        out["budget"] = args.budget
        out["within_budget"] = history.cost <= args.budget
    if args.n is not None and len(widths) == 1 and widths[0] == args.n:
        queries, samples = history.stacked()
        contamination = ContaminationClass(ClassKind(args.class_kind), args.n, args.k)
        scan = det.localized_scan_test(samples, contamination, 0.0,
                                       det.MonteCarloNull(args.alpha, args.n_sims))
        total = det.simple_sum_test(samples, args.alpha)
        out["uniform_scan"] = scan.to_dict()
        out["uniform_sum"] = total.to_dict()
    json.dump(out, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return EXIT_OK if out.get("within_budget", True) else EXIT_PARTIAL


# ---------------------------------------------------------------------------
# argument parsing

def _add_class_args(p: argparse.ArgumentParser, rho_required=True) -> None:
    p.add_argument("--class", dest="class_kind", default="k_sets",
                   choices=[c.value for c in ClassKind])
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    for dim in ("n1", "n2", "k1", "k2"):
        p.add_argument(f"--{dim}", type=int)
    p.add_argument("--model", default="normalized", choices=[m.value for m in ModelKind])
    p.add_argument("--rho", type=float, required=rho_required)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="corrsense", allow_abbrev=False,
                                     description="Correlation detection under a sensing budget.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("kl", help="tabulate closed-form KL divergences", allow_abbrev=False)
    p.add_argument("--model", default="normalized",
                   choices=["normalized", "unnormalized", "chi2_scale"])
    p.add_argument("--rho", type=float, nargs="+", required=True)
    p.add_argument("--k", type=int, nargs="+", default=[1])
    p.set_defaults(func=cmd_kl)

    p = sub.add_parser("bounds", help="minimax lower bounds for one configuration",
                       allow_abbrev=False)
    _add_class_args(p)
    p.add_argument("--m", type=float, default=1.0)
    p.add_argument("--budget", type=int, help="total budget M (default m * n)")
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("calibrate", help="scan thresholds and ST medians", allow_abbrev=False)
    _add_class_args(p, rho_required=False)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--n-sims", type=int, default=10_000)
    p.add_argument("--median-sims", type=int, default=det.DEFAULT_MEDIAN_SIMS)
    p.add_argument("--seed", type=int, default=det.CALIBRATION_SEED)
    p.add_argument("--out", help="also write the report to this file")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("simulate", help="estimate the risk of one configuration",
                       allow_abbrev=False)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--traces", help="directory for per-trial session traces")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="risk over a Cartesian grid (resumable)", allow_abbrev=False)
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output CSV (default: config 'output' or sweep.csv)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("optimal-p", help="best truncation width per rho", allow_abbrev=False)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--rho", type=float, nargs="+", required=True)
    p.set_defaults(func=cmd_optimal_p)

    p = sub.add_parser("replay", help="summarize a recorded session trace", allow_abbrev=False)
    p.add_argument("--trace", required=True)
    p.add_argument("--budget", type=int)
    p.add_argument("--class", dest="class_kind", default="disjoint_k_intervals",
                   choices=[c.value for c in ClassKind if c is not ClassKind.RECTANGLES])
    p.add_argument("--n", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--n-sims", type=int, default=10_000)
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (dv.DomainError, det.ModelMismatchError, InvalidClassError, det.CalibrationError,
            UsageError, *VALIDATION_ERRORS) as exc:
        msg = exc.message if isinstance(exc, jsonschema.ValidationError) else str(exc)
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
