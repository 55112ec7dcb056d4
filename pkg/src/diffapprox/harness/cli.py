"""Command-line front end: ``diffapprox <command> <config.json> [options]``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import platform
import sys
import time
from importlib import metadata
from pathlib import Path

from .. import _parallel
from ..errors import CenteringError, DiffApproxError
from .config import dumps, load_config
from .experiments import (
    run_average,
    run_moment_scan,
    run_poisson_check,
    run_simulate,
    run_weak_error,
    validate_config,
)

COMMANDS = ("validate-config", "simulate", "average", "poisson-check", "weak-error", "moment-scan")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_CENTERING = 0, 1, 2, 3


def _versions() -> dict:
    out = {"python": platform.python_version()}
    for pkg in ("artifact", "numpy", "scipy", "numba"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def _global_flags(parser: argparse.ArgumentParser, suppress: bool):
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--seed", type=int, default=d, help="override the config seed (unsigned 64-bit)")
    parser.add_argument("--threads", type=int, default=d, help="worker threads for path ensembles")
    parser.add_argument("--out", default=d, help="output directory (default: config 'output' or ./results)")
    parser.add_argument("--format", choices=("csv", "json"), default=d, help="table format")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffapprox", description="Slow-fast SPDE diffusion-approximation laboratory")
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "validate-config": "check the standing assumptions (trace, radonifying, Lambda_t, centering)",
        "simulate": "ensemble statistics of the slow-fast system for every epsilon",
        "average": "Monte Carlo homogenized coefficients at the configured states",
        "poisson-check": "Monte Carlo Poisson solution and generator residuals",
        "weak-error": "weak-error sweep across epsilon and fitted rate",
        "moment-scan": "uniform-in-epsilon moment proxy",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=helps[name])
        p.add_argument("config", help="experiment JSON file")
        if name == "weak-error":
            p.add_argument("--check-times", type=int, default=1,
                           help="report the largest error over T/k, 2T/k, ..., T (default: T only)")
    return parser


def _table_text(rows: list[dict], fmt: str, schema: str | None = None) -> str:
    if fmt == "json":
        return dumps(rows) + "\n"
    buf = io.StringIO()
    if schema:
        buf.write(f"# schema={schema}\n")
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    started = time.time()
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_overrides(seed=args.seed)
    except DiffApproxError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    threads = args.threads if args.threads is not None else 1
    _parallel.set_threads(threads)
    fmt = args.format or "csv"
    out_dir = Path(args.out or cfg.raw.get("output") or "results")
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = args.command.replace("-", "_")
    manifest = {
        "command": args.command,
        "config_file": str(args.config),
        "resolved_config": cfg.resolved(),
        "seed": cfg.seed,
        "threads": threads,
        "versions": _versions(),
    }
    code = EXIT_OK
    try:
        if args.command == "weak-error":
            report = run_weak_error(cfg, n_check_times=args.check_times, threads=threads)
            text = report.to_csv() if fmt == "csv" else dumps(report.as_dict()) + "\n"
            manifest["result"] = {k: v for k, v in report.as_dict().items() if k != "rows"}
            for r in report.rows:
                print(f"eps={r.eps:<8g} error={r.weak_error:.5g} +- {r.weak_stderr:.2g}")
            if report.fit.slope is not None:
                lo, hi = report.fit.slope_ci
                print(f"slope={report.fit.slope:.4f} CI=[{lo:.3f}, {hi:.3f}] status={report.status}")
            else:
                print(f"status={report.status}: {report.fit.message}")
        elif args.command == "moment-scan":
            scan = run_moment_scan(cfg, threads=threads)
            text = scan.to_csv() if fmt == "csv" else dumps(scan.as_dict()) + "\n"
            manifest["result"] = {"spreads": scan.as_dict()["spreads"], "flags": scan.as_dict()["flags"],
                                  "fast_spread": scan.fast_spread}
            for g, sp in scan.spreads.items():
                print(f"gamma={g:g} spread={sp:.3f} flags={','.join(scan.flags[g]) or '-'}")
        elif args.command == "validate-config":
            report = validate_config(cfg)
            rows = [{"check": c["check"], "status": c["status"]} for c in report["checks"]]
            text = dumps(report) + "\n" if fmt == "json" else _table_text(rows, "csv", "validation/v1")
            manifest["result"] = report
            for c in report["checks"]:
                print(f"{c['check']:<22} {c['status']}")
            print(f"overall: {report['overall']}")
            code = EXIT_FAIL if report["overall"] == "fail" else EXIT_OK
        elif args.command == "average":
            records = run_average(cfg)
            text = dumps(records) + "\n" if fmt == "json" else _table_text(
                [{"state_hash": r["state_hash"], "coefficient": r["coefficient"], "value": json.dumps(r["value"]),
                  "stderr": json.dumps(r["stderr"])} for r in records], "csv", "average/v1")
            print(f"{len(records)} coefficient records")
        elif args.command == "poisson-check":
            res = run_poisson_check(cfg)
            text = dumps(res) + "\n"
            fmt = "json"
            for key in ("residual_analytic", "residual_surrogate"):
                if key in res:
                    print(f"{key}={res[key]:.3g}")
        else:
            rows = run_simulate(cfg, threads=threads)
            text = _table_text(rows, fmt, "simulate/v1")
            print(f"{len(rows)} rows")
    except CenteringError as exc:
        print(f"error: {exc}", file=sys.stderr)
        manifest["error"] = {"type": "centering", "residual": exc.residual.tolist(), "message": str(exc)}
        code = EXIT_CENTERING
        text = None
    except DiffApproxError as exc:
        print(f"error: {exc}", file=sys.stderr)
        manifest["error"] = {"type": type(exc).__name__, "message": str(exc)}
        code = EXIT_FAIL
        text = None
    if text is not None:
        path = out_dir / f"{stem}.{fmt}"
        path.write_text(text)
        manifest["output"] = str(path)
    manifest["wall_time_s"] = time.time() - started
    (out_dir / f"{stem}_manifest.json").write_text(dumps(manifest) + "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
