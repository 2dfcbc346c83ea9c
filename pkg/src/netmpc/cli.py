"""Command-line interface: ``simulate``, ``certify`` and ``compare``.

Exit codes: 0 success, 2 configuration error, 3 infeasibility, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .certify import certify_arrays
from .errors import ConfigError, ContractError, InfeasibleError, NumericalFailure
from .scenario import (
    RunRecord,
    Scenario,
    compare,
    load_scenario,
    prepare,
    run_closed_loop,
    scenario_from_dict,
    scenario_to_dict,
)

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_NUMERICAL = 0, 2, 3, 4
MARGIN_MATCH_TOL = 1e-12

log = logging.getLogger("netmpc")


# --------------------------------------------------------------------------
# serialisation


def _fmt(v) -> str:
    return format(float(v), ".17g")


def timeseries_header(n: int) -> list[str]:
    cols = ["t"]
    for prefix in ("s", "xa", "xs", "k", "qa", "qs"):
        cols += [f"{prefix}_{i + 1}" for i in range(n)]
    return cols + ["beta_a", "beta_s", "lambda_max", "y_norm1", "burden_cum"]


def timeseries_text(record: RunRecord) -> str:
    n = record.n
    lines = [",".join(timeseries_header(n))]
    y = record.y_norm
    burden = record.burden_cumulative
    for m in range(record.times.shape[0]):
        row = [record.times[m], *record.state_array[m], *record.control_array[m], *record.beta_array[m],
               record.lambdas[m], y[m], burden[m]]
        lines.append(",".join(_fmt(v) for v in row))
    return "\n".join(lines) + "\n"


def read_timeseries(path) -> dict:
    """Parse a wide timeseries CSV back into arrays; raises :class:`ConfigError` on malformed input."""
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    if not rows:
        raise ConfigError(f"{path}: empty timeseries file")
    header = rows[0]
    n_cols = len(header)
    if (n_cols - 6) % 6 != 0 or n_cols < 12:
        raise ConfigError(f"{path}: unexpected column count {n_cols}")
    n = (n_cols - 6) // 6
    if header != timeseries_header(n):
        missing = sorted(set(timeseries_header(n)) - set(header))
        raise ConfigError(f"{path}: missing or misordered provenance columns {missing[:6]}")
    if len(rows) < 2:
        raise ConfigError(f"{path}: no data rows")
    data = np.empty((len(rows) - 1, n_cols))
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != n_cols:
            raise ConfigError(f"{path}: line {r} has {len(row)} fields, expected {n_cols}")
        try:
            data[r - 2] = [float(v) for v in row]
        except ValueError as exc:
            raise ConfigError(f"{path}: line {r}: {exc}") from None
    if not np.all(np.isfinite(data)):
        raise ConfigError(f"{path}: non-finite values")
    return {
        "n": n,
        "t": data[:, 0],
        "states": data[:, 1:1 + 4 * n],
        "controls": data[:, 1 + 4 * n:1 + 6 * n],
        "betas": data[:, 1 + 6 * n:3 + 6 * n],
        "lambda_max": data[:, 3 + 6 * n],
    }


def summary_dict(record: RunRecord, scenario: Scenario) -> dict:
    return {
        "scenario": record.name,
        "controller": record.controller,
        "policy_mode": record.policy_mode,
        "forecast_mode": scenario.forecast_mode,
        "metrics": record.metrics,
        "certificate": record.certificate.to_dict(),
        "continuation": record.continuation,
        "status": record.status,
        "candidate_checks": record.candidate_checks,
    }


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _write_bundle(out_dir: Path, files: dict[str, str]) -> None:
    """Write every file via a temporary name and rename, so readers never see partial files."""
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        fd, tmp = tempfile.mkstemp(dir=out_dir, prefix=f".{name}.")
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, out_dir / name)


def _resolved(scenario: Scenario) -> dict:
    return scenario_to_dict(scenario)


def _run_bundle(scenario: Scenario) -> tuple[RunRecord, dict[str, str]]:
    record = run_closed_loop(scenario)
    return record, {
        "timeseries.csv": timeseries_text(record),
        "summary.json": _dumps(summary_dict(record, scenario)),
        "config.json": _dumps(_resolved(scenario)),
    }


def _apply_overrides(scenario: Scenario, args) -> Scenario:
    if getattr(args, "seed", None) is not None:
        scenario = scenario.with_seed(args.seed)
    if getattr(args, "substeps", None) is not None:
        scenario = scenario.with_substeps(args.substeps)
    return scenario


# --------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    scenario = _apply_overrides(load_scenario(args.config), args)
    record, files = _run_bundle(scenario)
    _write_bundle(Path(args.out), files)
    m = record.metrics
    print(f"{record.name}: certificate {'valid' if m['certificate_valid'] else 'INVALID'}, "
          f"peak {m['peak_prevalence']:.0f}, burden {m['cumulative_burden']:.6g}, "
          f"violations {m['violation_count']} -> {args.out}")
    return EXIT_OK


def certify_timeseries(timeseries_path, config_path=None) -> dict:
    """Recompute the decay certificate from a recorded run and compare with its summary."""
    ts_path = Path(timeseries_path)
    cfg_path = Path(config_path) if config_path else ts_path.parent / "config.json"
    ts = read_timeseries(ts_path)
    try:
        scenario = scenario_from_dict(json.loads(cfg_path.read_text()))
    except OSError as exc:
        raise ConfigError(f"{cfg_path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{cfg_path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    prep = prepare(scenario)
    if prep.model.n != ts["n"]:
        raise ConfigError(f"timeseries has n={ts['n']} but the config network has n={prep.model.n}")
    cert = certify_arrays(ts["t"], ts["states"], ts["controls"], ts["betas"], prep.model, prep.terminal)
    report = {"certificate": cert.to_dict()}
    summary_path = ts_path.parent / "summary.json"
    if summary_path.exists():
        embedded = json.loads(summary_path.read_text())["certificate"]
        diff = np.abs(np.array(embedded["per_step_margins"]) - np.array(cert.per_step_margins))
        max_diff = float(diff.max()) if diff.size else 0.0
        report["matches_summary"] = bool(
            embedded["valid"] == cert.valid and diff.size == len(cert.per_step_margins)
            and max_diff <= MARGIN_MATCH_TOL
        )
        report["max_margin_difference"] = max_diff
    return report


def cmd_certify(args) -> int:
    report = certify_timeseries(args.timeseries, args.config)
    text = _dumps(report)
    if args.out:
        _write_bundle(Path(args.out).parent, {Path(args.out).name: text})
    sys.stdout.write(text)
    return EXIT_OK


def cmd_compare(args) -> int:
    if len(args.configs) < 2:
        raise ConfigError("compare needs at least two configs")
    scenarios = [_apply_overrides(load_scenario(p), args) for p in args.configs]
    names = [s.name for s in scenarios]
    if len(set(names)) != len(names):
        scenarios = [replace(s, name=f"{i + 1:02d}-{s.name}") for i, s in enumerate(scenarios)]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_run_bundle, scenarios))
    else:
        results = [_run_bundle(s) for s in scenarios]
    records = [r for r, _ in results]
    report = compare(records)
    out = Path(args.out)
    for (record, files) in results:
        _write_bundle(out / record.name, files)
    _write_bundle(out, {"comparison.csv": report.to_csv(), "comparison.json": _dumps(report.to_dict())})
    sys.stdout.write(report.to_csv())
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="netmpc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, help="override the synthetic network seed")
        p.add_argument("--substeps", type=int, help="override RK4 substeps per sampling interval")

    sim = sub.add_parser("simulate", help="run one closed-loop scenario")
    sim.add_argument("--config", required=True, help="scenario JSON file")
    sim.add_argument("--out", required=True, help="output directory")
    common(sim)
    sim.set_defaults(func=cmd_simulate)

    cert = sub.add_parser("certify", help="recompute the decay certificate of a recorded run")
    cert.add_argument("timeseries", help="timeseries.csv written by simulate")
    cert.add_argument("--config", help="resolved config (default: config.json next to the timeseries)")
    cert.add_argument("--out", help="also write the report to this file")
    cert.set_defaults(func=cmd_certify)

    cmp_ = sub.add_parser("compare", help="run several scenarios and tabulate them")
    cmp_.add_argument("configs", nargs="+", help="scenario JSON files")
    cmp_.add_argument("--out", required=True, help="output directory")
    cmp_.add_argument("--jobs", type=int, default=1, help="parallel runs")
    common(cmp_)
    cmp_.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ContractError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
