"""Command-line entry point: ``rfidloc <subcommand> --config FILE``.

Exit status is 0 on success, 1 for usage or configuration errors and 2 for
failures while running (unreachable calibration, I/O, singular geometry).
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .coverage import coverage_map, coverage_percentage, fmt, write_coverage_csv
from .estimation import NotLocalizableError
from .experiments import (
    CalibrationError,
    ConfigError,
    SweepPoint,
    calibrate_link_budget,
    coverage_vs_reflection,
    evaluate_accuracy,
    result_stem,
    run_accuracy_sweep,
    run_coverage_sweep,
    write_cdf_csv,
    write_crlb_csv,
    write_localization_csv,
    write_manifest,
    write_sweep_csv,
)
from .propagation import SingularGeometryError

log = logging.getLogger("rfidloc")

SUBCOMMANDS = ("coverage", "crlb-map", "mle-sim", "sweep", "calibrate")

# --full-scale: 1 cm coverage grid, 10 cm accuracy sub-grid, 1000 trials per cell
FULL_SCALE = {"step": 0.01, "sample_step": 0.1, "trials_per_cell": 1000}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rfidloc", description="RFID coverage and localization-accuracy simulator.")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", required=True, help="scenario config (INI)")
    p.add_argument("--output-dir", default="results", help="where result files go (default: results)")
    p.add_argument("--seed", type=int, help="override [estimation] seed")
    p.add_argument("--threads", type=int, default=1, help="worker threads (default: 1)")
    p.add_argument("--grid-step", type=float, help="coverage grid step in meters")
    p.add_argument("--trials", type=int, help="Monte Carlo trials per cell")
    p.add_argument("--mode", choices=("monostatic", "bistatic"), help="override the configured mode(s)")
    p.add_argument("--full-scale", action="store_true", help="1 cm grid and 1000 trials per cell (slow)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


def _apply_flags(cfg: RunConfig, args) -> RunConfig:
    extra = {}
    if args.full_scale:
        extra.update(FULL_SCALE)
    if args.grid_step is not None:
        extra["step"] = args.grid_step
    if args.trials is not None:
        if args.trials < 1:
            raise ConfigError("--trials must be at least 1")
        extra["trials_per_cell"] = args.trials
    if args.seed is not None:
        extra["seed"] = args.seed
    if args.threads < 1:
        raise ConfigError("--threads must be at least 1")
    cfg = cfg.with_overrides(**extra)
    if args.mode:
        cfg.mode = args.mode
        cfg.sweep_modes = [args.mode]
    return cfg


def _calibrate(cfg: RunConfig) -> tuple[float, float]:
    sc = cfg.calibration_scenario()
    c = cfg.calibration
    product = calibrate_link_budget(c.target_coverage_pct, sc, c.tolerance_pp)
    return product, coverage_vs_reflection(sc)(product)


def _median_table(points: list[SweepPoint]) -> str:
    head = f"{'scenario':<40} {'coverage %':>10} {'CRLB m':>9} {'MLE m':>9}"
    rows = [head, "-" * len(head)]
    for p in points:
        crlb = "n/a" if math.isnan(p.median_crlb) else f"{p.median_crlb:.3f}"
        mle = "n/a" if math.isnan(p.median_mle) else f"{p.median_mle:.3f}"
        rows.append(f"{p.label:<40} {p.coverage_pct:>10.1f} {crlb:>9} {mle:>9}")
    return "\n".join(rows)


def _cmd_coverage(cfg, out: Path, args, meta) -> list[Path]:
    sc = cfg.scenario()
    cmap = coverage_map(sc)
    path = out / f"{result_stem(sc.placement, sc.elevation, sc.power_mw, sc.mode)}.csv"
    write_coverage_csv(cmap, path)
    pct = coverage_percentage(cmap)
    meta["coverage_pct"] = pct
    print(f"coverage: {pct:.1f}%")
    return [path]


def _cmd_crlb_map(cfg, out: Path, args, meta) -> list[Path]:
    sc = cfg.scenario()
    path = out / f"{result_stem(sc.placement, sc.elevation, sc.power_mw, sc.mode)}_crlb.csv"
    bounds = write_crlb_csv(sc, path)
    pct = coverage_percentage(coverage_map(sc))
    finite = bounds[np.isfinite(bounds)]
    print(f"coverage: {pct:.1f}%")
    if finite.size:
        med = float(np.median(finite))
        print(f"median CRLB RMSE: {med:.3f} m over {finite.size} localizable cells")
        meta["median_crlb_m"] = med
    else:
        print("median CRLB RMSE: n/a (no localizable cells)")
    return [path]


def _cmd_mle_sim(cfg, out: Path, args, meta) -> list[Path]:
    sc = cfg.scenario()
    pct = coverage_percentage(coverage_map(sc))
    loc = evaluate_accuracy(sc, workers=args.threads)
    stem = result_stem(sc.placement, sc.elevation, sc.power_mw, sc.mode)
    cells, cdf = out / f"{stem}_cells.csv", out / f"{stem}_cdf.csv"
    write_localization_csv(loc, cells)
    write_cdf_csv(loc, cdf)
    point = SweepPoint(sc.placement, sc.elevation, sc.power_mw, sc.mode, pct, localization=loc)
    if loc.n:
        point.median_crlb, point.median_mle = loc.median_crlb, loc.median_mle
    print(f"coverage: {pct:.1f}%")
    print(_median_table([point]))
    if not loc.n:
        print("no localizable cells on the sample grid")
    meta.update(coverage_pct=pct, localizable_cells=loc.n, fallback_cells=loc.fallback_cells)
    return [cells, cdf]


def _cmd_sweep(cfg, out: Path, args, meta) -> list[Path]:
    axes = (cfg.sweep_placements, cfg.sweep_thetas, cfg.sweep_powers, cfg.sweep_modes)
    if cfg.sweep_accuracy:
        result = run_accuracy_sweep(
            *axes, overrides=cfg.overrides, workers=args.threads, allow_off_sweep=cfg.allow_off_sweep
        )
    else:
        result = run_coverage_sweep(
            *axes, overrides=cfg.overrides, workers=args.threads, allow_off_sweep=cfg.allow_off_sweep
        )
    files = []
    for p in result.points:
        path = out / f"{p.label}.csv"
        write_coverage_csv(p.coverage, path)
        files.append(path)
        if p.localization is not None:
            path = out / f"{p.label}_cells.csv"
            write_localization_csv(p.localization, path)
            files.append(path)
    summary = out / "sweep.csv"
    write_sweep_csv(result, summary)
    files.append(summary)
    print(_median_table(result.points))
    for mode in cfg.sweep_modes:
        for power in cfg.sweep_powers:
            mean = result.mean_coverage(mode=mode, power_mw=float(power))
            print(f"mean coverage {mode} {power:g} mW: {mean:.1f}%")
    return files


def _cmd_calibrate(cfg, out: Path, args, meta) -> list[Path]:
    c = cfg.calibration
    product, achieved = _calibrate(cfg)
    path = out / "calibration.json"
    record = {
        "target_coverage_pct": c.target_coverage_pct,
        "anchor": result_stem(c.placement, c.theta, c.power_mw, c.mode),
        "reflection_product": fmt(product),
        "achieved_coverage_pct": fmt(achieved),
    }
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    print(f"mu_T*|Gamma|^2 = {product:.6g} gives coverage: {achieved:.1f}% (target {c.target_coverage_pct:g}%)")
    return [path]


_COMMANDS = {
    "coverage": _cmd_coverage,
    "crlb-map": _cmd_crlb_map,
    "mle-sim": _cmd_mle_sim,
    "sweep": _cmd_sweep,
    "calibrate": _cmd_calibrate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"rfidloc: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        cfg = _apply_flags(load_config(args.config), args)
        out = Path(args.output_dir)
        meta = {"command": args.subcommand, "config": str(args.config)}
        if cfg.calibration.apply and args.subcommand != "calibrate":
            product, achieved = _calibrate(cfg)
            log.info("calibrated mu_T*|Gamma|^2 = %.6g (%.2f%%)", product, achieved)
            cfg = cfg.with_reflection_product(product)
            meta["reflection_product"] = fmt(product)
        out.mkdir(parents=True, exist_ok=True)
        files = _COMMANDS[args.subcommand](cfg, out, args, meta)
        scenario = None if args.subcommand == "sweep" else cfg.scenario()
        write_manifest(out / f"{args.subcommand}_manifest.json", scenario, files, **meta)
    except ConfigError as exc:
        print(f"rfidloc: config error: {exc}", file=sys.stderr)
        return 1
    except (CalibrationError, NotLocalizableError, SingularGeometryError, OSError, ValueError) as exc:
        print(f"rfidloc: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
