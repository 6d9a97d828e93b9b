"""Scenario construction, coverage/accuracy sweeps, calibration and result files."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .coverage import (
    BISTATIC,
    MODES,
    CoverageMap,
    MONOSTATIC,
    GridSpec,
    antenna_pairs,
    coverage_map,
    coverage_percentage,
    evaluate_pairs,
    fmt,
)
from .estimation import crlb_field, mle_grid, trial_rng
from .propagation import Position3D, RadioParams, ReaderAntenna, mw_to_dbm

log = logging.getLogger(__name__)

SIDE = "side"
CORNER = "corner"
CUSTOM = "custom"
PLACEMENTS = (SIDE, CORNER, CUSTOM)

PAPER_POWER_RANGE_MW = (1000.0, 3000.0)
ANTENNA_HEIGHT = 2.0


class ConfigError(ValueError):
    pass


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class Scenario:
    room: GridSpec
    antennas: tuple[ReaderAntenna, ...]
    placement: str
    mode: str
    radio: RadioParams
    noise_sigma_db: float = 2.0
    mle_grid_step: float = 0.05
    trials_per_cell: int = 100
    seed: int = 0
    sample_step: float = 0.5
    mismatch_floor_dbm: float | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.placement not in PLACEMENTS:
            raise ConfigError(f"placement must be one of {PLACEMENTS}, got {self.placement!r}")
        ids = [a.id for a in self.antennas]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate antenna ids {ids}")
        if not self.noise_sigma_db > 0:
            raise ConfigError("noise_sigma_db must be positive")
        if self.trials_per_cell < 1:
            raise ConfigError("trials_per_cell must be at least 1")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    def content_hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, default=repr).encode()
        return hashlib.sha256(blob).hexdigest()

    def rng_key(self) -> tuple[int, int]:
        return self.seed & (2**64 - 1), int(self.content_hash()[:16], 16)

    def replace(self, **changes) -> "Scenario":
        return dataclasses.replace(self, **changes)

    @property
    def elevation(self) -> float:
        return self.antennas[0].elevation if self.antennas else float("nan")

    @property
    def power_mw(self) -> float:
        return self.radio.tx_power_mw


def placement_antennas(
    placement: str, theta: float, room: GridSpec, height: float = ANTENNA_HEIGHT
) -> tuple[ReaderAntenna, ...]:
    """Four antennas at the wall midpoints (side) or corners, facing the room center."""
    cx = 0.5 * (room.x_min + room.x_max)
    cy = 0.5 * (room.y_min + room.y_max)
    if placement == SIDE:
        spots = [(cx, room.y_min), (room.x_max, cy), (cx, room.y_max), (room.x_min, cy)]
        # perpendicular to each wall
        bearings = [math.pi / 2, math.pi, -math.pi / 2, 0.0]
    elif placement == CORNER:
        spots = [
            (room.x_min, room.y_min),
            (room.x_max, room.y_min),
            (room.x_max, room.y_max),
            (room.x_min, room.y_max),
        ]
        bearings = [math.atan2(cy - y, cx - x) for x, y in spots]
    else:
        raise ConfigError(f"no built-in layout for placement {placement!r}")
    return tuple(
        ReaderAntenna(k + 1, Position3D(x, y, height), theta, b)
        for k, ((x, y), b) in enumerate(zip(spots, bearings))
    )


_RADIO_FIELDS = {f.name for f in dataclasses.fields(RadioParams)}
_GRID_FIELDS = {f.name for f in dataclasses.fields(GridSpec)}
_SCENARIO_FIELDS = {"noise_sigma_db", "mle_grid_step", "trials_per_cell", "seed", "sample_step", "mismatch_floor_dbm"}


def build_scenario(
    placement: str,
    theta: float,
    power_mw: float,
    mode: str,
    overrides: dict | None = None,
    *,
    allow_off_sweep: bool = False,
) -> Scenario:
    """Scenario with table defaults, four antennas, and any field overrides.

    ``overrides`` may name RadioParams, GridSpec or Scenario fields, plus
    ``antenna_height`` and ``antennas`` (required for the custom placement).
    """
    overrides = dict(overrides or {})
    lo, hi = PAPER_POWER_RANGE_MW
    if not allow_off_sweep and not lo <= power_mw <= hi:
        raise ConfigError(f"power {power_mw} mW outside the {lo:g}-{hi:g} mW sweep (allow_off_sweep)")
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    if not 0 < theta <= math.pi / 2 + 1e-12:
        raise ConfigError(f"elevation {theta} outside (0, pi/2]")

    radio_kw = {k: overrides.pop(k) for k in list(overrides) if k in _RADIO_FIELDS}
    grid_kw = {k: overrides.pop(k) for k in list(overrides) if k in _GRID_FIELDS}
    scen_kw = {k: overrides.pop(k) for k in list(overrides) if k in _SCENARIO_FIELDS}
    height = overrides.pop("antenna_height", ANTENNA_HEIGHT)
    antennas = overrides.pop("antennas", None)
    if overrides:
        raise ConfigError(f"unknown scenario override(s): {sorted(overrides)}")

    try:
        room = GridSpec(**grid_kw)
        radio = RadioParams(**{"tx_power_dbm": mw_to_dbm(power_mw), **radio_kw})
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if placement == CUSTOM:
        if not antennas:
            raise ConfigError("custom placement needs an explicit antenna list")
        antennas = tuple(antennas)
    elif placement in (SIDE, CORNER):
        if antennas:
            raise ConfigError(f"{placement} placement fixes the antennas; use 'custom'")
        antennas = placement_antennas(placement, theta, room, height)
    else:
        raise ConfigError(f"placement must be one of {PLACEMENTS}, got {placement!r}")
    return Scenario(room, antennas, placement, mode, radio, **scen_kw)


def with_power(scenario: Scenario, power_mw: float) -> Scenario:
    return scenario.replace(radio=scenario.radio.with_tx_power_mw(power_mw))


# -- accuracy ----------------------------------------------------------------


@dataclass
class LocalizationResult:
    """Per-cell CRLB and Monte Carlo MLE RMSE over the localizable sample cells."""

    x: np.ndarray
    y: np.ndarray
    m_count: np.ndarray
    crlb_rmse: np.ndarray
    mle_rmse: np.ndarray
    sample_cells: int
    trials: int
    fallback_cells: int = 0

    @property
    def n(self) -> int:
        return len(self.x)

    @property
    def median_crlb(self) -> float:
        return float(np.median(self.crlb_rmse)) if self.n else math.nan

    @property
    def median_mle(self) -> float:
        return float(np.median(self.mle_rmse)) if self.n else math.nan

    @staticmethod
    def cdf(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Sorted errors and cumulative probability (ends at 1.0)."""
        v = np.sort(np.asarray(values, dtype=float))
        return v, np.arange(1, len(v) + 1) / len(v) if len(v) else np.array([])

    def prob_within(self, radius: float, which: str = "mle") -> float:
        vals = self.mle_rmse if which == "mle" else self.crlb_rmse
        return float(np.mean(vals < radius)) if self.n else math.nan


def evaluate_accuracy(scenario: Scenario, trials: int | None = None, workers: int = 1) -> LocalizationResult:
    """CRLB and MLE RMSE at every localizable cell of the sample sub-grid."""
    trials = scenario.trials_per_cell if trials is None else trials
    sample = scenario.room.with_step(scenario.sample_step)
    sx, sy = sample.mesh()
    sx, sy = sx.ravel(), sy.ravel()
    z = sample.tag_height
    pairs = antenna_pairs(scenario.antennas, scenario.mode)
    if not pairs:
        empty = np.array([])
        return LocalizationResult(empty, empty, empty.astype(int), empty, empty, sx.size, trials)
    f = evaluate_pairs(scenario.radio, scenario.antennas, pairs, sx, sy, z)
    m = f.m_count
    cells = np.flatnonzero(m >= 2)
    bound, _ = crlb_field(scenario, sx[cells], sy[cells])
    grid = mle_grid(scenario)
    ids = [(scenario.antennas[i].id, scenario.antennas[j].id) for i, j in pairs]
    key = scenario.rng_key()
    sigma = scenario.noise_sigma_db

    def run(cell: int):
        cov = f.covered[:, cell]
        used = [p for p, c in zip(ids, cov) if c]
        truth = f.rss[cov, cell]
        noise = np.stack(
            [trial_rng(key, int(cell), t).standard_normal(len(used)) for t in range(trials)]
        )
        est, fallback = grid.search(used, truth + sigma * noise)
        err2 = (grid.x[est] - sx[cell]) ** 2 + (grid.y[est] - sy[cell]) ** 2
        return math.sqrt(float(err2.mean())), fallback

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(run, cells))
    else:
        out = [run(c) for c in cells]
    mle = np.array([o[0] for o in out])
    fallbacks = sum(o[1] for o in out)
    return LocalizationResult(
        sx[cells], sy[cells], m[cells], bound, mle, sx.size, trials, fallbacks
    )


# -- sweeps ------------------------------------------------------------------


@dataclass
class SweepPoint:
    placement: str
    theta: float
    power_mw: float
    mode: str
    coverage_pct: float
    median_crlb: float = math.nan
    median_mle: float = math.nan
    localization: LocalizationResult | None = None
    coverage: CoverageMap | None = None

    @property
    def label(self) -> str:
        return result_stem(self.placement, self.theta, self.power_mw, self.mode)


@dataclass
class SweepResult:
    points: list[SweepPoint] = field(default_factory=list)

    def select(self, **criteria) -> list[SweepPoint]:
        def ok(p):
            return all(
                math.isclose(getattr(p, k), v) if isinstance(v, float) else getattr(p, k) == v
                for k, v in criteria.items()
            )

        return [p for p in self.points if ok(p)]

    def mean_coverage(self, **criteria) -> float:
        pts = self.select(**criteria)
        return float(np.mean([p.coverage_pct for p in pts])) if pts else math.nan


def result_stem(placement: str, theta: float, power_mw: float, mode: str) -> str:
    return f"{placement}_{theta:.4f}_{power_mw:g}mw_{mode}"


def _grid_points(placements, thetas, powers, modes):
    for placement in placements:
        for theta in thetas:
            for power in powers:
                for mode in modes:
                    yield placement, float(theta), float(power), mode


def _as_modes(mode) -> list[str]:
    return [mode] if isinstance(mode, str) else list(mode)


def run_coverage_sweep(
    placements: Sequence[str],
    thetas: Sequence[float],
    powers: Sequence[float],
    mode,
    overrides: dict | None = None,
    workers: int = 1,
    allow_off_sweep: bool = False,
) -> SweepResult:
    combos = list(_grid_points(placements, thetas, powers, _as_modes(mode)))
    if not combos:
        raise ConfigError("empty sweep axes")

    def run(combo):
        placement, theta, power, m = combo
        sc = build_scenario(placement, theta, power, m, overrides, allow_off_sweep=allow_off_sweep)
        cmap = coverage_map(sc)
        pct = coverage_percentage(cmap)
        log.info("coverage %s: %.1f%%", result_stem(*combo), pct)
        return SweepPoint(placement, theta, power, m, pct, coverage=cmap)

    return SweepResult(_fan_out(run, combos, workers))


def run_accuracy_sweep(
    placements: Sequence[str],
    thetas: Sequence[float],
    powers: Sequence[float],
    mode,
    trials: int | None = None,
    overrides: dict | None = None,
    workers: int = 1,
    allow_off_sweep: bool = False,
) -> SweepResult:
    """Coverage plus per-cell CRLB/MLE RMSE; medians only where coverage >= 50%."""
    if trials is not None and trials < 1:
        raise ConfigError("trials must be at least 1")
    combos = list(_grid_points(placements, thetas, powers, _as_modes(mode)))
    if not combos:
        raise ConfigError("empty sweep axes")

    def run(combo):
        placement, theta, power, m = combo
        sc = build_scenario(placement, theta, power, m, overrides, allow_off_sweep=allow_off_sweep)
        cmap = coverage_map(sc)
        pct = coverage_percentage(cmap)
        loc = evaluate_accuracy(sc, trials)
        point = SweepPoint(placement, theta, power, m, pct, localization=loc, coverage=cmap)
        if pct >= 50.0 and loc.n:
            point.median_crlb = loc.median_crlb
            point.median_mle = loc.median_mle
        log.info(
            "accuracy %s: coverage %.1f%%, %d localizable sample cells",
            result_stem(*combo), pct, loc.n,
        )
        return point

    return SweepResult(_fan_out(run, combos, workers))


def _fan_out(fn, items, workers):
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


# -- calibration -------------------------------------------------------------


def coverage_vs_reflection(scenario: Scenario):
    """Return f(product) -> coverage % for the scenario's geometry and power.

    The product mu_T*|Gamma|^2 only shifts every round-trip RSS by
    20 log10(product), so the pair fields are computed once.
    """
    base = scenario.replace(radio=scenario.radio.with_reflection_product(1.0))
    x, y = base.room.mesh()
    pairs = antenna_pairs(base.antennas, base.mode)
    f = evaluate_pairs(base.radio, base.antennas, pairs, x, y, base.room.tag_height)
    sensitivity = base.radio.reader_sensitivity_dbm
    cells = x.size

    def coverage(product: float) -> float:
        if product <= 0 or not pairs:
            return 0.0
        shift = 20.0 * math.log10(product)
        covered = f.forward_ok & (f.rss + shift >= sensitivity)
        return 100.0 * np.count_nonzero(covered.sum(axis=0) >= 2) / cells

    return coverage


def calibrate_link_budget(
    target_coverage_pct: float, scenario: Scenario, tol_pp: float = 0.5, iterations: int = 200
) -> float:
    """Bisect mu_T*|Gamma|^2 in [0, 1] until the scenario's coverage hits the target."""
    coverage = coverage_vs_reflection(scenario)
    top = coverage(1.0)
    if target_coverage_pct > top + tol_pp or target_coverage_pct < -tol_pp:
        raise CalibrationError(
            f"target {target_coverage_pct:.1f}% unreachable: achievable coverage is "
            f"0.0%-{top:.1f}% for mu_T*|Gamma|^2 in [0, 1]"
        )
    if target_coverage_pct <= tol_pp:
        return 0.0
    # coverage is non-decreasing in the product; search log10(product) in [-30, 0]
    lo, hi = -30.0, 0.0
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if coverage(10.0**mid) < target_coverage_pct:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-12:
            break
    best = min((10.0**lo, 10.0**hi), key=lambda p: abs(coverage(p) - target_coverage_pct))
    got = coverage(best)
    if abs(got - target_coverage_pct) > tol_pp:
        raise CalibrationError(
            f"coverage jumps past {target_coverage_pct:.1f}% (closest {got:.2f}% at "
            f"product {best:.6g}); refine the grid"
        )
    return best


# -- persistence -------------------------------------------------------------

SWEEP_COLUMNS = ["placement", "theta", "power_mw", "mode", "coverage_pct", "median_crlb_m", "median_mle_m"]
CELL_COLUMNS = ["x", "y", "M", "crlb_rmse_m", "mle_rmse_m"]


def write_sweep_csv(result: SweepResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for p in result.points:
            w.writerow(
                [p.placement, fmt(p.theta), fmt(p.power_mw), p.mode, fmt(p.coverage_pct),
                 fmt(p.median_crlb), fmt(p.median_mle)]
            )


def read_sweep_csv(path) -> SweepResult:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != SWEEP_COLUMNS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return SweepResult(
            [
                SweepPoint(
                    r["placement"], float(r["theta"]), float(r["power_mw"]), r["mode"],
                    float(r["coverage_pct"]), float(r["median_crlb_m"]), float(r["median_mle_m"]),
                )
                for r in reader
            ]
        )


def write_localization_csv(loc: LocalizationResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CELL_COLUMNS)
        for row in zip(loc.x, loc.y, loc.m_count, loc.crlb_rmse, loc.mle_rmse):
            w.writerow([fmt(row[0]), fmt(row[1]), int(row[2]), fmt(row[3]), fmt(row[4])])


def read_localization_csv(path, sample_cells: int = 0, trials: int = 0) -> LocalizationResult:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CELL_COLUMNS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        rows = list(reader)
    col = lambda k, t=float: np.array([t(r[k]) for r in rows], dtype=t)  # noqa: E731
    return LocalizationResult(
        col("x"), col("y"), col("M", int), col("crlb_rmse_m"), col("mle_rmse_m"), sample_cells, trials
    )


CRLB_COLUMNS = ["x", "y", "M", "crlb_rmse_m"]


def crlb_map(scenario: Scenario) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Flattened (x, y, M, CRLB RMSE) over the coverage grid; RMSE is inf where M < 2."""
    x, y = scenario.room.mesh()
    bound, m = crlb_field(scenario, x.ravel(), y.ravel())
    return x.ravel(), y.ravel(), m, bound


def write_crlb_csv(scenario: Scenario, path) -> np.ndarray:
    x, y, m, bound = crlb_map(scenario)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CRLB_COLUMNS)
        for row in zip(x, y, m, bound):
            w.writerow([fmt(row[0]), fmt(row[1]), int(row[2]), fmt(row[3])])
    return bound[m >= 2]


def read_crlb_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CRLB_COLUMNS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        rows = list(reader)
    return (
        np.array([float(r["x"]) for r in rows]),
        np.array([float(r["y"]) for r in rows]),
        np.array([int(r["M"]) for r in rows]),
        np.array([float(r["crlb_rmse_m"]) for r in rows]),
    )


def write_cdf_csv(loc: LocalizationResult, path) -> None:
    """Empirical CDFs of per-cell MLE and CRLB RMSE, one row per rank."""
    mle, prob = LocalizationResult.cdf(loc.mle_rmse)
    bound, _ = LocalizationResult.cdf(loc.crlb_rmse)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["probability", "mle_rmse_m", "crlb_rmse_m"])
        for row in zip(prob, mle, bound):
            w.writerow([fmt(v) for v in row])


def git_blob_hash(path) -> str:
    data = open(path, "rb").read()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_manifest(path, scenario: Scenario | None, files: Iterable, **extra) -> dict:
    manifest = {
        "scenario": scenario.to_json() if scenario is not None else None,
        "scenario_hash": scenario.content_hash() if scenario is not None else None,
        "files": {str(p.name if hasattr(p, "name") else p): git_blob_hash(p) for p in files},
        **extra,
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=repr)
        fh.write("\n")
    return manifest


__all__ = [
    "BISTATIC", "MONOSTATIC", "SIDE", "CORNER", "CUSTOM", "Scenario", "SweepPoint", "SweepResult",
    "LocalizationResult", "build_scenario", "run_coverage_sweep", "run_accuracy_sweep",
    "calibrate_link_budget", "evaluate_accuracy", "ConfigError", "CalibrationError",
]
