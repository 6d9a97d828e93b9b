"""Detection coverage, localizability and localization-coverage maps."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from .propagation import (
    Position3D,
    RadioParams,
    ReaderAntenna,
    bistatic_rss_dbm,
    forward_rss_dbm,
    forward_rss_field,
    gain_and_loss_field,
    round_trip_field,
)

if TYPE_CHECKING:
    from .experiments import Scenario

MONOSTATIC = "monostatic"
BISTATIC = "bistatic"
MODES = (MONOSTATIC, BISTATIC)


@dataclass(frozen=True)
class GridSpec:
    """Rectangular evaluation grid; cells are indexed y-major with centers at
    ``min + (k + 0.5) * step``."""

    x_min: float = 0.0
    x_max: float = 8.0
    y_min: float = 0.0
    y_max: float = 8.0
    step: float = 0.1
    tag_height: float = 1.0

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError("grid step must be positive")
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError("grid bounds are degenerate")

    @property
    def nx(self) -> int:
        return math.ceil((self.x_max - self.x_min) / self.step - 1e-9)

    @property
    def ny(self) -> int:
        return math.ceil((self.y_max - self.y_min) / self.step - 1e-9)

    @property
    def cell_count(self) -> int:
        return self.nx * self.ny

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        xs = self.x_min + (np.arange(self.nx) + 0.5) * self.step
        ys = self.y_min + (np.arange(self.ny) + 0.5) * self.step
        return xs, ys

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        xs, ys = self.axes()
        return np.meshgrid(xs, ys)

    def with_step(self, step: float) -> "GridSpec":
        return GridSpec(self.x_min, self.x_max, self.y_min, self.y_max, step, self.tag_height)

    def contains(self, x: float, y: float) -> bool:
        return self.x_min <= x <= self.x_max and self.y_min <= y <= self.y_max


def antenna_pairs(antennas: Sequence[ReaderAntenna], mode: str) -> list[tuple[int, int]]:
    """Index pairs (i, j), j >= i; the diagonal only in monostatic mode."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    n = len(antennas)
    if mode == MONOSTATIC:
        return [(i, i) for i in range(n)]
    return [(i, j) for i in range(n) for j in range(i, n)]


def pair_coverage(
    params: RadioParams, tx: ReaderAntenna, rx: ReaderAntenna, tag: Position3D
) -> bool:
    """C_ij: round trip clears reader sensitivity and tx forward link clears tag sensitivity."""
    return (
        bistatic_rss_dbm(params, tx, rx, tag) >= params.reader_sensitivity_dbm
        and forward_rss_dbm(params, tx, tag) >= params.tag_sensitivity_dbm
    )


def measurement_count(
    params: RadioParams, antennas: Sequence[ReaderAntenna], tag: Position3D, mode: str
) -> int:
    return sum(
        pair_coverage(params, antennas[i], antennas[j], tag)
        for i, j in antenna_pairs(antennas, mode)
    )


@dataclass
class PairFields:
    """Round-trip RSS and coverage of each pair over a set of tag positions.

    ``rss`` and ``covered`` have shape ``(n_pairs,) + positions.shape``.
    """

    pairs: list[tuple[int, int]]
    rss: np.ndarray
    covered: np.ndarray
    forward_ok: np.ndarray  # transmit antenna clears tag sensitivity

    @property
    def m_count(self) -> np.ndarray:
        return self.covered.sum(axis=0)


def evaluate_pairs(
    params: RadioParams,
    antennas: Sequence[ReaderAntenna],
    pairs: Iterable[tuple[int, int]],
    x,
    y,
    z,
) -> PairFields:
    pairs = list(pairs)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    used = sorted({k for p in pairs for k in p})
    gains, losses, forward = {}, {}, {}
    for k in used:
        g, loss = gain_and_loss_field(params, antennas[k], x, y, z)
        gains[k], losses[k] = g, loss
        forward[k] = forward_rss_field(params, antennas[k], g, loss)
    shape = (len(pairs),) + np.broadcast(x, y).shape
    rss = np.empty(shape)
    fwd_ok = np.empty(shape, dtype=bool)
    for n, (i, j) in enumerate(pairs):
        rss[n] = round_trip_field(
            params, antennas[i], antennas[j], gains[i], gains[j], losses[i], losses[j]
        )
        fwd_ok[n] = forward[i] >= params.tag_sensitivity_dbm
    covered = fwd_ok & (rss >= params.reader_sensitivity_dbm)
    return PairFields(pairs, rss, covered, fwd_ok)


@dataclass
class CoverageMap:
    grid: GridSpec
    mode: str
    pair_ids: list[tuple[int, int]]
    pair_coverage: np.ndarray  # (n_pairs, ny, nx) bool
    max_rss_dbm: np.ndarray  # (ny, nx)

    @property
    def m_count(self) -> np.ndarray:
        return self.pair_coverage.sum(axis=0)

    @property
    def localizable(self) -> np.ndarray:
        return self.m_count >= 2


def coverage_map(scenario: "Scenario") -> CoverageMap:
    grid = scenario.room
    x, y = grid.mesh()
    pairs = antenna_pairs(scenario.antennas, scenario.mode)
    fields = evaluate_pairs(scenario.radio, scenario.antennas, pairs, x, y, grid.tag_height)
    if pairs:
        max_rss = fields.rss.max(axis=0)
    else:
        max_rss = np.full(x.shape, -np.inf)
    ids = [(scenario.antennas[i].id, scenario.antennas[j].id) for i, j in pairs]
    return CoverageMap(grid, scenario.mode, ids, fields.covered, max_rss)


def coverage_percentage(cmap: CoverageMap) -> float:
    """Localizable share of the grid area, in percent."""
    total = cmap.localizable.size
    if total == 0:
        raise ValueError("empty grid")
    return 100.0 * np.count_nonzero(cmap.localizable) / total


def max_rss_map(scenario: "Scenario") -> np.ndarray:
    """Per-cell maximum round-trip RSS over the pairs of the active mode."""
    return coverage_map(scenario).max_rss_dbm


# -- persistence -------------------------------------------------------------

COVERAGE_COLUMNS = ["x", "y", "M", "L", "max_rss_dbm"]


def fmt(value: float) -> str:
    """Nine significant digits; infinities spelled ``inf``/``-inf``."""
    return format(float(value), ".9g")


def write_coverage_csv(cmap: CoverageMap, path) -> None:
    pair_cols = [f"c_{i}_{j}" for i, j in cmap.pair_ids]
    xs, ys = cmap.grid.axes()
    m = cmap.m_count
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COVERAGE_COLUMNS + pair_cols)
        for iy, y in enumerate(ys):
            for ix, x in enumerate(xs):
                w.writerow(
                    [fmt(x), fmt(y), int(m[iy, ix]), int(m[iy, ix] >= 2), fmt(cmap.max_rss_dbm[iy, ix])]
                    + [int(c) for c in cmap.pair_coverage[:, iy, ix]]
                )


def read_coverage_csv(path, grid: GridSpec, mode: str) -> CoverageMap:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:5] != COVERAGE_COLUMNS:
            raise ValueError(f"{path}: unexpected header {header[:5]}")
        pair_ids = []
        for col in header[5:]:
            _, i, j = col.split("_")
            pair_ids.append((int(i), int(j)))
        rows = list(reader)
    if len(rows) != grid.cell_count:
        raise ValueError(f"{path}: {len(rows)} rows for a {grid.cell_count}-cell grid")
    cov = np.zeros((len(pair_ids), grid.ny, grid.nx), dtype=bool)
    max_rss = np.empty((grid.ny, grid.nx))
    for k, row in enumerate(rows):
        iy, ix = divmod(k, grid.nx)
        max_rss[iy, ix] = float(row[4])
        cov[:, iy, ix] = [c == "1" for c in row[5:]]
        if int(row[2]) != cov[:, iy, ix].sum():
            raise ValueError(f"{path}:{k + 2}: M disagrees with pair columns")
    return CoverageMap(grid, mode, pair_ids, cov, max_rss)
