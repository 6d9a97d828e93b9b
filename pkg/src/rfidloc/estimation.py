"""Measurement simulation, likelihood, grid-search MLE, RSS Jacobians and CRLB."""
from __future__ import annotations

import functools
import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .coverage import antenna_pairs, evaluate_pairs
from .propagation import (
    HALF_PI,
    Position3D,
    ReaderAntenna,
    SingularGeometryError,
    antenna_geometry,
    bistatic_rss_dbm,
)

if TYPE_CHECKING:
    from .experiments import Scenario

log = logging.getLogger(__name__)

DB_PER_NEPER = 20.0 / math.log(10.0)


class NotLocalizableError(ValueError):
    """Fewer than two covered pairs: a 2D position cannot be fixed."""


# -- data --------------------------------------------------------------------


@dataclass(frozen=True)
class MeasurementSet:
    pairs: tuple[tuple[int, int], ...]
    rss_dbm: tuple[float, ...]
    noise_sigma_db: float
    true_position: Position3D

    def __post_init__(self):
        if len(self.pairs) != len(self.rss_dbm):
            raise ValueError("pairs and rss_dbm differ in length")
        if not self.noise_sigma_db > 0:
            raise ValueError("noise_sigma_db must be positive")

    def __len__(self):
        return len(self.pairs)

    def to_json(self) -> dict:
        return {
            "entries": [
                {"pair": list(p), "rss_dbm": v} for p, v in zip(self.pairs, self.rss_dbm)
            ],
            "noise_sigma_db": self.noise_sigma_db,
            "true_position": [self.true_position.x, self.true_position.y, self.true_position.z],
        }

    @classmethod
    def from_json(cls, data: dict) -> "MeasurementSet":
        entries = data["entries"]
        return cls(
            pairs=tuple((int(e["pair"][0]), int(e["pair"][1])) for e in entries),
            rss_dbm=tuple(float(e["rss_dbm"]) for e in entries),
            noise_sigma_db=float(data["noise_sigma_db"]),
            true_position=Position3D(*map(float, data["true_position"])),
        )


@dataclass(frozen=True)
class FisherInfo:
    i11: float
    i12: float
    i21: float
    i22: float

    def matrix(self) -> np.ndarray:
        return np.array([[self.i11, self.i12], [self.i21, self.i22]])

    def to_json(self) -> dict:
        return {"i11": self.i11, "i12": self.i12, "i21": self.i21, "i22": self.i22}


@dataclass(frozen=True)
class CrlbResult:
    rmse_lower_bound: float
    fim: FisherInfo
    localizable: bool

    def to_json(self) -> dict:
        return {
            "rmse_lower_bound": self.rmse_lower_bound,
            "fim": self.fim.to_json(),
            "localizable": self.localizable,
        }

    @classmethod
    def from_json(cls, data: dict) -> "CrlbResult":
        return cls(
            rmse_lower_bound=float(data["rmse_lower_bound"]),
            fim=FisherInfo(**{k: float(v) for k, v in data["fim"].items()}),
            localizable=bool(data["localizable"]),
        )


# -- helpers on scenarios ----------------------------------------------------


def _index(scenario: "Scenario", antenna_id: int) -> int:
    for k, a in enumerate(scenario.antennas):
        if a.id == antenna_id:
            return k
    raise KeyError(f"no antenna with id {antenna_id}")


def _pair_antennas(scenario: "Scenario", pair) -> tuple[ReaderAntenna, ReaderAntenna]:
    return scenario.antennas[_index(scenario, pair[0])], scenario.antennas[_index(scenario, pair[1])]


def _mode_pairs(scenario: "Scenario") -> list[tuple[int, int]]:
    return antenna_pairs(scenario.antennas, scenario.mode)


def _ids(scenario: "Scenario", index_pair) -> tuple[int, int]:
    return scenario.antennas[index_pair[0]].id, scenario.antennas[index_pair[1]].id


def covered_pairs(scenario: "Scenario", tag: Position3D) -> list[tuple[int, int]]:
    """Antenna-id pairs of the active mode that cover ``tag``."""
    pairs = _mode_pairs(scenario)
    if not pairs:
        return []
    f = evaluate_pairs(scenario.radio, scenario.antennas, pairs, tag.x, tag.y, tag.z)
    return [_ids(scenario, p) for p, c in zip(pairs, f.covered) if c]


def mismatch_floor(scenario: "Scenario") -> float:
    floor = getattr(scenario, "mismatch_floor_dbm", None)
    return scenario.radio.reader_sensitivity_dbm if floor is None else floor


# -- measurements and likelihood --------------------------------------------


def simulate_measurements(scenario: "Scenario", tag: Position3D, rng_seed) -> MeasurementSet:
    """Noisy RSS (dB) for every pair covering ``tag``; deterministic for a given seed."""
    rng = np.random.default_rng(rng_seed)
    pairs = covered_pairs(scenario, tag)
    truth = [bistatic_rss_dbm(scenario.radio, *_pair_antennas(scenario, p), tag) for p in pairs]
    noise = rng.normal(0.0, scenario.noise_sigma_db, size=len(pairs))
    return MeasurementSet(
        pairs=tuple(pairs),
        rss_dbm=tuple(float(v) for v in np.asarray(truth) + noise),
        noise_sigma_db=scenario.noise_sigma_db,
        true_position=tag,
    )


def _predicted(scenario: "Scenario", pairs, x, y) -> np.ndarray:
    """Predicted RSS of ``pairs`` at (x, y); uncovered pairs read the mismatch floor."""
    idx = [(_index(scenario, i), _index(scenario, j)) for i, j in pairs]
    f = evaluate_pairs(scenario.radio, scenario.antennas, idx, x, y, scenario.room.tag_height)
    return np.where(f.covered, f.rss, mismatch_floor(scenario))


def log_likelihood(scenario: "Scenario", candidate: Position3D, meas: MeasurementSet) -> float:
    if len(meas) == 0:
        raise ValueError("empty measurement set")
    pred = _predicted(scenario, meas.pairs, candidate.x, candidate.y)
    resid = pred - np.asarray(meas.rss_dbm)
    var = meas.noise_sigma_db**2
    return float(-0.5 * np.sum(resid * resid) / var - 0.5 * len(meas) * math.log(2 * math.pi * var))


class MleGrid:
    """Predicted RSS of every mode pair at every search-grid cell."""

    chunk = 256  # trials per matrix block

    def __init__(self, scenario: "Scenario"):
        self.grid = scenario.room.with_step(scenario.mle_grid_step)
        x, y = self.grid.mesh()
        self.x = x.ravel()
        self.y = y.ravel()
        self.z = self.grid.tag_height
        self.pair_ids = [_ids(scenario, p) for p in _mode_pairs(scenario)]
        self._col = {p: k for k, p in enumerate(self.pair_ids)}
        f = evaluate_pairs(
            scenario.radio, scenario.antennas, _mode_pairs(scenario), self.x, self.y, self.z
        )
        # (cells, pairs)
        self.predicted = np.where(f.covered, f.rss, mismatch_floor(scenario)).T.copy()
        self.m_count = f.covered.sum(axis=0)

    def candidates(self, n_meas: int) -> tuple[np.ndarray, bool]:
        region = self.m_count == 2 if n_meas == 2 else self.m_count >= 2
        if not region.any():
            return np.flatnonzero(self.m_count >= 2), True
        return np.flatnonzero(region), False

    def search(self, pairs: Sequence[tuple[int, int]], values: np.ndarray):
        """Argmin cell index per row of ``values`` (trials x len(pairs)).

        Returns (indices, fallback). Ties go to the lowest y, then x.
        """
        values = np.atleast_2d(np.asarray(values, dtype=float))
        if len(pairs) < 2:
            raise NotLocalizableError(f"{len(pairs)} measurement(s); at least 2 required")
        cand, fallback = self.candidates(len(pairs))
        if cand.size == 0:
            raise NotLocalizableError("no localizable cell in the search grid")
        cols = [self._col[tuple(p)] for p in pairs]
        q = self.predicted[np.ix_(cand, cols)]
        # centering keeps the expanded square well conditioned
        center = values.mean(axis=0)
        qc = q - center
        vc = values - center
        q2 = (qc * qc).sum(axis=1)
        best = np.empty(values.shape[0], dtype=np.int64)
        for start in range(0, values.shape[0], self.chunk):
            block = vc[start : start + self.chunk]
            obj = q2[:, None] - 2.0 * qc @ block.T + (block * block).sum(axis=1)[None, :]
            for k in range(block.shape[0]):
                col = obj[:, k]
                lo = col.min()
                near = np.flatnonzero(col <= lo + 1e-7 * (1.0 + abs(lo)))
                # re-rank near ties exactly; argmin keeps the first, i.e. lowest (y, x)
                r = qc[near] - block[k]
                best[start + k] = cand[near[np.argmin((r * r).sum(axis=1))]]
        return best, fallback

    def position(self, index: int) -> Position3D:
        return Position3D(float(self.x[index]), float(self.y[index]), float(self.z))

    def objective(self, pairs, values) -> np.ndarray:
        cols = [self._col[tuple(p)] for p in pairs]
        r = self.predicted[:, cols] - np.asarray(values, dtype=float)
        return (r * r).sum(axis=1)


@functools.lru_cache(maxsize=16)
def mle_grid(scenario: "Scenario") -> MleGrid:
    return MleGrid(scenario)


def mle_grid_search(scenario: "Scenario", meas: MeasurementSet) -> Position3D:
    """Constrained exhaustive search for the least-squares RSS fit."""
    grid = mle_grid(scenario)
    idx, fallback = grid.search(meas.pairs, np.asarray(meas.rss_dbm)[None, :])
    if fallback:
        log.warning("no cell with M == 2; searched the whole localizable region")
    return grid.position(int(idx[0]))


def trial_rng(key: Sequence[int], cell_index: int, trial_index: int) -> np.random.Generator:
    """Counter-based stream for one (cell, trial); ``key`` is two 64-bit words."""
    counter = np.array([0, 0, cell_index, trial_index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=np.array(key, dtype=np.uint64), counter=counter))


# -- Jacobians ---------------------------------------------------------------


def _log_sinc_slope(c):
    """d/dc log(sin(pi c / 2) / c), stable through c = 0."""
    c = np.asarray(c, dtype=float)
    small = np.abs(c) < 1e-3
    safe = np.where(small, 1.0, c)
    with np.errstate(divide="ignore", invalid="ignore"):
        full = HALF_PI / np.tan(HALF_PI * safe) - 1.0 / safe
    series = -(math.pi**2 / 12.0) * c - (math.pi**4 / 720.0) * c**3
    return np.where(small, series, full)


def gain_log_gradient(antenna: ReaderAntenna, x, y, z):
    """Gradient of ln G (natural log of the patch gain) w.r.t. tag (x, y).

    NaN/inf where the gain is zero or the tag sits on the antenna axis.
    """
    dist, horiz, height, sin_a, cos_a, sin_phi = antenna_geometry(antenna, x, y, z)
    dx = np.asarray(x, dtype=float) - antenna.position.x
    dy = np.asarray(y, dtype=float) - antenna.position.y
    sp, cp = math.sin(antenna.azimuth), math.cos(antenna.azimuth)
    out = []
    with np.errstate(divide="ignore", invalid="ignore"):
        for dxy, trig in ((dx, -sp), (dy, cp)):
            dl = dxy / horiz
            d_alpha = height / dist**2 * dl
            d_phi = trig / horiz - sin_phi * dxy / horiz**2
            u = HALF_PI * sin_a * sin_phi
            du = HALF_PI * (cos_a * d_alpha * sin_phi + sin_a * d_phi)
            out.append(
                2.0
                * (
                    cos_a / sin_a * d_alpha
                    - _log_sinc_slope(cos_a) * sin_a * d_alpha
                    - np.tan(u) * du
                )
            )
    return out[0], out[1]


def quarter_pi_applicable(antenna: ReaderAntenna) -> bool:
    """Elevation pi/4 with boresight along +-x (wall-axis azimuth pi/2)."""
    return abs(antenna.elevation - math.pi / 4) < 1e-12 and abs(math.sin(antenna.azimuth)) < 1e-12


def gain_log_gradient_quarter_pi(antenna: ReaderAntenna, x, y, z):
    """Closed-form ln G gradient for theta = pi/4, boresight along +-x.

    Here G = 3.136 tan^2(a) sin^2(A) cos^2(B) with
    A = sqrt(2) pi (l + H) / (4 d) and B = sqrt(2) pi (l - H) / (4 d) * w / l,
    w = +-(y_i - y_0).
    """
    if not quarter_pi_applicable(antenna):
        raise ValueError("fast path needs elevation pi/4 and boresight along the x axis")
    p = antenna.position
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    k = math.sqrt(2.0) * math.pi / 4.0
    sign = -math.cos(antenna.azimuth)
    dx, dy = x - p.x, y - p.y
    h = p.z - np.asarray(z, dtype=float)
    l = np.hypot(dx, dy)
    d = np.hypot(l, h)
    w = sign * (p.y - y)
    a_ang = k * (l + h) / d
    v = (l - h) / (d * l)
    b_ang = k * w * v
    sin_a = (l - h) / (math.sqrt(2.0) * d)
    cos_a = (l + h) / (math.sqrt(2.0) * d)
    grads = []
    with np.errstate(divide="ignore", invalid="ignore"):
        for dxy, dw in ((dx, 0.0), (dy, -sign)):
            dl = dxy / l
            dd = dxy / d
            d_alpha = h / d**2 * dl
            dA = k * (dl / d - (l + h) * dd / d**2)
            dv = (dl * d * l - (l - h) * (dd * l + d * dl)) / (d * l) ** 2
            dB = k * (dw * v + w * dv)
            grads.append(
                2.0 * d_alpha / (sin_a * cos_a) + 2.0 * dA / np.tan(a_ang) - 2.0 * np.tan(b_ang) * dB
            )
    return grads[0], grads[1]


def _path_gradient_db(antenna: ReaderAntenna, x, y, z):
    """Gradient of 20 log10 L(d) in dB/m: -(40/ln10) (x - x_i) / d^2."""
    p = antenna.position
    dx = np.asarray(x, dtype=float) - p.x
    dy = np.asarray(y, dtype=float) - p.y
    d2 = dx * dx + dy * dy + (p.z - np.asarray(z, dtype=float)) ** 2
    return -2.0 * DB_PER_NEPER * dx / d2, -2.0 * DB_PER_NEPER * dy / d2


def pair_gradient_field(tx: ReaderAntenna, rx: ReaderAntenna, x, y, z, method: str = "general"):
    """(dP/dx, dP/dy) of the round-trip RSS in dB/m for arrays of tag positions."""
    if method == "general":
        grad = gain_log_gradient
    elif method == "quarter_pi":
        grad = gain_log_gradient_quarter_pi
    else:
        raise ValueError(f"unknown method {method!r}")
    gx_t, gy_t = grad(tx, x, y, z)
    px_t, py_t = _path_gradient_db(tx, x, y, z)
    if rx is tx or rx == tx:
        gx_r, gy_r, px_r, py_r = gx_t, gy_t, px_t, py_t
    else:
        gx_r, gy_r = grad(rx, x, y, z)
        px_r, py_r = _path_gradient_db(rx, x, y, z)
    jx = DB_PER_NEPER * (gx_t + gx_r) + (px_t + px_r)
    jy = DB_PER_NEPER * (gy_t + gy_r) + (py_t + py_r)
    return jx, jy


def rss_jacobian_analytic(
    scenario: "Scenario", pair, tag: Position3D, method: str = "general"
) -> tuple[float, float] | None:
    """Analytic RSS gradient; None where a gain vanishes (not differentiable)."""
    tx, rx = _pair_antennas(scenario, pair)
    jx, jy = pair_gradient_field(tx, rx, tag.x, tag.y, tag.z, method)
    jx, jy = float(jx), float(jy)
    if not (math.isfinite(jx) and math.isfinite(jy)):
        return None
    return jx, jy


def rss_jacobian_fd(
    scenario: "Scenario", pair, tag: Position3D, step: float = 1e-4
) -> tuple[float, float]:
    """Central finite difference of the round-trip RSS."""
    tx, rx = _pair_antennas(scenario, pair)
    radio = scenario.radio

    def rss(px, py):
        try:
            v = bistatic_rss_dbm(radio, tx, rx, Position3D(px, py, tag.z))
        except SingularGeometryError as exc:
            raise SingularGeometryError(f"stencil around {tag} is singular") from exc
        if not math.isfinite(v):
            raise SingularGeometryError(f"zero gain inside the stencil around {tag}")
        return v

    gx = (rss(tag.x + step, tag.y) - rss(tag.x - step, tag.y)) / (2 * step)
    gy = (rss(tag.x, tag.y + step) - rss(tag.x, tag.y - step)) / (2 * step)
    return gx, gy


# -- Fisher information and CRLB ---------------------------------------------


def fisher_information(
    scenario: "Scenario", tag: Position3D, pairs=None, jacobian=None
) -> FisherInfo:
    """FIM over the covered pairs at ``tag`` (or the explicit ``pairs``).

    ``jacobian`` defaults to :func:`rss_jacobian_analytic`.
    """
    if pairs is None:
        pairs = covered_pairs(scenario, tag)
    jac = jacobian or rss_jacobian_analytic
    s11 = s12 = s22 = 0.0
    for p in pairs:
        g = jac(scenario, p, tag)
        if g is None:
            raise SingularGeometryError(f"pair {p} has zero gain at {tag}")
        gx, gy = g
        s11 += gx * gx
        s12 += gx * gy
        s22 += gy * gy
    w = 1.0 / scenario.noise_sigma_db**2
    return FisherInfo(s11 * w, s12 * w, s12 * w, s22 * w)


def crlb_rmse(fim: FisherInfo) -> float:
    """sqrt(trace(I^-1)) by the closed-form 2x2 inverse; inf when near-singular."""
    if not math.isclose(fim.i12, fim.i21, rel_tol=1e-12, abs_tol=1e-300):
        raise ValueError("FIM is not symmetric")
    trace = fim.i11 + fim.i22
    det = fim.i11 * fim.i22 - fim.i12 * fim.i21
    if trace <= 0 or abs(det) < 1e-12 * trace * trace:
        return math.inf
    return math.sqrt(trace / det)


def crlb(scenario: "Scenario", tag: Position3D) -> CrlbResult:
    pairs = covered_pairs(scenario, tag)
    fim = fisher_information(scenario, tag, pairs)
    bound = crlb_rmse(fim) if len(pairs) >= 2 else math.inf
    return CrlbResult(bound, fim, len(pairs) >= 2)


def crlb_field(scenario: "Scenario", x, y) -> tuple[np.ndarray, np.ndarray]:
    """CRLB RMSE and measurement count over arrays of tag positions."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    z = scenario.room.tag_height
    pairs = _mode_pairs(scenario)
    shape = np.broadcast(x, y).shape
    s11, s12, s22 = np.zeros(shape), np.zeros(shape), np.zeros(shape)
    if not pairs:
        return np.full(shape, np.inf), np.zeros(shape, dtype=int)
    f = evaluate_pairs(scenario.radio, scenario.antennas, pairs, x, y, z)
    for n, (i, j) in enumerate(pairs):
        jx, jy = pair_gradient_field(scenario.antennas[i], scenario.antennas[j], x, y, z)
        c = f.covered[n]
        jx, jy = np.where(c, jx, 0.0), np.where(c, jy, 0.0)
        s11 += jx * jx
        s12 += jx * jy
        s22 += jy * jy
    w = 1.0 / scenario.noise_sigma_db**2
    s11, s12, s22 = s11 * w, s12 * w, s22 * w
    trace = s11 + s22
    det = s11 * s22 - s12 * s12
    m = f.m_count
    ok = (m >= 2) & (trace > 0) & (np.abs(det) >= 1e-12 * trace * trace)
    with np.errstate(divide="ignore", invalid="ignore"):
        bound = np.where(ok, np.sqrt(trace / np.where(ok, det, 1.0)), np.inf)
    return bound, m
