"""RF link budget for passive UHF RFID with directional patch reader antennas.

All received-power expressions are in the dB domain (20*log10 of the linear
products, 40*log10 for the monostatic gain and path-loss terms). Transmit
power is carried in dBm and converted to linear mW before entering a formula.

Functions accept scalars; the underscore-prefixed helpers also accept numpy
arrays of tag coordinates and are what the grid builders use.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

SPEED_OF_LIGHT = 299792458.0
EIRP_LIMIT_DBM = 35.15
PEAK_PATCH_GAIN = 3.136
NO_SIGNAL = float("-inf")

HALF_PI = 0.5 * math.pi


class SingularGeometryError(ValueError):
    """Tag coincides with an antenna or sits on its vertical axis."""


@dataclass(frozen=True)
class Position3D:
    x: float
    y: float
    z: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.z)):
            raise ValueError(f"non-finite coordinate in {self!r}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])


@dataclass(frozen=True)
class ReaderAntenna:
    """Wall-mounted patch antenna.

    ``elevation`` is the tilt theta relative to the azimuth plane and
    ``azimuth`` the horizontal boresight bearing (radians, counter-clockwise
    from +x).
    """

    id: int
    position: Position3D
    elevation: float
    azimuth: float

    @property
    def in_paper_range(self) -> bool:
        return math.pi / 4 - 1e-12 <= self.elevation <= math.pi / 2 + 1e-12


def dbm_to_mw(p_dbm: float) -> float:
    return 10.0 ** (p_dbm / 10.0)


def mw_to_dbm(p_mw: float) -> float:
    if p_mw <= 0:
        return NO_SIGNAL
    return 10.0 * math.log10(p_mw)


@dataclass(frozen=True)
class RadioParams:
    """Link-budget constants. Defaults follow the passive UHF system table.

    ``channel_gain_sq`` is |h|^2 for every link unless ``channel_gains``
    carries a per-antenna override as ``((id, |h_id|^2), ...)``.
    """

    frequency: float = 865.7e6
    tx_power_dbm: float = 30.0
    modulation_efficiency: float = 0.5
    power_transfer_efficiency: float = 0.8
    polarization_loss: float = 0.5
    tag_gain: float = 1.0
    reflection_coeff_sq: float = 0.5
    channel_gain_sq: float = 1.0
    channel_gains: tuple[tuple[int, float], ...] = field(default=())
    reader_sensitivity_dbm: float = -75.0
    tag_sensitivity_dbm: float = -20.0
    allow_over_eirp: bool = False

    def __post_init__(self):
        if not self.frequency > 0:
            raise ValueError("frequency must be positive")
        if not 0 < self.modulation_efficiency <= 1:
            raise ValueError("modulation_efficiency must lie in (0, 1]")
        if not 0 <= self.power_transfer_efficiency <= 1:
            raise ValueError("power_transfer_efficiency must lie in [0, 1]")
        if not 0 < self.polarization_loss <= 1:
            raise ValueError("polarization_loss must lie in (0, 1]")
        if not self.tag_gain > 0:
            raise ValueError("tag_gain must be positive")
        if not 0 <= self.reflection_coeff_sq <= 1:
            raise ValueError("reflection_coeff_sq must lie in [0, 1]")
        gains = [self.channel_gain_sq] + [g for _, g in self.channel_gains]
        if any(not (g >= 0 and math.isfinite(g)) for g in gains):
            raise ValueError("channel gains must be finite and non-negative")
        if self.tx_power_dbm > EIRP_LIMIT_DBM and not self.allow_over_eirp:
            raise ValueError(
                f"tx_power_dbm={self.tx_power_dbm:.2f} exceeds the "
                f"{EIRP_LIMIT_DBM} dBm EIRP limit (set allow_over_eirp)"
            )

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.frequency

    @property
    def tx_power_mw(self) -> float:
        return dbm_to_mw(self.tx_power_dbm)

    @property
    def reflection_product(self) -> float:
        """mu_T * |Gamma|^2, the only combination the received power sees."""
        return self.power_transfer_efficiency * self.reflection_coeff_sq

    def channel(self, antenna_id: int) -> float:
        for i, g in self.channel_gains:
            if i == antenna_id:
                return g
        return self.channel_gain_sq

    def with_tx_power_mw(self, p_mw: float) -> "RadioParams":
        return replace(self, tx_power_dbm=mw_to_dbm(p_mw))

    def with_reflection_product(self, product: float) -> "RadioParams":
        if not 0 <= product <= 1:
            raise ValueError("mu_T*|Gamma|^2 must lie in [0, 1]")
        root = math.sqrt(product)
        return replace(self, power_transfer_efficiency=root, reflection_coeff_sq=root)


# -- scalar operations -------------------------------------------------------


def path_loss_linear(d: float, wavelength: float) -> float:
    """Free-space loss (lambda / (4 pi d))^2."""
    if not d > 0:
        raise SingularGeometryError(f"distance must be positive, got {d}")
    if not wavelength > 0:
        raise ValueError("wavelength must be positive")
    return (wavelength / (4.0 * math.pi * d)) ** 2


def reflection_coefficient_sq(sigma_rcs: float, wavelength: float, tag_gain: float) -> float:
    """|Gamma|^2 = 4 pi sigma_RCS / (lambda^2 G_T^2)."""
    if sigma_rcs < 0:
        raise ValueError("sigma_rcs must be non-negative")
    if not wavelength > 0 or not tag_gain > 0:
        raise ValueError("wavelength and tag_gain must be positive")
    return 4.0 * math.pi * sigma_rcs / (wavelength**2 * tag_gain**2)


def patch_gain_polar(alpha: float, phi: float) -> float:
    """Patch gain from the relative elevation ``alpha`` and azimuth ``phi``.

    The pattern is 3.136 [tan(a) sin(pi/2 cos a) cos(pi/2 sin a sin phi)]^2;
    at |alpha| = pi/2 the tan*sin product takes its limit pi/2.
    """
    if not -HALF_PI <= alpha <= HALF_PI:
        raise ValueError(f"alpha={alpha} outside [-pi/2, pi/2]")
    return float(_gain(math.sin(alpha), math.cos(alpha), math.sin(phi)))


def patch_gain_cartesian(antenna: ReaderAntenna, tag: Position3D) -> float:
    """Same pattern expressed directly in antenna and tag coordinates."""
    dx = tag.x - antenna.position.x
    dy = tag.y - antenna.position.y
    if math.hypot(dx, dy) == 0.0:
        raise SingularGeometryError(
            f"tag {tag} lies on the vertical axis of antenna {antenna.id}; azimuth undefined"
        )
    return float(_gain_field(antenna, tag.x, tag.y, tag.z))


def relative_angles(antenna: ReaderAntenna, tag: Position3D) -> tuple[float, float]:
    """(alpha, phi) of ``tag`` seen from ``antenna``: alpha = theta - asin(H/d)."""
    p = antenna.position
    d = math.dist((p.x, p.y, p.z), (tag.x, tag.y, tag.z))
    if d == 0:
        raise SingularGeometryError("tag coincides with antenna")
    alpha = antenna.elevation - math.asin((p.z - tag.z) / d)
    bearing = math.atan2(tag.y - p.y, tag.x - p.x)
    return alpha, bearing - antenna.azimuth


def forward_rss_dbm(params: RadioParams, antenna: ReaderAntenna, tag: Position3D) -> float:
    """Power-up RSS at the tag from one reader antenna."""
    g, loss = _gain_and_loss(params, antenna, tag)
    return float(_forward_db(params, antenna.id, g, loss))


def bistatic_rss_dbm(
    params: RadioParams, tx: ReaderAntenna, rx: ReaderAntenna, tag: Position3D
) -> float:
    """Backscatter RSS at ``rx`` when ``tx`` powers the tag."""
    g_tx, l_tx = _gain_and_loss(params, tx, tag)
    if rx is tx or rx == tx:
        g_rx, l_rx = g_tx, l_tx
    else:
        g_rx, l_rx = _gain_and_loss(params, rx, tag)
    const = link_constant_db(params, tx.id, rx.id)
    return float(_round_trip_db(const, g_tx, g_rx, l_tx, l_rx))


def monostatic_rss_dbm(params: RadioParams, antenna: ReaderAntenna, tag: Position3D) -> float:
    g, loss = _gain_and_loss(params, antenna, tag)
    const = link_constant_db(params, antenna.id, antenna.id)
    return float(_round_trip_db(const, g, g, loss, loss))


def received_power_linear(
    params: RadioParams, tx: ReaderAntenna, rx: ReaderAntenna, tag: Position3D
) -> float:
    """Linear-domain product tau mu rho P G_T^2 |G_i G_j L_i L_j| |h_i h_j Gamma|^2 in mW.

    Reference only: the dB functions above apply 20*log10 to factors that
    appear once here, so the two are not related by 10*log10.
    """
    g_tx, l_tx = _gain_and_loss(params, tx, tag)
    g_rx, l_rx = _gain_and_loss(params, rx, tag)
    return (
        params.modulation_efficiency
        * params.power_transfer_efficiency
        * params.polarization_loss
        * params.tx_power_mw
        * params.tag_gain**2
        * abs(g_tx * g_rx * l_tx * l_rx)
        * params.channel(tx.id)
        * params.channel(rx.id)
        * params.reflection_coeff_sq
    )


def link_constant_db(params: RadioParams, tx_id: int, rx_id: int) -> float:
    """Position-independent term 20 log10(tau mu rho P G_T^2 |h_i h_j Gamma|^2)."""
    h2 = params.channel(tx_id) * params.channel(rx_id)
    lin = (
        params.modulation_efficiency
        * params.power_transfer_efficiency
        * params.polarization_loss
        * params.tx_power_mw
        * params.tag_gain**2
        * (h2 * params.reflection_coeff_sq)
    )
    return _db20(lin)


# -- array helpers ----------------------------------------------------------


def _db20(value):
    with np.errstate(divide="ignore"):
        return 20.0 * np.log10(value)


def _gain(sin_a, cos_a, sin_phi):
    # tan(a) * sin(pi/2 cos a) == sin(a) * (pi/2) * sinc(cos(a) / 2), finite at cos a = 0
    amp = sin_a * HALF_PI * np.sinc(0.5 * cos_a) * np.cos(HALF_PI * sin_a * sin_phi)
    return PEAK_PATCH_GAIN * amp * amp


def antenna_geometry(antenna: ReaderAntenna, x, y, z):
    """Distance, horizontal distance, height drop, sin/cos alpha and sin(phi_rel).

    Uses the wall-axis form of the azimuth term:
    ((x_i - x_0) cos phi_w + (y_i - y_0) sin phi_w) / l with phi_w = azimuth - pi/2.
    Where l = 0 the azimuth sine is taken as 0.
    """
    p = antenna.position
    dx = np.asarray(x, dtype=float) - p.x
    dy = np.asarray(y, dtype=float) - p.y
    height = p.z - np.asarray(z, dtype=float)
    horiz = np.hypot(dx, dy)
    dist = np.hypot(horiz, height)
    st, ct = math.sin(antenna.elevation), math.cos(antenna.elevation)
    with np.errstate(divide="ignore", invalid="ignore"):
        sin_a = (horiz * st - height * ct) / dist
        cos_a = (horiz * ct + height * st) / dist
        wall = antenna.azimuth - HALF_PI
        sin_phi = np.where(
            horiz > 0, (-dx * math.cos(wall) - dy * math.sin(wall)) / horiz, 0.0
        )
    return dist, horiz, height, sin_a, cos_a, sin_phi


def _gain_field(antenna: ReaderAntenna, x, y, z):
    dist, _, _, sin_a, cos_a, sin_phi = antenna_geometry(antenna, x, y, z)
    if np.any(dist == 0):
        raise SingularGeometryError("tag coincides with antenna")
    return _gain(sin_a, cos_a, sin_phi)


def gain_and_loss_field(params: RadioParams, antenna: ReaderAntenna, x, y, z):
    """Patch gain and path loss for arrays of tag positions."""
    dist, _, _, sin_a, cos_a, sin_phi = antenna_geometry(antenna, x, y, z)
    if np.any(dist == 0):
        raise SingularGeometryError("tag coincides with antenna")
    loss = (params.wavelength / (4.0 * math.pi * dist)) ** 2
    return _gain(sin_a, cos_a, sin_phi), loss


def _gain_and_loss(params: RadioParams, antenna: ReaderAntenna, tag: Position3D):
    g, loss = gain_and_loss_field(params, antenna, tag.x, tag.y, tag.z)
    return float(g), float(loss)


def _forward_db(params: RadioParams, antenna_id: int, gain, loss):
    return _db20(
        params.polarization_loss
        * params.tx_power_mw
        * params.tag_gain
        * gain
        * loss
        * params.channel(antenna_id)
    )


def forward_rss_field(params: RadioParams, antenna: ReaderAntenna, gain, loss):
    return _forward_db(params, antenna.id, gain, loss)


def _round_trip_db(const, g_tx, g_rx, l_tx, l_rx):
    return const + (_db20(g_tx) + _db20(g_rx)) + (_db20(l_tx) + _db20(l_rx))


def round_trip_field(params: RadioParams, tx: ReaderAntenna, rx: ReaderAntenna, g_tx, g_rx, l_tx, l_rx):
    """Round-trip RSS (dBm) from precomputed gain/loss arrays."""
    return _round_trip_db(link_constant_db(params, tx.id, rx.id), g_tx, g_rx, l_tx, l_rx)
