"""Scenario configuration files.

A config is an INI file (``configparser`` syntax, ``#``/``;`` comments) with
the sections ``radio``, ``grid``, ``placement``, ``noise``, ``estimation``,
``sweep`` and ``calibration``. Every key is optional; omitted keys take the
library defaults, which are the passive UHF system-table values. Unknown
sections or keys are rejected with ``file:line``.

Angles accept simple arithmetic on ``pi``, e.g. ``pi/4`` or ``pi/2 - 1e-3``.
"""
from __future__ import annotations

import ast
import configparser
import dataclasses
import math
import operator
import re
from dataclasses import dataclass, field
from pathlib import Path

from .coverage import MODES
from .experiments import (
    CORNER,
    PLACEMENTS,
    ConfigError,
    Scenario,
    build_scenario,
)
from .propagation import Position3D, ReaderAntenna

_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul, ast.Div: operator.truediv}
_UNARY = {ast.UAdd: operator.pos, ast.USub: operator.neg}


def parse_angle(text: str) -> float:
    """Evaluate a numeric expression over ``pi`` with + - * / only."""

    def ev(node):
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return float(node.value)
        if isinstance(node, ast.Name) and node.id == "pi":
            return math.pi
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            return _BINOPS[type(node.op)](ev(node.left), ev(node.right))
        if isinstance(node, ast.UnaryOp) and type(node.op) in _UNARY:
            return _UNARY[type(node.op)](ev(node.operand))
        raise ValueError(f"unsupported expression {text!r}")

    try:
        value = ev(ast.parse(text.strip(), mode="eval"))
    except (SyntaxError, ZeroDivisionError) as exc:
        raise ValueError(f"bad angle {text!r}: {exc}") from exc
    if not math.isfinite(value):
        raise ValueError(f"angle {text!r} is not finite")
    return value


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "yes", "true", "on"):
        return True
    if t in ("0", "no", "false", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _list(conv):
    def parse(text: str):
        items = [s.strip() for s in re.split(r"[,\n]", text) if s.strip()]
        if not items:
            raise ValueError("empty list")
        return [conv(s) for s in items]

    return parse


def _choice(options):
    def parse(text: str):
        t = text.strip()
        if t not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {t!r}")
        return t

    return parse


def _antennas(text: str) -> tuple[ReaderAntenna, ...]:
    """One antenna per line: ``id: x y z elevation azimuth``."""
    out = []
    for line in filter(None, (s.strip() for s in text.splitlines())):
        ident, sep, rest = line.partition(":")
        parts = rest.split()
        if not sep or len(parts) != 5:
            raise ValueError(f"antenna line {line!r} is not 'id: x y z elevation azimuth'")
        x, y, z = (float(v) for v in parts[:3])
        out.append(ReaderAntenna(int(ident), Position3D(x, y, z), parse_angle(parts[3]), parse_angle(parts[4])))
    if not out:
        raise ValueError("empty antenna list")
    return tuple(out)


# key -> (parser, destination). Destinations: "override" feeds build_scenario,
# anything else is a RunConfig attribute.
_SCHEMA: dict[str, dict[str, tuple]] = {
    "radio": {
        "frequency_hz": (float, ("override", "frequency")),
        "tx_power_mw": (float, "power_mw"),
        "modulation_efficiency": (float, "override"),
        "power_transfer_efficiency": (float, "override"),
        "polarization_loss": (float, "override"),
        "tag_gain": (float, "override"),
        "reflection_coeff_sq": (float, "override"),
        "channel_gain_sq": (float, "override"),
        "reader_sensitivity_dbm": (float, "override"),
        "tag_sensitivity_dbm": (float, "override"),
        "allow_over_eirp": (_bool, "override"),
    },
    "grid": {
        "x_min": (float, "override"),
        "x_max": (float, "override"),
        "y_min": (float, "override"),
        "y_max": (float, "override"),
        "step": (float, "override"),
        "tag_height": (float, "override"),
    },
    "placement": {
        "placement": (_choice(PLACEMENTS), "placement"),
        "theta": (parse_angle, "theta"),
        "mode": (_choice(MODES), "mode"),
        "antenna_height": (float, "override"),
        "antennas": (_antennas, "override"),
    },
    "noise": {
        "sigma_db": (float, ("override", "noise_sigma_db")),
    },
    "estimation": {
        "mle_grid_step": (float, "override"),
        "sample_step": (float, "override"),
        "trials_per_cell": (int, "override"),
        "seed": (int, "override"),
        "mismatch_floor_dbm": (float, "override"),
    },
    "sweep": {
        "placements": (_list(_choice(PLACEMENTS)), "sweep_placements"),
        "thetas": (_list(parse_angle), "sweep_thetas"),
        "powers_mw": (_list(float), "sweep_powers"),
        "modes": (_list(_choice(MODES)), "sweep_modes"),
        "accuracy": (_bool, "sweep_accuracy"),
        "allow_off_sweep": (_bool, "allow_off_sweep"),
    },
    "calibration": {
        "target_coverage_pct": (float, "cal_target"),
        "placement": (_choice(PLACEMENTS), "cal_placement"),
        "theta": (parse_angle, "cal_theta"),
        "power_mw": (float, "cal_power"),
        "mode": (_choice(MODES), "cal_mode"),
        "tolerance_pp": (float, "cal_tolerance"),
        "apply": (_bool, "cal_apply"),
    },
}


@dataclass
class Calibration:
    target_coverage_pct: float = 21.0
    placement: str = CORNER
    theta: float = math.pi / 4
    power_mw: float = 1000.0
    mode: str = "monostatic"
    tolerance_pp: float = 0.5
    apply: bool = False


@dataclass
class RunConfig:
    """Everything a CLI run needs; build scenarios with :meth:`scenario`."""

    source: str | None = None
    placement: str = CORNER
    theta: float = math.pi / 4
    power_mw: float = 1000.0
    mode: str = "bistatic"
    overrides: dict = field(default_factory=dict)
    sweep_placements: list = field(default_factory=lambda: ["side", "corner"])
    sweep_thetas: list = field(default_factory=lambda: [math.pi / 4, math.pi / 3, math.pi / 2])
    sweep_powers: list = field(default_factory=lambda: [1000.0, 2000.0, 3000.0])
    sweep_modes: list = field(default_factory=lambda: ["monostatic", "bistatic"])
    sweep_accuracy: bool = False
    allow_off_sweep: bool = False
    calibration: Calibration = field(default_factory=Calibration)

    def scenario(self, placement=None, theta=None, power_mw=None, mode=None) -> Scenario:
        return build_scenario(
            placement or self.placement,
            self.theta if theta is None else theta,
            self.power_mw if power_mw is None else power_mw,
            mode or self.mode,
            self.overrides,
            allow_off_sweep=self.allow_off_sweep,
        )

    def calibration_scenario(self) -> Scenario:
        c = self.calibration
        return build_scenario(
            c.placement, c.theta, c.power_mw, c.mode, self.overrides, allow_off_sweep=self.allow_off_sweep
        )

    def with_reflection_product(self, product: float) -> "RunConfig":
        """Split the product evenly between mu_T and |Gamma|^2."""
        half = math.sqrt(product)
        extra = {"power_transfer_efficiency": half, "reflection_coeff_sq": half}
        return dataclasses.replace(self, overrides={**self.overrides, **extra})

    def with_overrides(self, **extra) -> "RunConfig":
        return dataclasses.replace(self, overrides={**self.overrides, **extra})


def _key_lines(text: str) -> dict[tuple[str, str], int]:
    """Line numbers of every ``key = value`` line, keyed by (section, key)."""
    lines = {}
    section = None
    for n, raw in enumerate(text.splitlines(), start=1):
        m = re.match(r"\s*\[([^\]]+)\]", raw)
        if m:
            section = m.group(1).strip()
            lines[(section, "")] = n
            continue
        m = re.match(r"([^\s#;=:][^=:]*?)\s*[=:]", raw)
        if m and section is not None:
            lines.setdefault((section, m.group(1).strip().lower()), n)
    return lines


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    parser = configparser.ConfigParser(
        interpolation=None, inline_comment_prefixes=("#", ";"), default_section="__none__"
    )
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    where = _key_lines(text)
    cfg = RunConfig(source=source)
    cal = {}
    for section in parser.sections():
        schema = _SCHEMA.get(section)
        if schema is None:
            raise ConfigError(f"{source}:{where.get((section, ''), '?')}: unknown section [{section}]")
        for key, value in parser.items(section):
            loc = f"{source}:{where.get((section, key), '?')}"
            if key not in schema:
                raise ConfigError(f"{loc}: unknown key {key!r} in [{section}]")
            conv, dest = schema[key]
            try:
                parsed = conv(value)
            except ValueError as exc:
                raise ConfigError(f"{loc}: [{section}] {key}: {exc}") from exc
            if isinstance(dest, tuple):
                cfg.overrides[dest[1]] = parsed
            elif dest == "override":
                cfg.overrides[key] = parsed
            elif dest.startswith("cal_"):
                cal[dest] = parsed
            else:
                setattr(cfg, dest, parsed)
    names = {
        "cal_target": "target_coverage_pct", "cal_placement": "placement", "cal_theta": "theta",
        "cal_power": "power_mw", "cal_mode": "mode", "cal_tolerance": "tolerance_pp", "cal_apply": "apply",
    }
    cfg.calibration = Calibration(**{names[k]: v for k, v in cal.items()})
    if "antennas" in cfg.overrides and cfg.placement != "custom":
        raise ConfigError(f"{source}: [placement] antennas requires placement = custom")
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))
