"""Sectioned key=value experiment files.

Example::

    [field]
    d = 2
    mean = 2.0
    mode = 1 0 : 0 : 1        # freq vector : cos amp : sin amp
    period = 6.283185307179586 6.283185307179586

    [grid]
    origin = 0 0
    side = 1 1
    n = 512 512

    [sweep]
    eps = 1/8 1/16 1/32 1/64
    T = 8 32 128
    sigma = 1.0

    [bc]
    type = dirichlet
    f = x1*x2
    F = 0

Repeated keys (``mode``) accumulate.  Values are whitespace-separated
scalars; fractions like 1/8 are accepted in numeric lists.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .expr import Expr, parse_expr
from .field import TensorField, ellipticity_check, isotropic_field

__all__ = ["Config", "parse_config", "load_config", "ConfigError"]


class ConfigError(ValueError):
    pass


def _num(tok: str) -> float:
    if "/" in tok:
        return float(Fraction(tok))
    return float(tok)


def _nums(text: str) -> list[float]:
    return [_num(t) for t in text.split()]


@dataclass
class Config:
    sections: dict                      # section -> key -> list[str]
    text: str

    # -- raw access --------------------------------------------------------
    def get(self, section: str, key: str, default=None) -> str | None:
        vals = self.sections.get(section, {}).get(key)
        if not vals:
            return default
        return vals[-1]

    def get_all(self, section: str, key: str) -> list[str]:
        return self.sections.get(section, {}).get(key, [])

    def require(self, section: str, key: str) -> str:
        v = self.get(section, key)
        if v is None:
            raise ConfigError(f"missing [{section}] {key}")
        return v

    # -- typed views -------------------------------------------------------
    def field(self) -> TensorField:
        d = int(self.require("field", "d"))
        mean = _num(self.require("field", "mean"))
        modes = []
        for line in self.get_all("field", "mode"):
            parts = [p.strip() for p in line.split(":")]
            if len(parts) != 3:
                raise ConfigError(f"mode line needs 'freq : cos : sin', got {line!r}")
            freq = np.array(_nums(parts[0]))
            if freq.size != d:
                raise ConfigError(f"mode frequency needs {d} entries")
            modes.append((freq, _num(parts[1]), _num(parts[2])))
        mu_text = self.get("field", "mu")
        mu = _num(mu_text) if mu_text else None
        period_text = self.get("field", "period")
        period = _nums(period_text) if period_text else None
        return isotropic_field(d, mean, modes, mu=mu, period_lattice=period)

    def grid_params(self):
        d = int(self.require("field", "d"))
        origin = np.array(_nums(self.require("grid", "origin")))
        side = np.array(_nums(self.require("grid", "side")))
        n = np.array([int(v) for v in self.require("grid", "n").split()])
        if not (origin.size == side.size == n.size == d):
            raise ConfigError("grid vectors must have d entries")
        return origin, side, n

    def eps_sweep(self) -> list[float]:
        vals = _nums(self.require("sweep", "eps"))
        if not vals:
            raise ConfigError("empty eps sweep")
        return vals

    def t_sweep(self) -> list[float]:
        vals = _nums(self.require("sweep", "T"))
        if not vals:
            raise ConfigError("empty T sweep")
        return vals

    def sigma(self) -> float:
        return _num(self.get("sweep", "sigma", "0.5"))

    def bc_type(self) -> str:
        t = self.require("bc", "type")
        if t not in ("dirichlet", "neumann"):
            raise ConfigError(f"bc type must be dirichlet or neumann, got {t!r}")
        return t

    def expr_or_none(self, section: str, key: str) -> Expr | None:
        text = self.get(section, key)
        if text is None:
            return None
        e = parse_expr(text)
        d = int(self.require("field", "d"))
        if any(v >= d for v in e.free_vars):
            raise ConfigError(f"[{section}] {key} references coordinates beyond x{d}")
        return e

    def neumann_sides(self) -> dict:
        d = int(self.require("field", "d"))
        names = {f"x{j + 1}{end}": (j, 0 if end == "lo" else 1)
                 for j in range(d) for end in ("lo", "hi")}
        out = {}
        for key in self.sections.get("bc", {}):
            if key.startswith("g_"):
                side = key[2:]
                if side not in names:
                    raise ConfigError(f"unknown boundary side {side!r}")
                out[names[side]] = self.expr_or_none("bc", key)
        return out

    def corrector_params(self):
        box_text = self.get("corrector", "boxside")
        box = None if box_text in (None, "auto") else _nums(box_text)
        n = int(self.get("corrector", "n", "1024"))
        return box, n

    def rho_params(self):
        from .field import RhoSearch

        radii = _nums(self.get("rho", "radii", "2 4 8 16"))
        kwargs = {}
        for cfg_key, attr in (
            ("ysamples", "y_samples"),
            ("zstep", "z_grid_step"),
            ("domainradius", "domain_radius"),
            ("windowstep", "window_step"),
            ("yrange", "y_range"),
        ):
            v = self.get("rho", cfg_key)
            if v is not None:
                kwargs[attr] = int(v) if attr == "y_samples" else _num(v)
        return radii, kwargs

    def probe_params(self):
        center_text = self.get("probe", "center")
        center = np.array(_nums(center_text)) if center_text else None
        return {
            "center": center,
            "r": _num(self.get("probe", "r", "0.2")),
            "p": _num(self.get("probe", "p", "4")),
            "theta": _num(self.get("probe", "theta", "0.125")),
            "K": _num(self.get("probe", "K", "0")),
        }

    def accept_params(self):
        return {
            "slope_min": _num(self.get("accept", "slope_min", "0.6")),
            "ratio_spread_max": _num(self.get("accept", "ratio_spread_max", "4")),
            "probe_max_ratio": _num(self.get("accept", "probe_max_ratio", "3")),
        }

    def validate(self, seed: int = 0):
        """Parse-level checks plus the ellipticity gate on the field."""
        fld = self.field()
        rep = ellipticity_check(fld, 4000, seed=seed)
        if not rep.passed:
            raise ConfigError(
                f"field fails its claimed ellipticity mu={fld.mu}: observed "
                f"range [{rep.mu_lower:.6g}, {rep.mu_upper:.6g}]"
            )
        if "bc" in self.sections:
            self.expr_or_none("bc", "f")
            self.expr_or_none("bc", "F")
            self.neumann_sides()
        return fld

    def config_hash(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()[:16]

    def serialize(self) -> str:
        lines = []
        for section in sorted(self.sections):
            lines.append(f"[{section}]")
            for key in sorted(self.sections[section]):
                for val in self.sections[section][key]:
                    lines.append(f"{key} = {val}")
            lines.append("")
        return "\n".join(lines)


def parse_config(text: str) -> Config:
    sections: dict = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        if current is None:
            raise ConfigError(f"line {lineno}: key outside any [section]")
        key, val = (s.strip() for s in line.split("=", 1))
        sections[current].setdefault(key, []).append(val)
    return Config(sections, text)


def load_config(path) -> Config:
    with open(path) as fh:
        return parse_config(fh.read())
