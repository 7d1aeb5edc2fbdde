"""Step-size restrictions coupling dt to the mesh width h.

Three inequalities are monitored, each with its own constant:

* ``order``:     dt^q <= C1 * h^(d/2)   (needed only when q >= 3)
* ``cfl``:       dt   <= C2 * h^2
* ``pressure``:  dt^q <= C3 * h^(3/2)   (needed only when q >= 3)

The constants of the analysis are not computable a priori, so the defaults
(C = 1, mode ``warn``) only surface the inequalities as diagnostics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

MODES = ("warn", "clamp", "off")


@dataclass(frozen=True)
class RestrictionConfig:
    order: bool = True
    cfl: bool = True
    pressure: bool = True
    c_order: float = 1.0
    c_cfl: float = 1.0
    c_pressure: float = 1.0
    mode: str = "warn"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("order", "cfl", "pressure"):
            if getattr(self, name) and getattr(self, f"c_{name}") <= 0:
                raise ValueError(f"constant for enabled restriction {name!r} must be positive")


def _bounds(q: int, h: float, d: int, cfg: RestrictionConfig) -> dict[str, float]:
    """Largest admissible dt per enabled restriction."""
    out = {}
    if cfg.order and q >= 3:
        out["order"] = (cfg.c_order * h ** (d / 2.0)) ** (1.0 / q)
    if cfg.cfl:
        out["cfl"] = cfg.c_cfl * h**2
    if cfg.pressure and q >= 3:
        out["pressure"] = (cfg.c_pressure * h**1.5) ** (1.0 / q)
    return out


def check_restrictions(
    dt: float, q: int, h: float, d: int = 2, config: RestrictionConfig | None = None
) -> tuple[set[str], float]:
    """Return (violated restriction names, maximum admissible dt).

    Equality is admissible. With mode ``off`` nothing is checked and the bound is inf.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    cfg = config or RestrictionConfig()
    if cfg.mode == "off":
        return set(), math.inf
    flags = set()
    bounds = _bounds(q, h, d, cfg)
    if "order" in bounds and dt**q > cfg.c_order * h ** (d / 2.0):
        flags.add("order")
    if "cfl" in bounds and dt > cfg.c_cfl * h**2:
        flags.add("cfl")
    if "pressure" in bounds and dt**q > cfg.c_pressure * h**1.5:
        flags.add("pressure")
    return flags, min(bounds.values(), default=math.inf)
