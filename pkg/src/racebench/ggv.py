"""Speed-dependent acceleration envelopes (g-g-v diagrams).

Each speed knot carries a lateral limit and asymmetric longitudinal limits;
between knots the limits are linear in speed, beyond the last knot they are
held. At a given speed the feasible set is the superellipse

    (|ax| / ax_lim)^p + (|ay| / ay_max)^p <= 1

with ``ax_lim`` the acceleration or braking limit depending on the sign of ax.
p = 2 is the plain friction ellipse.
"""

from __future__ import annotations

import bisect
import json
import math
from dataclasses import dataclass
from importlib import resources
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class GgvDiagram:
    speed_knots: tuple
    ay_max: tuple
    ax_acc_max: tuple
    ax_dec_max: tuple
    v_max: float
    shape_exponent: float = 2.0
    name: str = ""

    def __post_init__(self):
        for f in ("speed_knots", "ay_max", "ax_acc_max", "ax_dec_max"):
            object.__setattr__(self, f, tuple(float(v) for v in np.atleast_1d(getattr(self, f))))
        k = self.speed_knots
        if not k or k[0] != 0.0:
            raise ValueError("speed_knots must start at 0")
        if any(b <= a for a, b in zip(k, k[1:])):
            raise ValueError("speed_knots must be strictly increasing")
        for f in ("ay_max", "ax_acc_max", "ax_dec_max"):
            vals = getattr(self, f)
            if len(vals) != len(k):
                raise ValueError(f"{f} needs one value per speed knot")
            if min(vals) <= 0:
                raise ValueError(f"{f} must be strictly positive")
        if self.v_max <= 0:
            raise ValueError("v_max must be positive")
        if self.shape_exponent < 1:
            raise ValueError("shape_exponent must be >= 1")
        # speed-independent tables take closed-form fast paths in the planner
        const = all(len(set(getattr(self, f))) == 1 for f in ("ay_max", "ax_acc_max", "ax_dec_max"))
        object.__setattr__(self, "_const", const)

    @property
    def is_constant(self) -> bool:
        """True when no limit varies with speed."""
        return self._const

    # Scalar interpolation on the knot table is on the hot path of the planner,
    # so it avoids numpy for single floats.
    def _lerp(self, table, v):
        k = self.speed_knots
        if self._const or v <= 0.0:
            return table[0]
        if v >= k[-1]:
            return table[-1]
        i = bisect.bisect_right(k, v) - 1
        t = (v - k[i]) / (k[i + 1] - k[i])
        return table[i] + t * (table[i + 1] - table[i])

    def ay_limit(self, v: float) -> float:
        return self._lerp(self.ay_max, v)

    def ax_limits(self, v: float):
        return self._lerp(self.ax_acc_max, v), self._lerp(self.ax_dec_max, v)

    def scaled(self, factor: float, name: str | None = None) -> "GgvDiagram":
        """Multiply every acceleration limit by ``factor`` (v_max unchanged)."""
        return GgvDiagram(
            self.speed_knots,
            tuple(a * factor for a in self.ay_max),
            tuple(a * factor for a in self.ax_acc_max),
            tuple(a * factor for a in self.ax_dec_max),
            self.v_max,
            self.shape_exponent,
            self.name if name is None else name,
        )

    def dominates(self, other: "GgvDiagram", n: int = 200) -> bool:
        """Pointwise >= on every limit over a speed sweep, plus v_max."""
        vs = np.linspace(0.0, max(self.v_max, other.v_max), n)
        for v in vs:
            a1, d1 = self.ax_limits(v)
            a2, d2 = other.ax_limits(v)
            if a1 < a2 - 1e-12 or d1 < d2 - 1e-12 or self.ay_limit(v) < other.ay_limit(v) - 1e-12:
                return False
        return self.v_max >= other.v_max

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "v_max": self.v_max,
            "shape_exponent": self.shape_exponent,
            "speed_knots": [
                {"v": v, "ay_max": ay, "ax_acc_max": aa, "ax_dec_max": ad}
                for v, ay, aa, ad in zip(self.speed_knots, self.ay_max, self.ax_acc_max, self.ax_dec_max)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GgvDiagram":
        rows = d["speed_knots"]
        return cls(
            [r["v"] for r in rows],
            [r["ay_max"] for r in rows],
            [r["ax_acc_max"] for r in rows],
            [r["ax_dec_max"] for r in rows],
            float(d["v_max"]),
            float(d.get("shape_exponent", 2.0)),
            d.get("name", ""),
        )


def contains(ggv: GgvDiagram, v: float, ax: float, ay: float, slack: float = 0.0) -> bool:
    if v < 0:
        raise ValueError("speed must be non-negative")
    if v > ggv.v_max * (1.0 + slack):
        return False
    p = ggv.shape_exponent
    acc, dec = ggv.ax_limits(v)
    lim = acc if ax >= 0 else dec
    val = (abs(ax) / lim) ** p + (abs(ay) / ggv.ay_limit(v)) ** p
    return val <= (1.0 + slack) ** p


def available_ax(ggv: GgvDiagram, v: float, ay: float):
    """Remaining (acceleration, braking) magnitudes at speed ``v`` given ``ay``."""
    acc, dec = ggv.ax_limits(v)
    ratio = abs(ay) / ggv.ay_limit(v)
    if ratio >= 1.0:
        return 0.0, 0.0
    p = ggv.shape_exponent
    f = (1.0 - ratio ** p) ** (1.0 / p)
    return acc * f, dec * f


def max_cornering_speed(ggv: GgvDiagram, rho: float, tol: float = 1e-6) -> float:
    """Largest v <= v_max with v^2 |rho| <= ay_max(v), by bisection."""
    k = abs(rho)
    if k == 0.0:
        return ggv.v_max
    if ggv.v_max * ggv.v_max * k <= ggv.ay_limit(ggv.v_max):
        return ggv.v_max
    if ggv.is_constant:
        return math.sqrt(ggv.ay_max[0] / k)
    # scan knots for the first infeasible bracket so bisection sees one crossing
    lo = 0.0
    hi = ggv.v_max
    for v in ggv.speed_knots[1:]:
        if v >= ggv.v_max:
            break
        if v * v * k > ggv.ay_limit(v):
            hi = v
            break
        lo = v
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if mid * mid * k <= ggv.ay_limit(mid):
            lo = mid
        else:
            hi = mid
    return lo


# --------------------------------------------------------------------------
# Presets

def load_ggv(path) -> GgvDiagram:
    with open(path) as fh:
        return GgvDiagram.from_dict(json.load(fh))


def save_ggv(ggv: GgvDiagram, path) -> None:
    with open(path, "w") as fh:
        json.dump(ggv.to_dict(), fh, indent=2)
        fh.write("\n")


PRESET_NAMES = ("cautious", "nominal", "extended")


def preset(name: str) -> GgvDiagram:
    """Shipped envelope by name: ``cautious``, ``nominal`` or ``extended``."""
    if name not in PRESET_NAMES:
        raise KeyError(f"unknown g-g-v preset {name!r}; choose from {PRESET_NAMES}")
    text = resources.files("racebench.presets").joinpath(f"{name}.json").read_text()
    return GgvDiagram.from_dict(json.loads(text))


def elliptic(ay_max: float, ax_acc: float, ax_dec: float, v_max: float,
             name: str = "", knots: Sequence[float] = (0.0,)) -> GgvDiagram:
    """Speed-independent envelope (every knot carries the same limits)."""
    n = len(knots)
    return GgvDiagram(tuple(knots), (ay_max,) * n, (ax_acc,) * n, (ax_dec,) * n, v_max, 2.0, name)
