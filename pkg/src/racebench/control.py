"""Geometric path tracking: Pure Pursuit, the clothoid (G2 spiral) tracker and
kinematic steering.

Both trackers return a curvature *profile* over a preview horizon rather than
a single number, because the neural steering controller and the online speed
planner consume the future curvature. The profile starts at the vehicle and
follows the controller's own connecting curve up to the look-ahead point;
past it the raceline curvature is appended.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import PoseCurv, SpiralFitError, fit_g2_spiral, project_to_path, wrap_angle
from .raceline import Raceline

MIN_HORIZON = 1.0


@dataclass(frozen=True)
class LookaheadSchedule:
    """Piecewise-linear look-ahead distance over speed, held beyond the knots."""

    v_knots: tuple
    ld_knots: tuple

    def __post_init__(self):
        v = tuple(float(a) for a in np.atleast_1d(self.v_knots))
        ld = tuple(float(a) for a in np.atleast_1d(self.ld_knots))
        if len(v) != len(ld) or not v:
            raise ValueError("need one look-ahead distance per speed knot")
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("speed knots must be strictly increasing")
        if min(ld) <= 0:
            raise ValueError("look-ahead distances must be positive")
        if any(b < a for a, b in zip(ld, ld[1:])):
            raise ValueError("look-ahead distance must not decrease with speed")
        object.__setattr__(self, "v_knots", v)
        object.__setattr__(self, "ld_knots", ld)

    def __call__(self, v: float) -> float:
        return float(np.interp(v, self.v_knots, self.ld_knots))

    def to_dict(self):
        return {"v_knots": list(self.v_knots), "ld_knots": list(self.ld_knots)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["v_knots"], d["ld_knots"])


# roughly half a second of travel: with a quarter second of steering delay
# much shorter look-ahead leaves the lateral loop underdamped at racing speeds
PP_SCHEDULE = LookaheadSchedule((1.0, 5.0), (0.5, 2.5))
CL_SCHEDULE = LookaheadSchedule((1.0, 5.0), (0.5, 2.5))


@dataclass(frozen=True)
class CurvatureReference:
    rho: np.ndarray  # samples on a uniform grid starting at the vehicle
    ds: float
    source: str  # "PP" or "CL"
    s_start: float = 0.0  # raceline arc length of the vehicle projection
    lookahead: float = 0.0  # controller-curve length before the raceline continuation
    s_target: float = 0.0  # raceline arc length where the continuation starts
    fallback: bool = False

    @property
    def horizon(self) -> float:
        return (len(self.rho) - 1) * self.ds

    def at(self, s):
        """Curvature at distance ``s`` along the reference (held past the end)."""
        grid = np.arange(len(self.rho)) * self.ds
        return np.interp(s, grid, self.rho)


def pp_arc_curvature(lam: float, ld: float) -> float:
    """Constant curvature of the arc tangent to the heading, 2 sin(lambda) / l_d."""
    return 2.0 * math.sin(lam) / ld


def kinematic_steering(rho, L: float, limit: float = math.inf):
    """Front-wheel angle of a kinematic bicycle on curvature ``rho``, clamped."""
    if L <= 0:
        raise ValueError("wheelbase must be positive")
    d = np.arctan(np.asarray(rho, dtype=float) * L)
    if math.isfinite(limit):
        d = np.clip(d, -limit, limit)
    return float(d) if np.ndim(d) == 0 else d


def _horizon_samples(horizon, ds):
    return int(math.ceil(max(horizon, MIN_HORIZON) / ds - 1e-9)) + 1


def _continuation(raceline: Raceline, s_target: float, n: int, ds: float, start: float):
    """Raceline curvature from ``s_target`` for reference samples ``start + k ds``."""
    s = np.arange(n) * ds
    return raceline.path.curvature_at(s_target + (s - start))


def pure_pursuit_curvature(state: PoseCurv, v: float, raceline: Raceline, sched: LookaheadSchedule,
                           horizon: float = MIN_HORIZON, ds: float = 0.05,
                           s_hint: float | None = None) -> CurvatureReference:
    """Pure Pursuit curvature reference.

    The look-ahead point sits ``l_d(v)`` of arc length past the vehicle's
    projection on the raceline. lambda is the angle from the heading to the
    chord; the arc of curvature 2 sin(lambda)/l_d is followed for the length
    it needs to reach the chord end (chord * lambda / sin(lambda)), then the
    raceline curvature continues from the look-ahead point.
    """
    if v < 0:
        raise ValueError("speed must be non-negative")
    path = raceline.path
    window = None if s_hint is None else 2.0
    s0, _ = project_to_path(path, state.x, state.y, hint=s_hint, window=window)
    ld = sched(v)
    s_t = s0 + ld
    xt, yt = path.position_at(s_t)
    dx, dy = float(xt) - state.x, float(yt) - state.y
    chord = math.hypot(dx, dy)
    lam = wrap_angle(math.atan2(dy, dx) - state.psi) if chord > 0 else 0.0
    rho_pp = pp_arc_curvature(lam, ld)
    sl = math.sin(lam)
    arc = chord if abs(sl) < 1e-9 else chord * lam / sl
    if abs(lam) >= math.pi / 2:
        arc = chord  # target behind the vehicle: the tangent arc is meaningless
    n = _horizon_samples(horizon, ds)
    rho = _continuation(raceline, s_t, n, ds, arc)
    rho[np.arange(n) * ds < arc] = rho_pp
    return CurvatureReference(rho, ds, "PP", s0, arc, s_t)


@dataclass
class ClothoidTracker:
    """Clothoid controller state: fallback counter and last commanded curvature."""

    sched: LookaheadSchedule = CL_SCHEDULE
    fallbacks: int = 0
    ticks: int = 0
    last_rho: float = 0.0
    last_error: str = field(default="", repr=False)

    def reset(self):
        self.fallbacks = 0
        self.ticks = 0
        self.last_rho = 0.0

    def reference(self, x: float, y: float, psi: float, v: float, raceline: Raceline,
                  horizon: float = MIN_HORIZON, ds: float = 0.05, s_hint: float | None = None,
                  pp_sched: LookaheadSchedule | None = None) -> CurvatureReference:
        state = PoseCurv(x, y, psi, self.last_rho)
        self.ticks += 1
        ref = clothoid_curvature(state, v, raceline, self.sched, horizon, ds, s_hint, pp_sched)
        if ref.fallback:
            self.fallbacks += 1
        return ref

    @property
    def fallback_rate(self) -> float:
        return self.fallbacks / self.ticks if self.ticks else 0.0


def clothoid_curvature(state: PoseCurv, v: float, raceline: Raceline, sched: LookaheadSchedule,
                       horizon: float = MIN_HORIZON, ds: float = 0.05, s_hint: float | None = None,
                       pp_sched: LookaheadSchedule | None = None) -> CurvatureReference:
    """G2 spiral from the vehicle pose and ``state.rho`` to the look-ahead raceline pose.

    If the spiral cannot be fitted the Pure Pursuit reference is returned
    instead, with ``fallback`` set.
    """
    if v < 0:
        raise ValueError("speed must be non-negative")
    path = raceline.path
    window = None if s_hint is None else 2.0
    s0, _ = project_to_path(path, state.x, state.y, hint=s_hint, window=window)
    s_t = s0 + sched(v)
    xt, yt = path.position_at(s_t)
    target = PoseCurv(float(xt), float(yt), float(path.heading_at(s_t)), float(path.curvature_at(s_t)))
    try:
        sp = fit_g2_spiral(state, target)
    except (SpiralFitError, ValueError):
        ref = pure_pursuit_curvature(state, v, raceline, pp_sched or sched, horizon, ds, s_hint)
        return CurvatureReference(ref.rho, ref.ds, "CL", ref.s_start, ref.lookahead, ref.s_target, fallback=True)
    n = _horizon_samples(horizon, ds)
    s = np.arange(n) * ds
    rho = _continuation(raceline, s_t, n, ds, sp.length)
    on = s <= sp.length
    rho[on] = sp.curvature(s[on])
    return CurvatureReference(rho, ds, "CL", s0, sp.length, s_t)
