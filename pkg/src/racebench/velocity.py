"""Forward-backward speed planning over a curvature horizon, plus a DP oracle.

Discretisation shared by the planner and the oracle: speeds live on grid
points ``i = 0..N``; cell ``i`` joins points ``i`` and ``i+1`` with constant
longitudinal acceleration ``ax[i] = (v[i+1]^2 - v[i]^2) / (2 ds)``. A cell is
feasible when ``(v[i], ax[i], v[i]^2 rho[i])`` lies in the envelope, i.e. the
constraint is evaluated at the cell's entry point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .ggv import GgvDiagram, available_ax, max_cornering_speed


@dataclass(frozen=True)
class SpeedPlan:
    s: np.ndarray
    v: np.ndarray
    ax: np.ndarray
    ay: np.ndarray
    infeasibility: float = 0.0  # amount v0 exceeded the feasible start speed

    @property
    def ds(self) -> float:
        return float(self.s[1] - self.s[0]) if len(self.s) > 1 else 0.0

    def traversal_time(self) -> float:
        return traversal_time(self.v, self.ds)


def traversal_time(v: np.ndarray, ds: float) -> float:
    v = np.asarray(v, dtype=float)
    den = v[:-1] + v[1:]
    if np.any(den <= 0):
        return math.inf
    return float(np.sum(2.0 * ds / den))


def _brake_start_speed(ggv: GgvDiagram, v_next: float, rho: float, ds: float,
                       cap: float, iters: int = 3) -> float:
    """Largest entry speed from which the cell can brake down to ``v_next``.

    Fixed point on v = sqrt(v_next^2 + 2 ds dec(v, v^2 rho)) seeded with the
    neighbouring speed. The iterates alternate around the root, so the last
    feasible/infeasible pair brackets it; a short bisection certifies the
    returned speed as feasible.
    """
    vn2 = v_next * v_next
    if ggv.is_constant and ggv.shape_exponent == 2.0:
        return min(_brake_start_ellipse(ggv, vn2, rho, ds), cap)
    lo = min(v_next, cap)  # always feasible: zero acceleration below the cap
    hi = math.inf
    v = lo
    for _ in range(iters):
        dec = available_ax(ggv, v, v * v * rho)[1]
        v = min(math.sqrt(vn2 + 2.0 * ds * dec), cap)
        dec = available_ax(ggv, v, v * v * rho)[1]
        if v * v <= vn2 + 2.0 * ds * dec + 1e-12:
            lo = max(lo, v)
        else:
            hi = min(hi, v)
    if hi == math.inf:
        return lo
    while hi - lo > 1e-9:
        mid = 0.5 * (lo + hi)
        dec = available_ax(ggv, mid, mid * mid * rho)[1]
        if mid * mid <= vn2 + 2.0 * ds * dec + 1e-12:
            lo = mid
        else:
            hi = mid
    return lo


def _brake_start_ellipse(ggv, vn2, rho, ds):
    """Exact root of E - vn2 = c sqrt(1 - (E rho / ay)^2), E = v^2, for a fixed ellipse."""
    c = 2.0 * ds * ggv.ax_dec_max[0]
    g = rho / ggv.ay_max[0]
    a = 1.0 + c * c * g * g
    disc = vn2 * vn2 - a * (vn2 * vn2 - c * c)
    e = (vn2 + math.sqrt(max(disc, 0.0))) / a
    # the larger root always has E >= vn2, i.e. sits on the braking branch
    return math.sqrt(max(e, 0.0))


def plan_speed(rho, ds: float, v0: float, ggv: GgvDiagram, v_terminal_cap: float = math.inf,
               caps=None) -> SpeedPlan:
    """Time-optimal speed profile over the curvature samples ``rho``.

    Backward pass bounds braking into each lateral cap, forward pass bounds
    acceleration from ``v0``. ``caps`` optionally adds extra pointwise speed
    limits. If ``v0`` is above the feasible start speed the plan starts from
    that speed instead and ``infeasibility`` reports the excess.
    """
    rho = [float(r) for r in rho]
    n = len(rho)
    if n < 1:
        raise ValueError("empty curvature horizon")
    if ds <= 0:
        raise ValueError("ds must be positive")
    if v0 < 0:
        raise ValueError("v0 must be non-negative")

    cap = [max_cornering_speed(ggv, r) for r in rho]
    if caps is not None:
        cap = [min(a, float(b)) for a, b in zip(cap, caps)]

    vb = cap[:]
    vb[-1] = min(vb[-1], max(0.0, v_terminal_cap))
    for i in range(n - 2, -1, -1):
        if vb[i] > vb[i + 1]:
            vb[i] = _brake_start_speed(ggv, vb[i + 1], rho[i], ds, vb[i])

    v = [0.0] * n
    v[0] = min(v0, vb[0])
    infeas = max(0.0, v0 - vb[0])
    for i in range(n - 1):
        vi = v[i]
        acc = available_ax(ggv, vi, vi * vi * rho[i])[0]
        reach = math.sqrt(vi * vi + 2.0 * ds * acc)
        v[i + 1] = min(vb[i + 1], reach)

    # repair sweep for envelopes whose braking budget grows with speed
    for i in range(n - 2, -1, -1):
        if v[i] > v[i + 1]:
            dec = available_ax(ggv, v[i], v[i] * v[i] * rho[i])[1]
            if v[i] * v[i] > v[i + 1] * v[i + 1] + 2.0 * ds * dec + 1e-12:
                v[i] = _brake_start_speed(ggv, v[i + 1], rho[i], ds, v[i])

    va = np.array(v)
    ax = np.empty(n)
    if n > 1:
        ax[:-1] = (va[1:] ** 2 - va[:-1] ** 2) / (2.0 * ds)
        ax[-1] = 0.0 if n == 1 else _terminal_ax(ggv, va[-1], rho[-1], ax[-2])
    else:
        ax[0] = 0.0
    ay = va * va * np.asarray(rho)
    return SpeedPlan(np.arange(n) * ds, va, ax, ay, infeas)


def _terminal_ax(ggv, v, rho, prev):
    # hold the last cell's acceleration, shrunk into the envelope at the end point
    acc, dec = available_ax(ggv, v, v * v * rho)
    return min(prev, acc) if prev >= 0 else max(prev, -dec)


def dp_speed_oracle(rho, ds: float, v0: float, ggv: GgvDiagram, n_speed_bins: int = 200,
                    v_terminal_cap: float = math.inf, max_span: int = 8) -> float:
    """Minimum traversal time on a (position x speed) lattice.

    Lattice speeds are ``n_speed_bins`` levels uniform on [0, v_top], where
    ``v_top`` bounds every profile (highest pointwise cap, or full-throttle
    reach from ``v0``); each point also carries its own cap and ``v0``. An
    edge joins two lattice nodes up to ``max_span`` cells apart with constant acceleration, so acceleration is
    resolved far below one bin per cell; every intermediate grid point of an
    edge is checked against the envelope with the same entry-point rule as
    :func:`plan_speed`. Every lattice path is feasible for the planner's
    discrete model, so the result is an upper bound on the true optimum.
    """
    rho = np.asarray(rho, dtype=float)
    n = len(rho)
    cap = np.array([max_cornering_speed(ggv, r) for r in rho])
    v0 = min(v0, cap[0])
    if n == 1:
        return 0.0
    cap_end = min(cap[-1], v_terminal_cap)
    # no profile can exceed full-throttle acceleration from v0 over the horizon
    reach = math.sqrt(v0 * v0 + 2.0 * max(ggv.ax_acc_max) * ds * (n - 1))
    v_top = max(min(float(cap.max()), reach), v0)
    e_levels = np.linspace(0.0, v_top, n_speed_bins) ** 2
    p = ggv.shape_exponent

    # allowed lattice values per point (start point: exact v0 only)
    node_e = [np.array([v0 * v0])]
    for i in range(1, n):
        c = cap_end if i == n - 1 else cap[i]
        lv = e_levels[e_levels <= c * c + 1e-12]
        # the point's own cap and the start speed are where optimal profiles ride
        extra = [c * c] + ([v0 * v0] if v0 <= c else [])
        node_e.append(np.unique(np.concatenate([lv, extra])))
    node_v = [np.sqrt(e) for e in node_e]
    best = [np.full(len(e), math.inf) for e in node_e]
    best[0][0] = 0.0

    a_hi = 2.0 * ds * max(ggv.ax_acc_max)
    d_hi = 2.0 * ds * max(ggv.ax_dec_max)
    const = ggv.is_constant
    acc0, dec0, ay0 = ggv.ax_acc_max[0], ggv.ax_dec_max[0], ggv.ay_max[0]
    for i in range(n - 1):
        live = np.isfinite(best[i])
        if not live.any():
            continue
        src_e, src_v, src_t = node_e[i][live], node_v[i][live], best[i][live]
        for k in range(1, min(max_span, n - 1 - i) + 1):
            j = i + k
            dst_e = node_e[j]
            # only destinations reachable within the largest envelope budget
            lo = np.searchsorted(dst_e, src_e - k * d_hi - 1e-12)
            hi = np.searchsorted(dst_e, src_e + k * a_hi + 1e-12, side="right")
            width = int((hi - lo).max())
            if width <= 0:
                continue
            idx = lo[:, None] + np.arange(width)[None, :]
            valid = idx < hi[:, None]
            idx = np.minimum(idx, len(dst_e) - 1)
            ea = src_e[:, None]
            eb = dst_e[idx]
            slope = (eb - ea) / k  # v^2 change per cell
            ax = np.abs(slope) / (2.0 * ds)
            accel = slope >= 0
            if const:
                # limits do not depend on speed: the longitudinal term is fixed along the edge
                ax_term = (ax / np.where(accel, acc0, dec0)) ** p
            e_m = ea
            for m in range(k):
                if m > 0:
                    e_m = np.maximum(e_m + slope, 0.0)
                    valid &= e_m <= (cap[i + m] + 1e-9) ** 2
                if const:
                    lat = (e_m * (abs(rho[i + m]) / ay0)) ** p
                    valid &= ax_term + lat <= 1.0 + 1e-12
                else:
                    acc, dec, aym = _limits_vec(ggv, np.sqrt(e_m))
                    lim = np.where(accel, acc, dec)
                    valid &= (ax / lim) ** p + (e_m * abs(rho[i + m]) / aym) ** p <= 1.0 + 1e-12
            # v^2 linear in s means constant acceleration, so the cell times telescope
            den = src_v[:, None] + node_v[j][idx]
            with np.errstate(divide="ignore"):
                t = 2.0 * k * ds / den
            valid &= np.isfinite(t)
            total = src_t[:, None] + t
            np.minimum.at(best[j], idx[valid], total[valid])
    return float(best[-1].min())


def _limits_vec(ggv: GgvDiagram, v: np.ndarray):
    if len(set(ggv.ax_acc_max)) == len(set(ggv.ax_dec_max)) == len(set(ggv.ay_max)) == 1:
        return ggv.ax_acc_max[0], ggv.ax_dec_max[0], ggv.ay_max[0]
    k = ggv.speed_knots
    acc = np.interp(v, k, ggv.ax_acc_max)
    dec = np.interp(v, k, ggv.ax_dec_max)
    aym = np.interp(v, k, ggv.ay_max)
    return acc, dec, aym


def terminal_cap(ggv: GgvDiagram, rho_end: float, scale: float = 0.9) -> float:
    """Default receding-horizon terminal speed cap."""
    return scale * max_cornering_speed(ggv, rho_end)
