"""Offline raceline: minimum-curvature path plus a cyclic speed profile.

The path is found by shifting centerline samples along their normals. The
squared discrete (Menger) curvature is linearised in the offsets, giving a
box-constrained least-squares problem that is solved by accelerated projected
gradient; the linearisation is refreshed a few times. The speed profile is the
forward-backward solution iterated around the lap until it is periodic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Path, TrackDefinition, TrackError, resample_track
from .ggv import GgvDiagram, max_cornering_speed
from .velocity import plan_speed

# body half-width plus clearance for tracking error
DEFAULT_MARGIN = 0.35
# Pure squared curvature happily trades length for radius on ovals (the outer
# loop is as curved as the apex-cutting line but longer); this weight on the
# quadratic length proxy makes the generated lines cut corners.
DEFAULT_LENGTH_WEIGHT = 30.0


class ProfileError(RuntimeError):
    def __init__(self, message, last_dv):
        super().__init__(f"{message} (last max |dv| = {last_dv:.3g} m/s)")
        self.last_dv = last_dv


@dataclass(frozen=True)
class Raceline:
    path: Path
    v: np.ndarray
    ax: np.ndarray
    ay: np.ndarray

    def __post_init__(self):
        for name in ("v", "ax", "ay"):
            a = np.array(getattr(self, name), dtype=float)
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def length(self) -> float:
        return self.path.length

    def _interp(self, values, s):
        p = self.path
        s = p.wrap_s(np.asarray(s, dtype=float))
        if p.closed:
            return np.interp(s, np.append(p.s, p.length), np.append(values, values[0]))
        return np.interp(s, p.s, values)

    def speed_at(self, s):
        return self._interp(self.v, s)

    def ax_at(self, s):
        return self._interp(self.ax, s)

    def lap_time(self) -> float:
        p = self.path
        v = np.append(self.v, self.v[0]) if p.closed else self.v
        s = np.append(p.s, p.length) if p.closed else p.s
        return float(np.sum(2.0 * np.diff(s) / (v[:-1] + v[1:])))


# --------------------------------------------------------------------------
# Minimum curvature


def menger_curvature(x: np.ndarray, y: np.ndarray, closed: bool) -> np.ndarray:
    """Signed three-point curvature at every sample (ends are 0 on open curves)."""
    if closed:
        xa, ya, xc, yc = np.roll(x, 1), np.roll(y, 1), np.roll(x, -1), np.roll(y, -1)
    else:
        xa, ya = np.concatenate([[x[0]], x[:-1]]), np.concatenate([[y[0]], y[:-1]])
        xc, yc = np.concatenate([x[1:], [x[-1]]]), np.concatenate([y[1:], [y[-1]]])
    ux, uy = x - xa, y - ya
    wx, wy = xc - x, yc - y
    cross = ux * wy - uy * wx
    den = np.hypot(ux, uy) * np.hypot(wx, wy) * np.hypot(xc - xa, yc - ya)
    out = np.zeros_like(x)
    ok = den > 0
    out[ok] = 2.0 * cross[ok] / den[ok]
    return out


def _curvature_jacobian(px, py, nx, ny, off, closed, eps=1e-6):
    """Tridiagonal d kappa_i / d n_{i-1,i,i+1} by central differences.

    Returns (kappa, J) with J as an (n, 3) band: columns are the derivative
    with respect to the previous, own and next offset.
    """
    n = len(px)

    def kappa(o):
        return menger_curvature(px + o * nx, py + o * ny, closed)

    k0 = kappa(off)
    band = np.zeros((n, 3))
    # perturb every third sample so neighbouring stencils do not overlap; on a
    # closed loop whose length is not a multiple of 3 the leftover tail
    # samples get colours of their own
    colour = np.arange(n) % 3
    if closed and n % 3:
        tail = n - n % 3
        colour[tail:] = 3 + np.arange(n - tail)
    for shift, col in ((1, 0), (0, 1), (-1, 2)):
        for phase in range(int(colour.max()) + 1):
            mask = (colour == phase).astype(float)
            kp = kappa(off + eps * mask)
            km = kappa(off - eps * mask)
            d = (kp - km) / (2 * eps)
            # stencil i uses offsets i-1, i, i+1; select rows whose neighbour moved
            if closed:
                seen = np.roll(mask, shift)
            elif shift == 1:
                seen = np.concatenate([[0.0], mask[:-1]])
            elif shift == -1:
                seen = np.concatenate([mask[1:], [0.0]])
            else:
                seen = mask
            rows = np.flatnonzero(seen > 0)
            band[rows, col] = d[rows]
    return k0, band


def _band_matvec(band, v, closed):
    out = band[:, 1] * v
    if closed:
        out += band[:, 0] * np.roll(v, 1) + band[:, 2] * np.roll(v, -1)
    else:
        out[1:] += band[1:, 0] * v[:-1]
        out[:-1] += band[:-1, 2] * v[1:]
    return out


def _band_rmatvec(band, r, closed):
    out = band[:, 1] * r
    if closed:
        out += np.roll(band[:, 0] * r, -1) + np.roll(band[:, 2] * r, 1)
    else:
        out[:-1] += band[1:, 0] * r[1:]
        out[1:] += band[:-1, 2] * r[:-1]
    return out


def band_to_dense(band, closed):
    n = len(band)
    J = np.zeros((n, n))
    for i in range(n):
        J[i, i] = band[i, 1]
        if closed or i > 0:
            J[i, (i - 1) % n] += band[i, 0]
        if closed or i < n - 1:
            J[i, (i + 1) % n] += band[i, 2]
    return J


def box_least_squares(matvec, rmatvec, r0, lo, hi, x0=None, iters=4000, tol=1e-12, lipschitz=None):
    """min ||r0 + A x||^2 subject to lo <= x <= hi (FISTA projected gradient)."""
    n = len(lo)
    x = np.clip(np.zeros(n) if x0 is None else x0, lo, hi)
    if lipschitz is None:
        v = np.random.default_rng(0).standard_normal(n)
        for _ in range(50):
            v = rmatvec(matvec(v))
            v /= np.linalg.norm(v)
        lipschitz = 2.0 * np.linalg.norm(rmatvec(matvec(v))) * 1.05
    step = 1.0 / lipschitz
    y, t = x.copy(), 1.0
    f_prev = math.inf
    for k in range(iters):
        g = 2.0 * rmatvec(r0 + matvec(y))
        x_new = np.clip(y - step * g, lo, hi)
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        y = x_new + ((t - 1.0) / t_new) * (x_new - x)
        x, t = x_new, t_new
        if k % 50 == 49:
            f = float(np.sum((r0 + matvec(x)) ** 2))
            if f > f_prev:  # adaptive restart
                y, t = x.copy(), 1.0
            elif f_prev - f <= tol * max(1.0, f):
                break
            f_prev = f
    return x


def _objective(center, nx, ny, off, length_weight):
    """Stacked residual ``r0 + A n``: curvature rows, then weighted segment rows.

    The segment rows are sqrt(w) * (r_{i+1} - r_i) for both coordinates, i.e.
    a quadratic length proxy that is exact in the offsets.
    """
    closed = center.closed
    k0, band = _curvature_jacobian(center.x, center.y, nx, ny, off, closed)
    rk = k0 - _band_matvec(band, off, closed)
    n = len(off)
    sw = math.sqrt(length_weight)

    def diff(a):
        return np.roll(a, -1) - a if closed else np.diff(a)

    def diff_t(r):
        if closed:
            return np.roll(r, 1) - r
        out = np.zeros(n)
        out[1:] += r
        out[:-1] -= r
        return out

    r0 = np.concatenate([rk, sw * diff(center.x), sw * diff(center.y)])
    m = len(rk)

    def mv(v):
        return np.concatenate([_band_matvec(band, v, closed), sw * diff(nx * v), sw * diff(ny * v)])

    def rmv(r):
        k = len(r) - m
        rx, ry = r[m:m + k // 2], r[m + k // 2:]
        return _band_rmatvec(band, r[:m], closed) + sw * (nx * diff_t(rx) + ny * diff_t(ry))

    return r0, mv, rmv


def min_curvature_path(track: TrackDefinition, margin: float = DEFAULT_MARGIN, ds_opt: float = 0.1,
                       ds_out: float = 0.05, relinearize: int = 4, iters: int = 4000,
                       length_weight: float = 0.0) -> Path:
    """Minimum-curvature line inside the corridor shrunk by ``margin``.

    ``length_weight`` adds a quadratic path-length proxy to the squared
    curvature; a small value breaks the tie between equally curved lines in
    favour of the shorter one.
    """
    center = resample_track(track, ds_opt)
    wl, wr = center.w_left, center.w_right
    bad = np.flatnonzero((wl <= margin) | (wr <= margin))
    if bad.size:
        # report the original track sample nearest to the violation
        k = int(np.argmin(np.hypot(track.x - center.x[bad[0]], track.y - center.y[bad[0]])))
        raise TrackError(f"margin {margin} m leaves no room in the corridor", k)
    nx, ny = -np.sin(center.psi), np.cos(center.psi)
    # small guard so the respline afterwards cannot poke through the bound
    lo = -(wr - margin) + 2e-3
    hi = (wl - margin) - 2e-3
    lo, hi = np.minimum(lo, 0.0), np.maximum(hi, 0.0)
    closed = center.closed
    off = np.zeros(len(center))
    for _ in range(relinearize):
        r0, mv, rmv = _objective(center, nx, ny, off, length_weight)
        off = box_least_squares(mv, rmv, r0, lo, hi, x0=off, iters=iters)
    x = center.x + off * nx
    y = center.y + off * ny
    line = TrackDefinition(x, y, wl - off, wr + off, closed=closed)
    return resample_track(line, ds_out, check_fold=False)


def linearized_qp(track: TrackDefinition, margin: float = DEFAULT_MARGIN, ds_opt: float = 0.1):
    """The first (centerline) linearisation as dense data: (J, kappa0, lo, hi)."""
    center = resample_track(track, ds_opt)
    nx, ny = -np.sin(center.psi), np.cos(center.psi)
    k0, band = _curvature_jacobian(center.x, center.y, nx, ny, np.zeros(len(center)), center.closed)
    lo = np.minimum(-(center.w_right - margin) + 2e-3, 0.0)
    hi = np.maximum((center.w_left - margin) - 2e-3, 0.0)
    return band_to_dense(band, center.closed), k0, lo, hi


# --------------------------------------------------------------------------
# Speed profile


def profile_raceline(path: Path, ggv: GgvDiagram, tol: float = 1e-4, max_sweeps: int = 20) -> Raceline:
    """Periodic forward-backward speed profile on a closed path."""
    if not path.closed:
        raise ValueError("raceline profiling needs a closed path")
    n = len(path)
    ds = float(path.s[1] - path.s[0])
    if np.max(np.abs(np.diff(path.s) - ds)) > 1e-6 * max(1.0, ds):
        raise ValueError("path must be on a uniform arc-length grid")
    caps = np.array([max_cornering_speed(ggv, r) for r in path.rho])
    start = int(np.argmin(caps))
    order = np.roll(np.arange(n), -start)
    rho = np.append(path.rho[order], path.rho[order[0]])
    v_start = caps[start]
    v_prev = None
    for sweep in range(max_sweeps):
        plan = plan_speed(rho, ds, v_start, ggv, v_terminal_cap=v_start)
        v_new = plan.v
        dv = math.inf if v_prev is None else float(np.max(np.abs(v_new - v_prev)))
        wrap_gap = abs(v_new[-1] - v_new[0])
        v_prev = v_new
        if (dv < tol or sweep == 0) and wrap_gap < tol:
            break
        v_start = min(v_new[-1], v_start)
    else:
        raise ProfileError("cyclic speed profile did not converge", dv)
    v = np.empty(n)
    ax = np.empty(n)
    v[order] = plan.v[:-1]
    ax[order] = plan.ax[:-1]
    ay = v * v * path.rho
    return Raceline(path, v, ax, ay)


def generate_raceline(track: TrackDefinition, ggv: GgvDiagram, margin: float = DEFAULT_MARGIN,
                      ds: float = 0.05, length_weight: float = DEFAULT_LENGTH_WEIGHT) -> Raceline:
    """Minimum-curvature path (with the length tie-breaker) plus its cyclic profile."""
    path = min_curvature_path(track, margin, ds_out=ds, length_weight=length_weight)
    return profile_raceline(path, ggv)


# --------------------------------------------------------------------------
# Files

RACELINE_COLUMNS = ("s", "x", "y", "psi", "rho", "v", "ax", "ay")


def write_raceline(rl: Raceline, path) -> None:
    p = rl.path
    with open(path, "w") as fh:
        fh.write(f"# closed={'true' if p.closed else 'false'}\n")
        fh.write(",".join(RACELINE_COLUMNS) + "\n")
        for row in zip(p.s, p.x, p.y, p.psi, p.rho, rl.v, rl.ax, rl.ay):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_raceline(path) -> Raceline:
    closed = True
    rows = []
    with open(path) as fh:
        header = None
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, val = line[1:].partition("=")
                if key.strip() == "closed":
                    closed = val.strip().lower() == "true"
                continue
            if header is None:
                header = tuple(h.strip() for h in line.split(","))
                if header != RACELINE_COLUMNS:
                    raise ValueError(f"unexpected raceline header {header}")
                continue
            rows.append([float(v) for v in line.split(",")])
    a = np.array(rows, dtype=float)
    p = Path(a[:, 0], a[:, 1], a[:, 2], a[:, 3], a[:, 4], closed=closed)
    return Raceline(p, a[:, 5], a[:, 6], a[:, 7])
