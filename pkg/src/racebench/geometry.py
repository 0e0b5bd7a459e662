"""Track geometry: corridors, arc-length paths, projection and G2 spirals.

A track is a sampled centerline with left/right widths. ``resample_track``
turns it into a :class:`Path` on a uniform arc-length grid. The spiral solver
connects two curvature-carrying poses with a single cubic-curvature spiral,
which is what the clothoid tracking controller relies on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.interpolate import CubicSpline


class TrackError(ValueError):
    """Invalid or degenerate track; ``index`` names the offending sample."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message if index is None else f"{message} (sample {index})")
        self.index = index


class SpiralFitError(RuntimeError):
    """Newton shooting did not converge; carries the final residual vector."""

    def __init__(self, message: str, residuals: np.ndarray):
        super().__init__(f"{message}; residuals={np.array2string(residuals, precision=3)}")
        self.residuals = residuals


def wrap_angle(a):
    """Map angles to (-pi, pi]."""
    out = np.mod(np.asarray(a, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    out = np.where(out == -np.pi, np.pi, out)
    if np.ndim(out) == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class TrackDefinition:
    x: np.ndarray
    y: np.ndarray
    w_left: np.ndarray
    w_right: np.ndarray
    closed: bool = True

    def __post_init__(self):
        arrs = [np.asarray(a, dtype=float) for a in (self.x, self.y, self.w_left, self.w_right)]
        n = len(arrs[0])
        if any(len(a) != n for a in arrs):
            raise TrackError("track columns differ in length")
        if n < 10:
            raise TrackError(f"track needs at least 10 samples, got {n}")
        for name, a in zip(("x", "y", "w_left", "w_right"), arrs):
            if not np.all(np.isfinite(a)):
                raise TrackError(f"non-finite {name}", int(np.flatnonzero(~np.isfinite(a))[0]))
        x, y, wl, wr = arrs
        if self.closed and math.hypot(x[-1] - x[0], y[-1] - y[0]) <= 1e-6:
            # explicit closing sample; drop it so the loop has no duplicate
            x, y, wl, wr = x[:-1], y[:-1], wl[:-1], wr[:-1]
        seg = np.hypot(np.diff(x), np.diff(y))
        bad = np.flatnonzero(seg <= 1e-9)
        if bad.size:
            raise TrackError("duplicate consecutive samples", int(bad[0]) + 1)
        for name, w in (("w_left", wl), ("w_right", wr)):
            bad = np.flatnonzero(w <= 0)
            if bad.size:
                raise TrackError(f"{name} must be positive", int(bad[0]))
        for name, a in zip(("x", "y", "w_left", "w_right"), (x, y, wl, wr)):
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    def __len__(self):
        return len(self.x)

    @property
    def min_half_width(self) -> float:
        return float(min(self.w_left.min(), self.w_right.min()))


@dataclass(frozen=True)
class Path:
    """Arc-length sampled planar curve.

    ``w_left``/``w_right`` are carried along when the path was derived from a
    track corridor (they are ``None`` for free curves such as spirals).
    """

    s: np.ndarray
    x: np.ndarray
    y: np.ndarray
    psi: np.ndarray
    rho: np.ndarray
    closed: bool = False
    w_left: Optional[np.ndarray] = None
    w_right: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("s", "x", "y", "psi", "rho", "w_left", "w_right"):
            a = getattr(self, name)
            if a is None:
                continue
            a = np.array(a, dtype=float)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if np.any(np.diff(self.s) <= 0):
            raise ValueError("path arc length must be strictly increasing")

    def __len__(self):
        return len(self.s)

    @property
    def length(self) -> float:
        """Total length; for closed paths includes the closing segment."""
        if self.closed:
            return float(self.s[-1] + math.hypot(self.x[0] - self.x[-1], self.y[0] - self.y[-1]))
        return float(self.s[-1] - self.s[0])

    def wrap_s(self, s):
        return np.mod(s, self.length) if self.closed else np.clip(s, self.s[0], self.s[-1])

    def _interp(self, values, s, angle=False):
        s = self.wrap_s(np.asarray(s, dtype=float))
        if self.closed:
            grid = np.append(self.s, self.length)
            if angle:
                vals = np.unwrap(np.append(values, values[0]))
                vals[-1] = vals[-2] + wrap_angle(values[0] - values[-1])
                return wrap_angle(np.interp(s, grid, vals))
            return np.interp(s, grid, np.append(values, values[0]))
        if angle:
            return wrap_angle(np.interp(s, self.s, np.unwrap(values)))
        return np.interp(s, self.s, values)

    def position_at(self, s):
        return self._interp(self.x, s), self._interp(self.y, s)

    def heading_at(self, s):
        return self._interp(self.psi, s, angle=True)

    def curvature_at(self, s):
        return self._interp(self.rho, s)

    def widths_at(self, s):
        if self.w_left is None:
            raise ValueError("path carries no corridor widths")
        return self._interp(self.w_left, s), self._interp(self.w_right, s)


@dataclass(frozen=True)
class PoseCurv:
    x: float
    y: float
    psi: float
    rho: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.psi, self.rho)):
            raise ValueError("pose fields must be finite")
        object.__setattr__(self, "psi", wrap_angle(self.psi))


# --------------------------------------------------------------------------
# Track files


def read_track(path) -> TrackDefinition:
    """Read a ``x,y,w_left,w_right`` table; ``# closed=true`` marks a loop."""
    closed = False
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
                header = [h.strip() for h in line.split(",")]
                if header != ["x", "y", "w_left", "w_right"]:
                    raise TrackError(f"unexpected header {header}")
                continue
            rows.append([float(v) for v in line.split(",")])
    if header is None:
        raise TrackError("missing header")
    a = np.array(rows, dtype=float).reshape(-1, 4)
    return TrackDefinition(a[:, 0], a[:, 1], a[:, 2], a[:, 3], closed=closed)


def write_track(track: TrackDefinition, path) -> None:
    with open(path, "w") as fh:
        if track.closed:
            fh.write("# closed=true\n")
        fh.write("x,y,w_left,w_right\n")
        for row in zip(track.x, track.y, track.w_left, track.w_right):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


# --------------------------------------------------------------------------
# Resampling and curvature


def _smooth(values: np.ndarray, closed: bool, window: int = 5) -> np.ndarray:
    half = window // 2
    if closed:
        padded = np.concatenate([values[-half:], values, values[:half]])
        return np.convolve(padded, np.ones(window) / window, mode="valid")
    out = np.empty_like(values)
    n = len(values)
    for i in range(n):
        h = min(half, i, n - 1 - i)
        out[i] = values[i - h:i + h + 1].mean()
    return out


def heading_and_curvature(x: np.ndarray, y: np.ndarray, ds: float, closed: bool):
    """Central-difference heading and 5-point smoothed curvature on a uniform grid."""
    if closed:
        dx = (np.roll(x, -1) - np.roll(x, 1)) / (2 * ds)
        dy = (np.roll(y, -1) - np.roll(y, 1)) / (2 * ds)
    else:
        dx = np.gradient(x, ds)
        dy = np.gradient(y, ds)
    psi = np.arctan2(dy, dx)
    upsi = np.unwrap(psi)
    if closed:
        fwd = wrap_angle(np.roll(psi, -1) - psi)
        bwd = wrap_angle(psi - np.roll(psi, 1))
        rho = (fwd + bwd) / (2 * ds)
    else:
        rho = np.gradient(upsi, ds)
    return wrap_angle(psi), _smooth(rho, closed)


def _spline_through(track: TrackDefinition):
    x, y = track.x, track.y
    pts = np.column_stack([x, y])
    if track.closed:
        pts = np.vstack([pts, pts[:1]])
        wl = np.append(track.w_left, track.w_left[0])
        wr = np.append(track.w_right, track.w_right[0])
        bc = "periodic"
    else:
        wl, wr = track.w_left, track.w_right
        bc = "not-a-knot"
    u = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(pts, axis=0).T))])
    spl = CubicSpline(u, pts, bc_type=bc)
    return u, spl, wl, wr


def resample_track(track: TrackDefinition, ds: float, check_fold: bool = True) -> Path:
    """Resample a track centerline to a uniform arc-length grid of step <= ``ds``.

    ``check_fold`` rejects corridors whose inner boundary folds over itself;
    switch it off for lines whose widths are only carried along as metadata.
    """
    if ds <= 0:
        raise ValueError("ds must be positive")
    u, spl, wl, wr = _spline_through(track)
    # arc length of the spline by dense Gauss-Legendre per knot interval
    gx, gw = np.polynomial.legendre.leggauss(8)
    a, b = u[:-1], u[1:]
    mid, half = (a + b) / 2, (b - a) / 2
    nodes = mid[:, None] + half[:, None] * gx[None, :]
    speed = np.linalg.norm(spl(nodes, 1), axis=-1)
    seg_len = (speed * gw[None, :]).sum(axis=1) * half
    arc = np.concatenate([[0.0], np.cumsum(seg_len)])
    total = arc[-1]

    n = int(math.ceil(total / ds))
    if not track.closed:
        n += 1
    step = total / n if track.closed else total / (n - 1)
    s = np.arange(n) * step
    # invert arc(u) by a dense lookup refined with Newton steps on the spline speed
    dense_u = np.linspace(0.0, u[-1], 40 * len(u) + 1)
    dense_arc = np.interp(dense_u, u, arc)
    # the knot-level interp above is piecewise linear; refine per sample
    ui = np.interp(s, dense_arc, dense_u)
    for _ in range(3):
        k = np.clip(np.searchsorted(u, ui, side="right") - 1, 0, len(u) - 2)
        # arc at ui: integrate speed from knot k to ui with 8-point rule
        lo = u[k]
        hm, hh = (lo + ui) / 2, (ui - lo) / 2
        q = hm[:, None] + hh[:, None] * gx[None, :]
        part = (np.linalg.norm(spl(q, 1), axis=-1) * gw[None, :]).sum(axis=1) * hh
        err = arc[k] + part - s
        ui = ui - err / np.linalg.norm(spl(ui, 1), axis=-1)
    xy = spl(ui)
    x, y = xy[:, 0], xy[:, 1]
    psi, rho = heading_and_curvature(x, y, step, track.closed)
    w_left = np.interp(ui, u, wl)
    w_right = np.interp(ui, u, wr)

    # corridor fold check: inner boundary offset must stay inside the osculating circle
    inner = np.where(rho > 0, w_left, w_right) * np.abs(rho)
    bad = np.flatnonzero(inner >= 1.0)
    if check_fold and bad.size:
        k = int(np.clip(np.searchsorted(u, ui[bad[0]], side="right") - 1, 0, len(track) - 1))
        raise TrackError("corridor self-intersects (width exceeds turn radius)", k)
    return Path(s, x, y, psi, rho, closed=track.closed, w_left=w_left, w_right=w_right)


# --------------------------------------------------------------------------
# Projection


def project_to_path(path: Path, x: float, y: float, hint: float | None = None,
                    window: float | None = None):
    """Closest point on the polyline. Returns ``(s_star, lateral_error)``.

    ``lateral_error`` is positive to the left of the path direction. With
    ``hint``/``window`` only segments within ``window`` of arc length around
    ``hint`` are searched (closed paths wrap).
    """
    px, py, ps = path.x, path.y, path.s
    n = len(ps)
    if path.closed:
        idx = np.arange(n)
        nxt = (idx + 1) % n
        seg_s = ps
        seg_len = np.append(np.diff(ps), path.length - ps[-1])
    else:
        idx = np.arange(n - 1)
        nxt = idx + 1
        seg_s = ps[:-1]
        seg_len = np.diff(ps)
    if hint is not None and window is not None:
        if path.closed:
            d = np.abs(np.mod(seg_s - hint + path.length / 2, path.length) - path.length / 2)
        else:
            d = np.abs(seg_s - hint)
        keep = d <= window
        if keep.any():
            idx, nxt, seg_s, seg_len = idx[keep], nxt[keep], seg_s[keep], seg_len[keep]
    ax, ay = px[idx], py[idx]
    bx, by = px[nxt] - ax, py[nxt] - ay
    l2 = bx * bx + by * by
    t = np.clip(((x - ax) * bx + (y - ay) * by) / l2, 0.0, 1.0)
    fx, fy = ax + t * bx, ay + t * by
    d2 = (x - fx) ** 2 + (y - fy) ** 2
    k = int(np.argmin(d2))
    seg = math.sqrt(l2[k])
    cross = (bx[k] * (y - ay[k]) - by[k] * (x - ax[k])) / seg
    dist = math.sqrt(d2[k])
    s_star = float(seg_s[k] + t[k] * seg_len[k])
    if path.closed:
        s_star = s_star % path.length
    lat = math.copysign(dist, cross) if dist > 0 else 0.0
    return s_star, lat


# --------------------------------------------------------------------------
# Cubic-curvature spiral


@dataclass(frozen=True)
class Spiral:
    """kappa(s) = rho0 + b s + c s^2 + d s^3 on [0, length], starting at ``start``."""

    start: PoseCurv
    b: float
    c: float
    d: float
    length: float
    iterations: int = 0
    residuals: np.ndarray = field(default_factory=lambda: np.zeros(4))

    def curvature(self, s):
        s = np.asarray(s, dtype=float)
        return self.start.rho + s * (self.b + s * (self.c + s * self.d))

    def heading(self, s):
        s = np.asarray(s, dtype=float)
        return self.start.psi + s * (self.start.rho + s * (self.b / 2 + s * (self.c / 3 + s * self.d / 4)))

    def end_pose(self) -> PoseCurv:
        x, y = _spiral_xy(self.start, self.b, self.c, self.d, self.length)
        return PoseCurv(x, y, float(self.heading(self.length)), float(self.curvature(self.length)))

    def to_path(self, ds: float = 0.01) -> Path:
        n = max(2, int(math.ceil(self.length / ds)) + 1)
        s = np.linspace(0.0, self.length, n)
        h = np.diff(s)
        # cumulative position by 3-point Gauss-Legendre per interval
        gx, gw = np.polynomial.legendre.leggauss(3)
        q = (s[:-1, None] + s[1:, None]) / 2 + (h[:, None] / 2) * gx[None, :]
        th = self.heading(q)
        dx = (np.cos(th) * gw).sum(axis=1) * h / 2
        dy = (np.sin(th) * gw).sum(axis=1) * h / 2
        x = self.start.x + np.concatenate([[0.0], np.cumsum(dx)])
        y = self.start.y + np.concatenate([[0.0], np.cumsum(dy)])
        return Path(s, x, y, wrap_angle(self.heading(s)), self.curvature(s))


def _gl_nodes(length: float):
    """Gauss-Legendre nodes/weights on [0, length]: order 16 per 0.5 m of arc."""
    panels = max(1, int(math.ceil(length / 0.5)))
    gx, gw = _GL16
    edges = np.linspace(0.0, length, panels + 1)
    h = (edges[1] - edges[0]) / 2
    mids = (edges[:-1] + edges[1:]) / 2
    nodes = (mids[:, None] + h * gx[None, :]).ravel()
    weights = np.tile(gw * h, panels)
    return nodes, weights


_GL16 = np.polynomial.legendre.leggauss(16)


def _spiral_xy(start: PoseCurv, b, c, d, length):
    s, w = _gl_nodes(length)
    th = start.psi + s * (start.rho + s * (b / 2 + s * (c / 3 + s * d / 4)))
    return start.x + float(w @ np.cos(th)), start.y + float(w @ np.sin(th))


def _spiral_residual(start: PoseCurv, target: PoseCurv, dpsi: float, p: np.ndarray, jac=True):
    b, c, d, S = p
    s, w = _gl_nodes(S)
    th = start.psi + s * (start.rho + s * (b / 2 + s * (c / 3 + s * d / 4)))
    cs, sn = np.cos(th), np.sin(th)
    x = start.x + w @ cs
    y = start.y + w @ sn
    rho0 = start.rho
    head = S * (rho0 + S * (b / 2 + S * (c / 3 + S * d / 4)))
    kap = rho0 + S * (b + S * (c + S * d))
    r = np.array([x - target.x, y - target.y, head - dpsi, kap - target.rho])
    if not jac:
        return r, None
    th_end = start.psi + head
    J = np.empty((4, 4))
    # d theta(s) / d(b, c, d) = s^2/2, s^3/3, s^4/4
    dth = np.stack([s**2 / 2, s**3 / 3, s**4 / 4])
    J[0, :3] = -(dth * sn) @ w
    J[1, :3] = (dth * cs) @ w
    J[0, 3] = math.cos(th_end)
    J[1, 3] = math.sin(th_end)
    J[2, :] = [S**2 / 2, S**3 / 3, S**4 / 4, kap]
    J[3, :] = [S, S**2, S**3, b + 2 * c * S + 3 * d * S**2]
    return r, J


def fit_g2_spiral(start: PoseCurv, end: PoseCurv, tol: float = 1e-6, max_iter: int = 50) -> Spiral:
    """Connect two poses with matching position, heading and curvature.

    Damped Newton shooting over (b, c, d, length). Raises
    :class:`SpiralFitError` if the residuals do not drop below ``tol``.
    """
    chord = math.hypot(end.x - start.x, end.y - start.y)
    if chord <= 1e-9:
        raise ValueError("start and end positions coincide")
    dpsi = wrap_angle(end.psi - start.psi)
    if abs(dpsi) >= math.pi:
        raise ValueError("heading change must be below pi")

    def scaled_norm(r):
        return max(abs(r[0]), abs(r[1]), abs(r[2]), abs(r[3]))

    inits = [chord, 1.25 * chord, 0.85 * chord, 1.6 * chord]
    last = None
    for S0 in inits:
        p = np.array([(end.rho - start.rho) / S0, 0.0, 0.0, S0])
        r, J = _spiral_residual(start, end, dpsi, p)
        it = 0
        while it < max_iter:
            if scaled_norm(r) <= tol:
                return Spiral(start, float(p[0]), float(p[1]), float(p[2]), float(p[3]), it, r)
            it += 1
            try:
                step = np.linalg.solve(J, -r)
            except np.linalg.LinAlgError:
                break
            nrm = np.linalg.norm(r)
            alpha = 1.0
            accepted = False
            for _ in range(30):
                trial = p + alpha * step
                if trial[3] > 1e-6:
                    rt, _ = _spiral_residual(start, end, dpsi, trial, jac=False)
                    if np.linalg.norm(rt) < nrm:
                        accepted = True
                        break
                alpha *= 0.5
            if not accepted:
                break
            p = trial
            r, J = _spiral_residual(start, end, dpsi, p)
        last = r
        if scaled_norm(r) <= tol:
            return Spiral(start, float(p[0]), float(p[1]), float(p[2]), float(p[3]), it, r)
    raise SpiralFitError("spiral Newton did not converge", last)


def spiral_curvature_profile(spiral: Spiral, horizon: float, ds: float,
                             continuation: Callable[[np.ndarray], np.ndarray] | None = None) -> np.ndarray:
    """Uniform curvature samples on [0, horizon].

    Beyond the spiral end, ``continuation(s_past_end)`` supplies the curvature
    (the clothoid controller passes the raceline curvature there).
    """
    n = int(round(horizon / ds)) + 1
    s = np.arange(n) * ds
    out = spiral.curvature(np.minimum(s, spiral.length))
    past = s > spiral.length + 1e-12
    if past.any():
        if continuation is None:
            raise ValueError("horizon exceeds spiral length and no continuation was given")
        out = out.copy()
        out[past] = continuation(s[past] - spiral.length)
    return out


def path_from_points(x: Sequence[float], y: Sequence[float], closed: bool = False) -> Path:
    """Path through already-uniform points (heading/curvature from differences)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    seg = np.hypot(np.diff(x), np.diff(y))
    s = np.concatenate([[0.0], np.cumsum(seg)])
    ds = float(seg.mean())
    psi, rho = heading_and_curvature(x, y, ds, closed)
    return Path(s, x, y, psi, rho, closed=closed)
