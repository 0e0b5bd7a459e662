"""Closed-loop simulator: linear-tire dynamic bicycle, steering delay and lag,
first-order speed loop, and the per-tick control stack.

The plant integrates with fixed-step RK4 at ``tick_hz * substeps``. Steering
commands travel through a pure delay line (a FIFO at substep resolution) and
then a first-order lag. Tire cornering stiffness is proportional to the axle
normal load, and the load moves between the axles with longitudinal
acceleration, so the understeer gradient depends on ax.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .control import (CL_SCHEDULE, PP_SCHEDULE, ClothoidTracker, CurvatureReference, LookaheadSchedule,
                      kinematic_steering, pure_pursuit_curvature)
from .geometry import Path, PoseCurv, TrackDefinition, project_to_path, resample_track
from .ggv import GgvDiagram
from .msnn import MsnnModel, ReferenceWindow, msnn_forward
from .raceline import Raceline
from .velocity import plan_speed, terminal_cap

G = 9.81


@dataclass(frozen=True)
class PlantConfig:
    L: float = 0.33
    lf: float = 0.15875
    mass: float = 3.74
    yaw_inertia: float = 0.04712
    cg_height: float = 0.074
    # cornering stiffness per unit axle load (N/rad per N)
    cs_front: float = 3.34
    cs_rear: float = 5.5
    steer_tau: float = 0.05
    steer_delay: float = 0.15
    steer_limit: float = 0.42
    speed_tau: float = 0.1
    accel_cap: float = 15.0
    tick_hz: float = 150.0
    substeps: int = 4
    slip_speed_floor: float = 0.5
    half_width: float = 0.15

    def __post_init__(self):
        for f in ("L", "lf", "mass", "yaw_inertia", "cs_front", "cs_rear", "steer_tau", "steer_limit",
                  "speed_tau", "accel_cap", "tick_hz", "slip_speed_floor", "half_width"):
            if not getattr(self, f) > 0:
                raise ValueError(f"{f} must be positive")
        if self.cg_height < 0 or self.steer_delay < 0:
            raise ValueError("cg_height and steer_delay must be non-negative")
        if self.substeps < 1 or self.lf >= self.L:
            raise ValueError("need substeps >= 1 and 0 < lf < L")
        k = self.steer_delay * self.tick_hz * self.substeps
        if abs(k - round(k)) > 1e-9:
            raise ValueError("steering delay must be a whole number of substeps")

    @property
    def lr(self) -> float:
        return self.L - self.lf

    @property
    def dt(self) -> float:
        return 1.0 / (self.tick_hz * self.substeps)

    @property
    def delay_steps(self) -> int:
        return int(round(self.steer_delay * self.tick_hz * self.substeps))

    def axle_stiffness(self, ax: float = 0.0):
        """Front and rear cornering stiffness (N/rad) at longitudinal acceleration ``ax``."""
        fzf = max(self.mass * (G * self.lr - ax * self.cg_height) / self.L, 0.0)
        fzr = max(self.mass * (G * self.lf + ax * self.cg_height) / self.L, 0.0)
        return self.cs_front * fzf, self.cs_rear * fzr

    def understeer_gradient(self, ax: float = 0.0) -> float:
        """K in delta = rho L + K ay (rad per m/s^2) at steady state."""
        cf, cr = self.axle_stiffness(ax)
        return self.mass / self.L * (self.lr / cf - self.lf / cr)

    def to_dict(self):
        return {f: getattr(self, f) for f in self.__dataclass_fields__}


@dataclass(frozen=True)
class VehicleState:
    x: float = 0.0
    y: float = 0.0
    psi: float = 0.0
    vx: float = 0.0
    vy: float = 0.0
    r: float = 0.0
    delta_act: float = 0.0
    pending: tuple = ()  # steering commands inside the delay line, oldest first

    def __post_init__(self):
        if not all(math.isfinite(getattr(self, f)) for f in ("x", "y", "psi", "vx", "vy", "r", "delta_act")):
            raise ValueError("vehicle state must be finite")
        if self.vx < 0:
            object.__setattr__(self, "vx", 0.0)


def _derivs(cfg: PlantConfig, X, delta_in, v_cmd):
    x, y, psi, vx, vy, r, d = X
    a = (v_cmd - vx) / cfg.speed_tau
    a = min(max(a, -cfg.accel_cap), cfg.accel_cap)
    if vx <= 0.0 and a < 0.0:
        a = 0.0
    u = vx if vx > cfg.slip_speed_floor else cfg.slip_speed_floor
    cf, cr = cfg.axle_stiffness(a)
    lf, lr = cfg.lf, cfg.lr
    fyf = cf * (d - (vy + lf * r) / u)
    fyr = cr * (-(vy - lr * r) / u)
    c, s = math.cos(psi), math.sin(psi)
    return (
        vx * c - vy * s,
        vx * s + vy * c,
        r,
        a,
        (fyf + fyr) / cfg.mass - r * vx,
        (lf * fyf - lr * fyr) / cfg.yaw_inertia,
        (delta_in - d) / cfg.steer_tau,
    )


def step_plant(state: VehicleState, delta_cmd: float, v_cmd: float, cfg: PlantConfig, dt: float | None = None
               ) -> VehicleState:
    """Advance one integrator substep of length ``dt`` (default ``cfg.dt``)."""
    if not (math.isfinite(delta_cmd) and math.isfinite(v_cmd)):
        raise ValueError("plant inputs must be finite")
    dt = cfg.dt if dt is None else dt
    delta_cmd = min(max(delta_cmd, -cfg.steer_limit), cfg.steer_limit)
    nd = cfg.delay_steps
    pend = state.pending
    if len(pend) != nd:
        pend = (state.delta_act,) * nd
    if nd:
        delta_in = pend[0]
        pend = pend[1:] + (delta_cmd,)
    else:
        delta_in = delta_cmd
    X = (state.x, state.y, state.psi, state.vx, state.vy, state.r, state.delta_act)
    k1 = _derivs(cfg, X, delta_in, v_cmd)
    X2 = tuple(a + 0.5 * dt * b for a, b in zip(X, k1))
    k2 = _derivs(cfg, X2, delta_in, v_cmd)
    X3 = tuple(a + 0.5 * dt * b for a, b in zip(X, k2))
    k3 = _derivs(cfg, X3, delta_in, v_cmd)
    X4 = tuple(a + dt * b for a, b in zip(X, k3))
    k4 = _derivs(cfg, X4, delta_in, v_cmd)
    Xn = [a + dt / 6.0 * (b + 2 * c + 2 * d + e) for a, b, c, d, e in zip(X, k1, k2, k3, k4)]
    if Xn[3] < 0.0:
        Xn[3] = 0.0
    return VehicleState(*Xn, pending=pend)


# --------------------------------------------------------------------------
# Stack configuration


@dataclass(frozen=True)
class StackConfig:
    controller: str = "PP"  # "PP" or "CL"
    msnn: MsnnModel | None = None
    fbga: bool = False
    ggv: GgvDiagram | None = None  # envelope for online replanning
    pp_schedule: LookaheadSchedule = PP_SCHEDULE
    cl_schedule: LookaheadSchedule = CL_SCHEDULE
    planner_horizon: float = 3.0
    planner_ds: float = 0.05
    speed_preview: float = 0.1  # s of travel ahead used for the speed command
    window_w: int = 9  # preview window when no model is loaded
    window_T_s: float = 0.05
    pose_noise: float = 0.0  # std of Gaussian position noise (m)
    steer_preview: float = 0.2  # s of travel ahead where kinematic steering reads the curvature
    terminal: str = "raceline"  # planner terminal speed: "raceline" profile or "corner" cap

    def __post_init__(self):
        if self.controller not in ("PP", "CL"):
            raise ValueError("controller must be PP or CL")
        if self.fbga and self.ggv is None:
            raise ValueError("online replanning needs a g-g-v envelope")

    @property
    def label(self) -> str:
        s = self.controller
        if self.msnn is not None:
            s += "+MSNN"
        if self.fbga:
            s += "+FBGA"
        return s


TRACE_COLUMNS = ("t", "x", "y", "psi", "vx", "vy", "r", "delta_cmd", "delta_act", "v_cmd", "rho_ref",
                 "lat_err", "s_proj", "cpu_us_controller", "cpu_us_planner", "cpu_us_msnn")
CPU_COLUMNS = ("cpu_us_controller", "cpu_us_planner", "cpu_us_msnn")


@dataclass
class RunTrace:
    data: dict  # column name -> np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.data["t"]) if self.data else 0

    def __getitem__(self, name):
        return self.data[name]

    @property
    def crashed(self) -> bool:
        return bool(self.meta.get("crash", False))

    @property
    def lap_times(self) -> list:
        return list(self.meta.get("lap_times", []))


def empty_trace(meta=None) -> RunTrace:
    return RunTrace({c: np.zeros(0) for c in TRACE_COLUMNS}, dict(meta or {}))


def _fmt_meta(v):
    if isinstance(v, (list, tuple)):
        return ";".join(repr(float(a)) for a in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_trace(trace: RunTrace, path) -> None:
    with open(path, "w") as fh:
        for k in sorted(trace.meta):
            fh.write(f"# {k}={_fmt_meta(trace.meta[k])}\n")
        fh.write(",".join(TRACE_COLUMNS) + "\n")
        cols = [trace.data[c] for c in TRACE_COLUMNS]
        for row in zip(*cols):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def _parse_meta(k, v):
    if k == "lap_times":
        return [float(a) for a in v.split(";") if a]
    if v in ("True", "False"):
        return v == "True"
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


def read_trace(path) -> RunTrace:
    meta = {}
    header = None
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                k, _, v = line[1:].strip().partition("=")
                meta[k.strip()] = _parse_meta(k.strip(), v.strip())
                continue
            if header is None:
                header = tuple(line.split(","))
                if header != TRACE_COLUMNS:
                    raise ValueError(f"malformed trace header {header}")
                continue
            vals = line.split(",")
            if len(vals) != len(TRACE_COLUMNS):
                raise ValueError(f"malformed trace row {len(rows)}")
            rows.append([float(v) for v in vals])
    if header is None:
        raise ValueError("trace has no header")
    a = np.array(rows, dtype=float).reshape(-1, len(TRACE_COLUMNS))
    return RunTrace({c: a[:, i] for i, c in enumerate(TRACE_COLUMNS)}, meta)


# --------------------------------------------------------------------------
# Closed loop


def reference_window(ref: CurvatureReference, s_grid, v_prof, ax_prof, w: int, T_s: float) -> ReferenceWindow:
    """Sample a space-domain reference at look-ahead times ``j T_s``.

    Travel time along the profile is integrated with the trapezoid rule on
    1/v; beyond the profile end the last speed is held.
    """
    v = np.maximum(v_prof, 0.05)
    dt = 2.0 * np.diff(s_grid) / (v[:-1] + v[1:])
    tau = np.concatenate([[0.0], np.cumsum(dt)])
    tj = np.arange(w + 1) * T_s
    sj = np.interp(tj, tau, s_grid)
    over = tj > tau[-1]
    if over.any():
        sj[over] = s_grid[-1] + (tj[over] - tau[-1]) * v[-1]
    rho = ref.at(sj)
    vj = np.interp(sj, s_grid, v_prof)
    axj = np.interp(sj, s_grid, ax_prof)
    return ReferenceWindow(rho, vj, vj * vj * rho, axj)


def start_state(raceline: Raceline, plant: PlantConfig, s: float = 0.0) -> VehicleState:
    p = raceline.path
    x, y = p.position_at(s)
    rho = float(p.curvature_at(s))
    d = kinematic_steering(rho, plant.L, plant.steer_limit)
    return VehicleState(float(x), float(y), float(p.heading_at(s)), float(raceline.speed_at(s)), 0.0, 0.0, d,
                        (d,) * plant.delay_steps)


def run_closed_loop(raceline: Raceline, track: TrackDefinition | Path, stack: StackConfig,
                    plant: PlantConfig = PlantConfig(), laps: int = 1, seed: int = 0,
                    max_time: float | None = None) -> RunTrace:
    """Drive ``laps`` laps (or until a crash) and log every control tick."""
    meta = {"controller": stack.label, "laps_requested": laps, "seed": seed, "crash": False,
            "lap_times": [], "timeout": False}
    if laps <= 0:
        return empty_trace(meta)
    corridor = track if isinstance(track, Path) else resample_track(track, 0.05)
    rng = np.random.default_rng(seed)
    path = raceline.path
    L_lap = path.length
    if max_time is None:
        max_time = 3.0 * laps * raceline.lap_time() + 5.0

    model = stack.msnn
    w = model.w if model is not None else stack.window_w
    T_s = model.T_s if model is not None else stack.window_T_s
    cl = ClothoidTracker(stack.cl_schedule) if stack.controller == "CL" else None

    state = start_state(raceline, plant)
    if cl is not None:
        cl.last_rho = float(path.curvature_at(0.0))
    cols = {c: [] for c in TRACE_COLUMNS}
    tick_dt = 1.0 / plant.tick_hz
    s_hint = 0.0
    c_hint = float(project_to_path(corridor, state.x, state.y)[0])
    progress = 0.0
    next_lap = L_lap
    lap_start = 0.0
    infeasible_ticks = 0
    k = 0
    while True:
        t = k * tick_dt
        if t > max_time:
            meta["timeout"] = True
            break
        mx, my = state.x, state.y
        if stack.pose_noise > 0:
            mx += stack.pose_noise * rng.standard_normal()
            my += stack.pose_noise * rng.standard_normal()
        v_meas = state.vx

        # ---- controller: curvature reference
        t0 = time.perf_counter_ns()
        v_line = float(raceline.speed_at(s_hint))
        horizon = max(1.0, (w + 1) * T_s * max(v_meas, v_line) * 1.2)
        if stack.fbga:
            horizon = max(horizon, stack.planner_horizon)
        if cl is not None:
            ref = cl.reference(mx, my, state.psi, v_meas, raceline, horizon, stack.planner_ds, s_hint,
                               stack.pp_schedule)
        else:
            ref = pure_pursuit_curvature(PoseCurv(mx, my, state.psi), v_meas, raceline, stack.pp_schedule,
                                         horizon, stack.planner_ds, s_hint)
        s_proj = ref.s_start
        t1 = time.perf_counter_ns()

        # ---- speed profile along the reference
        s_grid = np.arange(len(ref.rho)) * ref.ds
        if stack.fbga:
            # the raceline profile at the horizon end already accounts for braking beyond it
            if stack.terminal == "raceline":
                v_end = float(raceline.speed_at(ref.s_target + s_grid[-1] - ref.lookahead))
            else:
                v_end = terminal_cap(stack.ggv, float(ref.rho[-1]))
            v0 = min(v_meas, stack.ggv.v_max)
            plan = plan_speed(ref.rho, ref.ds, v0, stack.ggv, v_terminal_cap=v_end)
            if plan.infeasibility > 1e-6:
                infeasible_ticks += 1
            v_prof, ax_prof = plan.v, plan.ax
        else:
            v_prof = raceline.speed_at(s_proj + s_grid)
            ax_prof = raceline.ax_at(s_proj + s_grid)
        v_cmd = float(np.interp(v_meas * stack.speed_preview, s_grid, v_prof))
        t2 = time.perf_counter_ns()

        # ---- steering
        rho_cmd = float(ref.at(v_meas * max(stack.steer_preview, tick_dt)))
        if model is not None:
            win = reference_window(ref, s_grid, v_prof, ax_prof, w, T_s)
            delta = msnn_forward(model, win)
        else:
            delta = kinematic_steering(rho_cmd, plant.L)
        delta = min(max(delta, -plant.steer_limit), plant.steer_limit)
        if cl is not None:
            cl.last_rho = rho_cmd
        t3 = time.perf_counter_ns()

        # ---- corridor check on the true position
        cs, clat = project_to_path(corridor, state.x, state.y, hint=c_hint, window=2.0)
        c_hint = cs
        wl, wr = corridor.widths_at(cs)
        room = float(wl) if clat >= 0 else float(wr)
        _, lat = project_to_path(path, state.x, state.y, hint=s_proj, window=1.0)

        for c, val in zip(TRACE_COLUMNS, (t, state.x, state.y, state.psi, state.vx, state.vy, state.r, delta,
                                          state.delta_act, v_cmd, ref.rho[0], lat, s_proj,
                                          (t1 - t0) / 1e3, (t2 - t1) / 1e3, (t3 - t2) / 1e3 if model else 0.0)):
            cols[c].append(val)

        if abs(clat) + plant.half_width > room:
            meta.update(crash=True, crash_tick=k, crash_x=state.x, crash_y=state.y, crash_s=s_proj)
            break

        # ---- lap accounting from raceline progress
        ds_prog = (s_proj - s_hint + L_lap / 2) % L_lap - L_lap / 2
        progress += ds_prog
        s_hint = s_proj
        if progress >= next_lap:
            meta["lap_times"].append(t - lap_start)
            lap_start = t
            next_lap += L_lap
            if len(meta["lap_times"]) >= laps:
                break

        for _ in range(plant.substeps):
            state = step_plant(state, delta, v_cmd, plant)
        k += 1

    meta["ticks"] = k
    meta["infeasible_ticks"] = infeasible_ticks
    if cl is not None:
        meta["cl_fallbacks"] = cl.fallbacks
    return RunTrace({c: np.array(v, dtype=float) for c, v in cols.items()}, meta)
