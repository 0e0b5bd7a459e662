"""One test per acceptance criterion; each prints a single PASS/FAIL line.

Run with ``pytest -s tests/test_acceptance.py`` to see the lines inline (they
also appear in the captured output of failing tests).
"""

import json
import math
import time

import numpy as np
import pytest
from scipy.integrate import quad

from racebench.bench import (collect_run, compute_metrics, extract_dataset)
from racebench.cli import main as cli_main
from racebench.control import (CL_SCHEDULE, kinematic_steering, pp_arc_curvature, pure_pursuit_curvature)
from racebench.geometry import PoseCurv, SpiralFitError, fit_g2_spiral, wrap_angle
from racebench.ggv import PRESET_NAMES, contains, preset
from racebench.msnn import (BASELINE, EXTENDED, MsnnModel, SteerDataset, TrainConfig, evaluate, gradient,
                            interpret_weights, predict, train)
from racebench.raceline import generate_raceline
from racebench.sim import CPU_COLUMNS, PlantConfig, StackConfig, run_closed_loop
from racebench.velocity import dp_speed_oracle, plan_speed


def verdict(n, ok, detail):
    print(f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}")
    assert ok, detail


def random_profiles(rng, count=50, n_max=60):
    out = []
    for _ in range(count):
        n = int(rng.integers(10, n_max + 1))
        # smooth-ish random curvature: a few random bends plus noise
        s = np.arange(n) * 0.05
        rho = sum(rng.uniform(-1.5, 1.5) * np.exp(-0.5 * ((s - rng.uniform(0, s[-1])) / rng.uniform(0.1, 0.8)) ** 2)
                  for _ in range(3))
        rho = rho + rng.normal(0, 0.05, n)
        out.append((rho, float(rng.uniform(0.0, 4.0))))
    return out


# --------------------------------------------------------------------------
# shared artefacts


@pytest.fixture(scope="module")
def nominal_dataset():
    track = __import__("racebench.tracks", fromlist=["track_b"]).track_b()
    rl = generate_raceline(track, preset("nominal"))
    trace = collect_run(track, rl, StackConfig(controller="PP"), 24.0)
    return extract_dataset(trace, w=9, T_s=0.05)


@pytest.fixture(scope="module")
def trained(nominal_dataset):
    tr, va = nominal_dataset
    vr = (float(tr.v.min()), float(tr.v.max()))
    ext, _ = train(MsnnModel.initial(0.33, 9, 1, EXTENDED, vr), tr, va, TrainConfig())
    base, _ = train(MsnnModel.initial(0.33, 9, 1, BASELINE, vr), tr, va, TrainConfig())
    return ext, base


# --------------------------------------------------------------------------


def test_c01_fbga_matches_dp_oracle():
    # a draw counts once both methods admit its start speed: the planner reports no
    # infeasibility and the 200-bin lattice has at least one path
    worst, rejected, elapsed = 0.0, 0, 0.0
    for name in PRESET_NAMES:
        g = preset(name)
        rng = np.random.default_rng(1)
        kept = 0
        while kept < 50:
            rho, v0 = random_profiles(rng, 1)[0]
            t0 = time.perf_counter()
            plan = plan_speed(rho, 0.05, v0, g)
            t_dp = math.inf if plan.infeasibility else dp_speed_oracle(rho, 0.05, plan.v[0], g,
                                                                       n_speed_bins=200, max_span=4)
            dt = time.perf_counter() - t0
            if not math.isfinite(t_dp):
                rejected += 1
                continue
            elapsed += dt
            kept += 1
            worst = max(worst, abs(plan.traversal_time() - t_dp) / t_dp)
    verdict(1, worst <= 0.02 and elapsed < 10.0,
            f"max relative gap FB vs DP {100 * worst:.3f}% (<= 2%) over 3 x 50 profiles, runtime {elapsed:.2f} s "
            f"(< 10 s), {rejected} draws without a feasible start skipped")


def test_c02_fbga_feasibility():
    rng = np.random.default_rng(2)
    n_checked, bad = 0, 0
    presets = [preset(n) for n in PRESET_NAMES]
    while n_checked < 100_000:
        g = presets[n_checked % 3]
        rho, v0 = random_profiles(rng, 1)[0]
        plan = plan_speed(rho, 0.05, v0, g, v_terminal_cap=float(rng.uniform(0, 4)))
        if plan.infeasibility:
            continue
        for v, ax, ay in zip(plan.v, plan.ax, plan.ay):
            bad += not contains(g, float(v), float(ax), float(ay), slack=1e-6)
            n_checked += 1
    verdict(2, bad == 0, f"{bad} of {n_checked} planned (v, ax, ay) triples outside the envelope (slack 1e-6)")


def test_c03_closed_forms():
    g = preset("cautious")
    plan = plan_speed(np.zeros(600), 0.05, 0.0, g)
    ref = np.minimum(np.sqrt(2.0 * 1.0 * plan.s), g.v_max)
    e1 = float(np.max(np.abs(plan.v - ref)))
    e2 = 0.0
    for k in (0.2, 0.5, 1.0, 2.0, 4.0):
        p = plan_speed(np.full(40, k), 0.05, math.sqrt(3.0 / k), g)
        e2 = max(e2, float(np.max(np.abs(p.v - math.sqrt(3.0 / k)))))
    verdict(3, e1 <= 1e-3 and e2 <= 1e-3,
            f"straight-from-rest max error {e1:.2e} m/s, constant-corner max error {e2:.2e} m/s (<= 1e-3)")


def _integrate_end(sp):
    th = sp.heading
    x = sp.start.x + quad(lambda s: math.cos(float(th(s))), 0, sp.length, epsabs=1e-13, epsrel=1e-13, limit=200)[0]
    y = sp.start.y + quad(lambda s: math.sin(float(th(s))), 0, sp.length, epsabs=1e-13, epsrel=1e-13, limit=200)[0]
    return x, y, float(th(sp.length)), float(sp.curvature(sp.length))


def test_c04_spiral_contract(racelineB):
    rng = np.random.default_rng(4)
    rl = racelineB
    p = rl.path
    worst, fallbacks, n = 0.0, 0, 1000
    for _ in range(n):
        s = float(rng.uniform(0, p.length))
        v = float(rl.speed_at(s))
        # vehicle near the line: lateral offset, heading error and curvature state of a racing car
        off = float(rng.uniform(-0.25, 0.25))
        psi = float(p.heading_at(s))
        x0, y0 = (float(a) for a in p.position_at(s))
        start = PoseCurv(x0 - off * math.sin(psi), y0 + off * math.cos(psi), psi + rng.uniform(-0.3, 0.3),
                         float(p.curvature_at(s)) + rng.uniform(-0.5, 0.5))
        s_t = s + CL_SCHEDULE(v)
        xt, yt = p.position_at(s_t)
        end = PoseCurv(float(xt), float(yt), float(p.heading_at(s_t)), float(p.curvature_at(s_t)))
        try:
            sp = fit_g2_spiral(start, end)
        except (SpiralFitError, ValueError):
            fallbacks += 1
            continue
        x, y, h, k = _integrate_end(sp)
        worst = max(worst, abs(x - end.x), abs(y - end.y), abs(wrap_angle(h - end.psi)), abs(k - end.rho))
    rate = fallbacks / n
    verdict(4, worst <= 1e-5 and rate < 0.01,
            f"max endpoint residual {worst:.2e} (<= 1e-5), fallback rate {100 * rate:.2f}% (< 1%)")


def test_c05_pp_and_kinematic_formulas():
    rng = np.random.default_rng(5)
    worst = 0.0
    odd = True
    for lam, ld, rho, L in zip(rng.uniform(-1.5, 1.5, 2000), rng.uniform(0.2, 4, 2000), rng.uniform(-3, 3, 2000),
                               rng.uniform(0.1, 1.0, 2000)):
        worst = max(worst, abs(pp_arc_curvature(lam, ld) - 2 * math.sin(lam) / ld) / max(1e-300, abs(2 * math.sin(lam) / ld)))
        worst = max(worst, abs(kinematic_steering(rho, L) - math.atan(rho * L)) / max(1e-300, abs(math.atan(rho * L))))
        odd &= pp_arc_curvature(-lam, ld) == -pp_arc_curvature(lam, ld)
        odd &= kinematic_steering(-rho, L) == -kinematic_steering(rho, L)
    # analytic cases: quarter-turn chord and a 45 degree steering angle
    exact = (pp_arc_curvature(math.pi / 2, 2.0) == 1.0 and pp_arc_curvature(0.0, 1.0) == 0.0
             and abs(kinematic_steering(1.0 / 0.33, 0.33) - math.pi / 4) <= 2 * math.ulp(math.pi / 4))
    verdict(5, worst <= 4 * np.finfo(float).eps and odd and exact,
            f"max relative deviation {worst:.1e} from the closed forms, odd symmetry {odd}, analytic cases {exact}")


def test_c06_gradient_check():
    rng = np.random.default_rng(6)
    worst = 0.0
    for draw in range(100):
        variant = EXTENDED if draw % 2 == 0 else BASELINE
        w, n = int(rng.integers(0, 12)), int(rng.integers(1, 4))
        m = MsnnModel.initial(0.33, w, n, variant, (1.0, 5.0))
        m = m.with_params(rng.normal(0, 0.3, m.n_params))
        v = rng.uniform(0.3, 6, (1, w + 1))
        rho = rng.uniform(-2, 2, (1, w + 1))
        d = SteerDataset(rho, v, v * v * rho, rng.uniform(-3, 3, (1, w + 1)), [0.0])
        g = gradient(m, d)
        th = m.params()
        h = 1e-4  # the output is linear in each single parameter
        for i in range(len(th)):
            e = np.zeros_like(th)
            e[i] = h
            num = (predict(m.with_params(th + e), d)[0] - predict(m.with_params(th - e), d)[0]) / (2 * h)
            scale = max(abs(num), abs(g[i]))
            if scale > 1e-12:
                worst = max(worst, abs(g[i] - num) / scale)
    verdict(6, worst < 1e-5, f"max relative error analytic vs central difference {worst:.2e} (< 1e-5)")


def test_c07_realizable_recovery():
    rng = np.random.default_rng(7)
    truth = MsnnModel(0.33, 9, 1, EXTENDED, (2.5,), np.array([0.012, -0.001, 0.002, 0.0005, 0.0, 0.0]),
                      filters=np.array([[0.0, 0.05, 0.1, 0.2, 0.3, 0.2, 0.1, 0.05, 0.0, 0.0]]))
    M = 1600
    v0 = rng.uniform(1.0, 4.0, M)
    v = np.clip(v0[:, None] + np.cumsum(rng.normal(0, 0.05, (M, 10)), axis=1), 0.5, None)
    # lateral acceleration drawn inside what the envelopes allow, curvature follows from it
    ay = rng.uniform(-5, 5, M)[:, None] + np.cumsum(rng.normal(0, 0.3, (M, 10)), axis=1)
    ax = rng.uniform(-2, 2, (M, 10))
    d = SteerDataset(ay / (v * v), v, ay, ax, np.zeros(M))
    d.delta = predict(truth, d)
    tr, va = d.subset(np.arange(1200)), d.subset(np.arange(1200, M))
    m, hist = train(MsnnModel.initial(0.33, 9, 1, EXTENDED, (2.5, 2.5)), tr, va,
                    TrainConfig(lr=1e-4, batch_size=200, patience=400, epochs=6000))
    rmse = evaluate(m, va).rmse
    verdict(7, rmse < 1e-4, f"validation RMSE {rmse:.2e} rad after {len(hist.val_rmse)} epochs (< 1e-4)")


def test_c08_extended_beats_baseline(nominal_dataset, trained):
    _, va = nominal_dataset
    ext, base = trained
    fe, fb = evaluate(ext, va).fvu, evaluate(base, va).fvu
    verdict(8, fe < fb, f"validation FVU extended {fe:.4e} vs baseline {fb:.4e}")


def test_c09_msnn_smoother_and_tighter(trackA, racelineA, trained):
    model = trained[0]
    lines, ok = [], True
    for c in ("PP", "CL"):
        a = compute_metrics(run_closed_loop(racelineA, trackA, StackConfig(controller=c), laps=2), racelineA)
        b = compute_metrics(run_closed_loop(racelineA, trackA, StackConfig(controller=c, msnn=model), laps=2),
                            racelineA)
        good = (not b.crash) and b.mean_lat_err < a.mean_lat_err and b.rms_steer_rate < a.rms_steer_rate
        ok &= good
        lines.append(f"{c}: mean lat {a.mean_lat_err:.4f} -> {b.mean_lat_err:.4f} m, "
                     f"RMS steer rate {a.rms_steer_rate:.4f} -> {b.rms_steer_rate:.4f} rad/s "
                     f"({'ok' if good else 'not both lower'})")
    verdict(9, ok, "; ".join(lines))


def test_c10_replanning_enables_extended(trackB, trained):
    model = trained[0]
    nom, ext = preset("nominal"), preset("extended")
    rl_nom, rl_ext = generate_raceline(trackB, nom), generate_raceline(trackB, ext)

    def run(rl, g, c, fb):
        tr = run_closed_loop(rl, trackB, StackConfig(controller=c, msnn=model, fbga=fb, ggv=g), laps=2)
        return compute_metrics(tr, rl)

    def lt(m):
        return "crash" if m.crash else f"{m.lap_time:.3f} s"

    ok_a = ok_b = ok_c = True
    parts = []
    for c in ("PP", "CL"):
        en, ef = run(rl_ext, ext, c, False), run(rl_ext, ext, c, True)
        nn, nf = run(rl_nom, nom, c, False), run(rl_nom, nom, c, True)
        a = en.crash
        b = (not ef.crash) and (not nf.crash) and ef.lap_time < nf.lap_time
        cc = (not nf.crash) and (not nn.crash) and nf.lap_time < nn.lap_time
        ok_a &= a
        ok_b &= b
        ok_c &= cc
        parts.append(f"{c}+MSNN ext/noFBGA {lt(en)}, ext/FBGA {lt(ef)}, nom/noFBGA {lt(nn)}, nom/FBGA {lt(nf)}")
    verdict(10, ok_a and ok_b and ok_c, f"(a) {ok_a} (b) {ok_b} (c) {ok_c}; " + "; ".join(parts))


def test_c11_implied_delay(trained):
    model = trained[0]
    plant = PlantConfig()
    eff = plant.steer_delay + plant.steer_tau
    rep = interpret_weights(model)
    d = rep.implied_delay[0]
    verdict(11, abs(d - eff) <= model.T_s + 1e-9,
            f"implied delay {d:.2f} s (peak tap {rep.peak_index[0]}) vs effective plant delay {eff:.2f} s (+-1 sample)")


def test_c12_realtime_budget(trackB, trained):
    model = trained[0]
    g = preset("nominal")
    rl = generate_raceline(trackB, g)
    tr = run_closed_loop(rl, trackB, StackConfig(controller="CL", msnn=model, fbga=True, ggv=g), laps=1)
    tick = sum(tr[c] for c in CPU_COLUMNS)
    mean_ms = float(np.mean(tick)) / 1e3
    p50, p99, mx = (float(np.percentile(tick, q)) / 1e3 for q in (50, 99, 100))
    hist, edges = np.histogram(tick / 1e3, bins=[0, 0.5, 1, 2, 4, 6.7, np.inf])
    dist = ", ".join(f"[{a:g},{b:g}) ms: {h}" for a, b, h in zip(edges[:-1], edges[1:], hist))
    verdict(12, mean_ms < 6.7, f"CL+MSNN+FBGA mean tick {mean_ms:.3f} ms (p50 {p50:.3f}, p99 {p99:.3f}, "
                               f"max {mx:.3f}) < 6.7 ms; histogram {dist}")


def test_c13_ablate_is_deterministic(tmp_path):
    import os

    here = os.path.dirname(os.path.abspath(__file__))
    cfg = {"track": "B", "presets": ["cautious", "nominal"], "controllers": ["PP", "CL"], "msnn": [False, True],
           "fbga": [False, True], "model": os.path.join(here, "..", "configs", "msnn_nominal.json"), "laps": 1,
           "seed": 3, "max_time": 30.0}
    (tmp_path / "grid.json").write_text(json.dumps(cfg))
    outs = []
    for k, jobs in ((1, "1"), (2, "4")):
        out = tmp_path / f"run{k}"
        assert cli_main(["ablate", "--config", str(tmp_path / "grid.json"), "--out", str(out), "--jobs", jobs]) == 0
        outs.append((out / "summary.csv").read_bytes())
    same = outs[0] == outs[1]
    verdict(13, same, f"two ablate runs (serial and 4 workers, 16 cells) give "
                      f"{'byte-identical' if same else 'different'} summary tables ({len(outs[0])} bytes)")
