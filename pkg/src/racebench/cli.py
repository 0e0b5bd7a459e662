"""Command line entry point: ``racebench <subcommand> [options]``.

Every subcommand reads an optional JSON config (``--config``); flags given on
the command line override the file. Failures print one JSON line
``{"error": ..., "type": ...}`` on stderr and exit with status 1.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import __version__


def _load_json(path):
    if not path:
        return {}, "."
    with open(path) as f:
        return json.load(f), os.path.dirname(os.path.abspath(path))


def _resolve(base, p):
    return p if p is None or os.path.isabs(p) else os.path.join(base, p)


def _out_dir(args, default):
    out = args.out or default
    os.makedirs(out, exist_ok=True)
    return out


def _plant(cfg):
    from .sim import PlantConfig

    return PlantConfig(**cfg.get("plant", {}))


def _is_trace(path) -> bool:
    with open(path) as f:
        for line in f:
            if not line.startswith("#"):
                return "delta_act" in line.split(",")
    return False


def cmd_raceline(args):
    from .bench import load_preset, load_track
    from .raceline import generate_raceline, write_raceline

    cfg, base = _load_json(args.config)
    track = load_track(args.track or cfg.get("track", "B"), base)
    ggv = load_preset(args.preset or cfg.get("preset", "cautious"), base)
    rl = generate_raceline(track, ggv, **({"margin": cfg["margin"]} if "margin" in cfg else {}))
    out = _out_dir(args, ".")
    path = os.path.join(out, "raceline.csv")
    write_raceline(rl, path)
    print(json.dumps({"raceline": path, "length_m": round(rl.length, 4), "lap_time_s": round(rl.lap_time(), 4)}))


def cmd_train(args):
    from .bench import extract_dataset
    from .msnn import (MsnnModel, TrainConfig, aic, evaluate, interpret_weights, read_dataset, save_model,
                       train, write_dataset)
    from .sim import read_trace

    cfg, base = _load_json(args.config)
    w = int(cfg.get("w", 9))
    T_s = float(cfg.get("T_s", 0.05))
    src = args.input or cfg.get("trace") or cfg.get("dataset")
    if not src:
        raise ValueError("train needs a trace or dataset file (positional argument or config key)")
    src = args.input or _resolve(base, src)
    out = _out_dir(args, ".")
    if _is_trace(src):
        train_set, val_set = extract_dataset(read_trace(src), w, T_s)
        write_dataset([train_set, val_set], os.path.join(out, "dataset.csv"))
    else:
        splits = read_dataset(src)
        if "train" not in splits or "validation" not in splits:
            raise ValueError("dataset file needs both train and validation rows")
        train_set, val_set = splits["train"], splits["validation"]
    tc = TrainConfig(
        lr=float(cfg.get("lr", 1e-4)), batch_size=int(cfg.get("batch_size", 200)),
        epochs=int(cfg.get("epochs", 6000)), patience=int(cfg.get("patience", 400)),
        seed=int(args.seed if args.seed is not None else cfg.get("seed", 0)),
    )
    L = float(cfg.get("L", _plant(cfg).L))
    init = MsnnModel.initial(L, train_set.w, int(cfg.get("n", 1)), cfg.get("variant", "extended"),
                             (float(train_set.v.min()), float(train_set.v.max())), T_s=train_set.T_s)
    model, hist = train(init, train_set, val_set, tc)
    path = os.path.join(out, "model.json")
    save_model(model, path)
    ev = evaluate(model, val_set)
    rep = interpret_weights(model)
    print(json.dumps({"model": path, "val_rmse": ev.rmse, "val_fvu": ev.fvu, "aic": aic(model, train_set),
                      "best_epoch": hist.best_epoch, "implied_delay_s": list(rep.implied_delay)}))


def _race_stack(cfg, base):
    from .bench import load_preset
    from .msnn import load_model
    from .sim import StackConfig

    ggv = load_preset(cfg.get("preset", "cautious"), base)
    model = load_model(_resolve(base, cfg["msnn"])) if cfg.get("msnn") else None
    return StackConfig(controller=cfg.get("controller", "PP"), msnn=model, fbga=bool(cfg.get("fbga", False)),
                       ggv=ggv), ggv


def cmd_race(args):
    from .bench import compute_metrics, load_track
    from .raceline import generate_raceline, read_raceline
    from .sim import run_closed_loop, write_trace

    cfg, base = _load_json(args.config)
    track = load_track(cfg.get("track", "B"), base)
    stack, ggv = _race_stack(cfg, base)
    rl = read_raceline(_resolve(base, cfg["raceline"])) if cfg.get("raceline") else generate_raceline(track, ggv)
    laps = args.laps or int(cfg.get("laps", 1))
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    plant = _plant(cfg)
    tr = run_closed_loop(rl, track, stack, plant, laps=laps, seed=seed,
                         max_time=float(cfg.get("max_time", 60.0)))
    out = _out_dir(args, ".")
    path = os.path.join(out, "run.trace.csv")
    write_trace(tr, path)
    m = compute_metrics(tr, rl, stack.label, tick_hz=plant.tick_hz)
    print(json.dumps({"trace": path, "crash": m.crash, "lap_times_s": list(m.lap_times),
                      "mean_lat_err_m": m.mean_lat_err, "rms_steer_rate_radps": m.rms_steer_rate}))


def cmd_ablate(args):
    from .bench import AblationConfig, load_config, run_ablation, write_ablation
    from dataclasses import replace

    cfg = load_config(args.config) if args.config else AblationConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.laps:
        cfg = replace(cfg, laps=args.laps)
    results = run_ablation(cfg, jobs=args.jobs or 1)
    out = _out_dir(args, "ablation")
    write_ablation(results, out, track_name=cfg.track)
    crashed = [r.cell.label for r in results if r.metrics.crash]
    print(json.dumps({"summary": os.path.join(out, "summary.csv"), "cells": len(results), "crashed": crashed}))


def cmd_expand(args):
    from .bench import Feasibility, expand_ggv, expansion_log_table, load_preset, load_track
    from .ggv import save_ggv

    cfg, base = _load_json(args.config)
    track = load_track(cfg.get("track", "B"), base)
    stack, _ = _race_stack(cfg, base)
    base_ggv = load_preset(cfg.get("base", cfg.get("preset", "cautious")), base)
    feas = Feasibility(**cfg.get("feasibility", {}))
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    g, log = expand_ggv(base_ggv, track, stack, step=float(cfg.get("step", 0.1)), feasibility=feas,
                        plant=_plant(cfg), laps=args.laps or int(cfg.get("laps", 2)), seed=seed,
                        name=cfg.get("name"))
    out = _out_dir(args, ".")
    path = os.path.join(out, f"{g.name}.json")
    save_ggv(g, path)
    with open(os.path.join(out, f"{g.name}_search.csv"), "w") as f:
        f.write(expansion_log_table(log))
    print(json.dumps({"preset": path, "factor": max(r.factor for r in log if r.feasible), "trials": len(log)}))


def cmd_report(args):
    from .bench import report
    from .raceline import read_raceline

    cfg, base = _load_json(args.config)
    traces = args.traces or [_resolve(base, p) for p in cfg.get("traces", [])]
    if not traces:
        raise ValueError("report needs at least one trace file")
    rl_file = cfg.get("raceline")
    rl = read_raceline(_resolve(base, rl_file)) if rl_file else None
    files = report(traces, _out_dir(args, "report"), raceline=rl)
    print(json.dumps({"written": files}))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="racebench", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--laps", type=int, default=None)
        sp.add_argument("--jobs", type=int, default=None)
        return sp

    sp = common(sub.add_parser("raceline", help="track -> raceline file"))
    sp.add_argument("--track", help="A, B or a track file")
    sp.add_argument("--preset", help="g-g-v preset name or file")
    sp.set_defaults(func=cmd_raceline)

    sp = common(sub.add_parser("train", help="trace or dataset -> MS-NN model file"))
    sp.add_argument("input", nargs="?", help="*.trace.csv run trace or a dataset file")
    sp.set_defaults(func=cmd_train)

    common(sub.add_parser("race", help="single closed-loop run")).set_defaults(func=cmd_race)
    common(sub.add_parser("ablate", help="run an ablation grid")).set_defaults(func=cmd_ablate)
    common(sub.add_parser("expand-ggv", help="grow a g-g-v envelope until the loop fails")).set_defaults(
        func=cmd_expand)

    sp = common(sub.add_parser("report", help="traces -> tables and static plots"))
    sp.add_argument("traces", nargs="*")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except Exception as e:  # noqa: BLE001 - every failure becomes one machine-readable line
        print(json.dumps({"error": str(e), "type": type(e).__name__, "command": args.command}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
