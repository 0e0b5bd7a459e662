"""Derive the nominal and extended g-g-v presets from the cautious one.

1. grow the cautious envelope with kinematic Pure Pursuit tracking the
   raceline speed profile until the closed loop fails: nominal;
2. log 24 s of Pure Pursuit on the nominal raceline of track B and fit the
   extended MS-NN to it;
3. grow the nominal envelope again with PP+MS-NN and online replanning:
   extended.

The presets, the model and the search logs are written to ``out_dir``.
Run from the repository root:  python notebooks/calibrate_presets.py [out_dir]
"""

import os
import sys
import time

from racebench.bench import collect_run, expand_ggv, expansion_log_table, extract_dataset
from racebench.ggv import preset, save_ggv
from racebench.msnn import MsnnModel, TrainConfig, evaluate, save_model, train
from racebench.raceline import generate_raceline
from racebench.sim import PlantConfig, StackConfig
from racebench.tracks import track_b

out = sys.argv[1] if len(sys.argv) > 1 else "calibration"
os.makedirs(out, exist_ok=True)
plant = PlantConfig()
track = track_b()
cautious = preset("cautious")
t0 = time.time()


def expand(base, stack, name):
    g, log = expand_ggv(base, track, stack, step=0.1, plant=plant, name=name)
    save_ggv(g, os.path.join(out, f"{name}.json"))
    with open(os.path.join(out, f"{name}_search.csv"), "w") as f:
        f.write(expansion_log_table(log))
    print(name, g.ay_max, g.ax_acc_max, f"({time.time() - t0:.0f} s)")
    print(expansion_log_table(log))
    return g


nominal = expand(cautious, StackConfig(controller="PP"), "nominal")

rl = generate_raceline(track, nominal)
trace = collect_run(track, rl, StackConfig(controller="PP"), 24.0, plant)
train_set, val_set = extract_dataset(trace)
init = MsnnModel.initial(plant.L, 9, 1, "extended", (float(train_set.v.min()), float(train_set.v.max())))
model, hist = train(init, train_set, val_set, TrainConfig())
print(f"nominal-data model: {evaluate(model, val_set)}  ({time.time() - t0:.0f} s)")
save_model(model, os.path.join(out, "msnn_nominal.json"))

expand(nominal, StackConfig(controller="PP", msnn=model, fbga=True, ggv=nominal), "extended")
