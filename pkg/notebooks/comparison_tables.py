"""Run the two comparison grids and print their summary tables.

Track A, cautious envelope, no replanning: does the MS-NN steering tighten
tracking and calm the steering wheel for PP and CL?
Track B, all three envelopes, with and without replanning: which stacks
survive the extended envelope and how fast are they?

Both grids use the shipped nominal-data model in configs/. Run from the
repository root:  python notebooks/comparison_tables.py [out_dir] [jobs]
"""

import os
import sys
import time

from racebench.bench import load_config, run_ablation, write_ablation

out = sys.argv[1] if len(sys.argv) > 1 else "comparison"
jobs = int(sys.argv[2]) if len(sys.argv) > 2 else 4

for name in ("ablation_track_a_cautious", "ablation_track_b"):
    t0 = time.time()
    cfg = load_config(os.path.join("configs", f"{name}.json"))
    results = run_ablation(cfg, jobs=jobs)
    d = os.path.join(out, name)
    write_ablation(results, d, track_name=cfg.track)
    print(f"== {name} ({len(results)} cells, {time.time() - t0:.0f} s)")
    with open(os.path.join(d, "summary.csv")) as f:
        print(f.read())
