"""A short Stage-1 run, then guided sampling and evaluation on held-out contexts.

Pass a step count as the first argument; the acceptance suite uses 2000.
"""
import sys
import time

import numpy as np

from tavr import pipeline as pl
from tavr.config import preset_config

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 200
setup = pl.setup_from(preset_config("toy", stage1__steps=steps))
model = pl.new_model(setup)
t0 = time.time()
pl.run_stage(setup, 1, model, progress=lambda r: r["step"] % 50 == 0 and print(f"step {r['step']:5d}  loss {r['loss']:.4f}"))
print(f"trained {steps} steps in {time.time() - t0:.0f}s")

rows = pl.toy_pipeline_metrics(model, setup, pl.held_out(setup, "same_scene", 8))
print("mouth-audio rho   ", round(float(np.mean([r["mouth_corr"] for r in rows])), 3))
print("identity margin   ", round(float(np.mean([r["id_margin"] for r in rows])), 3))
