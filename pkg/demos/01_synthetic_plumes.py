"""Generate a few synthetic injection cases and look at how the plume grows.

Run: python demos/01_synthetic_plumes.py
"""
import numpy as np

from plumeflow.data import GridSpec, build_dataset

grid = GridSpec(height=32, width=64, frames=17)
ds = build_dataset(grid, n_cases=6, seed=0)
print("split:", ds.split)
print("times:", np.round(grid.frame_times(), 3))

# saturation front: rightmost column with any CO2 at each frame
for case in range(3):
    sat = ds.sat[case, :, 0]
    front = [int(np.max(np.nonzero(f.max(axis=0) > 0.05)[0], initial=-1)) for f in sat]
    print(f"case {case}: front column per frame {front}")

# pressure is largest near the well and decays outward
dp = ds.dp[0, -1, 0]
print("pressure build-up along the middle row (every 8th column):", np.round(dp[16, ::8], 3))

sat_n, dp_n = ds.normalized()
print("normalized ranges (stats fit on training cases): sat [%.2f, %.2f], dp [%.2f, %.2f]" % (sat_n.min(), sat_n.max(), dp_n.min(), dp_n.max()))
