"""
Source and target domains
=========================

Simulate one anechoic cyst in each domain with the small profile and compare
delay-and-sum with the generalized coherence factor. Figures go to
``demos/out``.

Run with ``python demos/two_domains.py``.
"""

# %%
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from dabeam import pipeline
from dabeam.beamformers import envelope_logcompress
from dabeam.config import small_config
from dabeam.evaluation import cnr, cr

OUT = Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)

run = small_config()
records = {r.split: r for r in pipeline.frame_records(run)}
grid = pipeline.image_grid(run)
print(f"{run.array.num_elements} elements, focus {run.focus_depth * 1e3:.0f} mm, grid {grid.shape}")

# %%
# Channel data
# ------------
#
# The target frame carries a fixed aberrating delay screen, per-element gain
# ripple and clutter on top of the same kind of speckle.

frames = {dom: pipeline.simulate_record(run, records[f"{dom}_test"]) for dom in ("source", "target")}
fig, axes = plt.subplots(1, 2, figsize=(8, 4), sharey=True)
for ax, (dom, fr) in zip(axes, frames.items()):
    s = fr.samples / np.abs(fr.samples).max()
    ax.imshow(s, aspect="auto", cmap="gray", vmin=-0.3, vmax=0.3)
    ax.set_title(dom)
    ax.set_xlabel("element")
axes[0].set_ylabel("sample")
fig.tight_layout()
fig.savefig(OUT / "channel_data.png", dpi=110)

# %%
# Aperture view at the focus
# --------------------------
#
# Unwrapped phase across the receive aperture at one pixel below the cyst.

tensors = {dom: pipeline.focus_frame(run, fr, grid) for dom, fr in frames.items()}
iz = np.argmin(np.abs(grid.z - (run.focus_depth + 3.5e-3)))
ix = len(grid.x) // 2
fig, ax = plt.subplots(figsize=(5, 3))
for dom, t in tensors.items():
    ax.plot(np.unwrap(np.angle(t.values[iz, ix])), marker="o", label=dom)
ax.set_xlabel("element")
ax.set_ylabel("phase (rad)")
ax.legend()
fig.tight_layout()
fig.savefig(OUT / "aperture_phase.png", dpi=110)

# %%
# DAS and GCF images
# ------------------

fig, axes = plt.subplots(2, 2, figsize=(7, 7))
extent = [grid.x[0] * 1e3, grid.x[-1] * 1e3, grid.z[-1] * 1e3, grid.z[0] * 1e3]
for row, dom in zip(axes, ("source", "target")):
    roi = pipeline.frame_roi(records[f"{dom}_test"])
    for ax, method in zip(row, ("das", "gcf")):
        env = np.abs(pipeline.beamform(run, tensors[dom], method))
        img = envelope_logcompress(env, 60, grid).intensity_db
        ax.imshow(img, cmap="gray", vmin=-60, vmax=0, extent=extent)
        ax.set_xlabel("lateral (mm)")
        ax.set_title(f"{dom} {method.upper()}: CNR {cnr(env, grid, roi):.1f} dB, CR {cr(env, grid, roi):.1f} dB",
                     fontsize=8)
for ax in axes[:, 0]:
    ax.set_ylabel("depth (mm)")
fig.tight_layout()
fig.savefig(OUT / "das_gcf.png", dpi=110)
print("figures written to", OUT)
