"""
Desk-scale comparison
=====================

Train the source-only network and the domain-adaptive network on the small
profile, then compare them with DAS and GCF on held-out source and target
frames. Takes a few minutes on one CPU core.

``python demos/desk_scale.py [seed]``
"""

# %%
import sys
import time

from dabeam import pipeline
from dabeam.config import small_config

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
run = small_config()

t0 = time.time()
exp = pipeline.prepare(run)
print(f"prepared {len(exp.records)} frames in {time.time() - t0:.0f}s: "
      f"{len(exp.source)} source pairs, {len(exp.target)} target samples, d={exp.source.dim}")

# %%
# Training
# --------
#
# Both networks share the seed, batch order and regressor initialization, and
# both keep the snapshot with the best validation CNR on the target frames.

t0 = time.time()
out = pipeline.run_seed(exp, seed)
print(f"trained in {time.time() - t0:.0f}s; best steps {out['best_step']}")

# %%
# Results
# -------

for domain, methods in out["metrics"].items():
    print(f"\n{domain}")
    print(f"{'method':8s} {'CNR (dB)':>16s} {'CR (dB)':>16s}")
    for m, v in methods.items():
        c, r = v["cnr"], v["cr"]
        print(f"{m:8s} {c['mean']:8.2f} +- {c['std']:4.2f} {r['mean']:8.2f} +- {r['std']:4.2f}")

print()
for name, ok in out["checks"].items():
    print(f"{name:20s} {'yes' if ok else 'no'}")
