"""
Forgetting across two targets
=============================

Run plain sequential fine-tuning and the DTM-regularised strategy over
source -> fog -> noise and compare how much fog accuracy survives the
second step. Sizes are cut down; the acceptance suite uses full sizes.
"""

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import torch

from imtda.synth_domains import DomainSpec, build_domain_dataset
from imtda.trainer import HyperParams, run_strategy

torch.set_num_threads(1)
source = build_domain_dataset(DomainSpec("source", seed=1), n_train=60, n_eval=30)
targets = [build_domain_dataset(DomainSpec(k, seed=s), n_train=60, n_eval=30)
           for k, s in (("fog", 2), ("noise", 3))]
hyper = HyperParams(pretrain_iters=600, iters_per_phase=300, dtm_iters=150)

# a shared cache lets both strategies reuse pretraining and the first step
cache = {}
states = {s: run_strategy(s, source, targets, hyper, cache=cache) for s in ("uft", "mtda_dtm")}

for name, state in states.items():
    print(name)
    for row in state.map_table():
        print("  step %d  fog %.3f  noise %.3f" % (row["step"], row["fog"], row["noise"]))
    print("  forgetting on fog: %.3f" % state.forgetting()["fog"])

fig, ax = plt.subplots(figsize=(4, 3))
for name, state in states.items():
    rows = state.map_table()
    ax.plot([r["step"] for r in rows], [r["fog"] for r in rows], marker="o", label=name)
ax.set_xlabel("adaptation step")
ax.set_ylabel("fog mAP@0.5")
ax.legend()
fig.tight_layout()
fig.savefig("forgetting.png", dpi=100)
print("wrote forgetting.png")
