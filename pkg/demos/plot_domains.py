"""
Synthetic source and target domains
===================================

Render a few images from the labeled source domain and the two default
unlabeled targets, with the source boxes drawn on top.
"""

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
from matplotlib.patches import Rectangle

from imtda.synth_domains import DomainSpec, build_domain_dataset

# the scenes are shared; only the appearance transform differs per domain
domains = [build_domain_dataset(DomainSpec(kind, seed=7), n_train=4, n_eval=1)
           for kind in ("source", "fog", "noise")]
source_labels = domains[0].reveal_train_labels()

fig, axes = plt.subplots(3, 4, figsize=(8, 6))
for row, ds in zip(axes, domains):
    for k, ax in enumerate(row):
        ax.imshow(ds.train_images[k].pixels.transpose(1, 2, 0).clip(0, 1))
        ax.set_xticks([])
        ax.set_yticks([])
    row[0].set_ylabel(ds.name)

# ground truth exists for the source only
for ax, (_, boxes) in zip(axes[0], source_labels):
    for b in boxes:
        ax.add_patch(Rectangle((b.x, b.y), b.w, b.h, fill=False, color="yellow", lw=1))

fig.tight_layout()
fig.savefig("domains.png", dpi=100)
print("wrote domains.png")
