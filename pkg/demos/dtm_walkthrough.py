"""
Training a domain transfer module
=================================

Adapt a detector from source to fog, then fit a small 1x1-conv module that
makes source images look like "target" to the frozen discriminators.
Iteration counts are tiny so the script finishes in about a minute.
"""

import torch

from imtda.dtm import DTM, mean_target_probability, train_dtm
from imtda.evaluation.complexity import model_complexity
from imtda.evaluation.diagnostics import map_over_dataset
from imtda.synth_domains import DomainSpec, build_domain_dataset
from imtda.trainer import HyperParams, pretrain_source, uft_step

torch.set_num_threads(1)
source = build_domain_dataset(DomainSpec("source", seed=1), n_train=60, n_eval=30)
fog = build_domain_dataset(DomainSpec("fog", seed=2), n_train=60, n_eval=30)
hyper = HyperParams(pretrain_iters=600, iters_per_phase=300, dtm_iters=150)

# supervised source model, then one step of adversarial adaptation
det, disc = pretrain_source(source, hyper)
print("fog mAP before adaptation: %.3f" % map_over_dataset(det, fog).mAP)
det, disc = uft_step(det, disc, source, fog, hyper, step=1)
print("fog mAP after adaptation:  %.3f" % map_over_dataset(det, fog).mAP)

# the module only sees source images; detector and discriminators stay frozen
g = train_dtm(det, disc, source, iterations=hyper.dtm_iters, lr=hyper.dtm_lr)
held_out = [im for im, _ in source.eval]
before = mean_target_probability(det, disc, held_out)
after = mean_target_probability(det, disc, held_out, g)
print("discriminator target probability on source: %.3f, on g(source): %.3f" % (before, after))

# its size at the resolution used for the cost figures
rep = model_complexity(DTM(), (3, 1200, 600))
print("DTM parameters: %d, MACs at 3x1200x600: %d" % (rep.params, rep.macs))
