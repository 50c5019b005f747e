"""Gradient reversal, domain discriminators and the adversarial DA losses.

The discriminators learn to tell source (d=0) from target (d=1) while the
gradient reversal layer turns the same loss into a confusion objective for
the detector, so one optimizer step updates both sides.
"""

from __future__ import annotations

import copy
import warnings
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .detector import (FEATURE_CHANNELS, INSTANCE_DIM, Detector, batch_tensor,
                       detection_loss_from_features)

PROB_EPS = 1e-7
FOCAL_GAMMA = 2.0
LOSS_KINDS = ("focal", "cross_entropy")


class NoInstancesWarning(UserWarning):
    """The batch produced no proposals, so the instance loss is 0."""


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return -ctx.lam * grad, None


def grl(x: torch.Tensor, lam: float = 1.0) -> torch.Tensor:
    """Identity forward; multiplies the incoming gradient by ``-lam``."""
    return _GradReverse.apply(x, float(lam))


def binary_domain_loss(logit, d, kind: str = "focal", gamma: float = FOCAL_GAMMA) -> torch.Tensor:
    """Elementwise binary domain loss on logits (no reduction).

    ``focal`` scales cross-entropy by ``(1 - p_t) ** gamma`` where ``p_t``
    is the probability assigned to the true domain.
    """
    if kind not in LOSS_KINDS:
        raise ValueError(f"kind must be one of {LOSS_KINDS}")
    logit = torch.as_tensor(logit, dtype=torch.get_default_dtype()) if not torch.is_tensor(logit) else logit
    d = torch.as_tensor(d, dtype=logit.dtype)
    p = torch.sigmoid(logit).clamp(PROB_EPS, 1 - PROB_EPS)
    p_t = d * p + (1 - d) * (1 - p)
    ce = -torch.log(p_t)
    if kind == "cross_entropy":
        return ce
    return (1 - p_t) ** gamma * ce


class ImageDiscriminator(nn.Module):
    def __init__(self, in_channels: int = FEATURE_CHANNELS):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, 32, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(32, 16, 3, stride=2, padding=1)
        self.fc = nn.Linear(16, 1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.conv2(F.relu(self.conv1(z))))
        return self.fc(h.mean(dim=(2, 3)))[:, 0]


class InstanceDiscriminator(nn.Module):
    def __init__(self, in_features: int = INSTANCE_DIM, hidden: int = 64):
        super().__init__()
        self.fc1 = nn.Linear(in_features, hidden)
        self.fc2 = nn.Linear(hidden, 1)

    def forward(self, p: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.relu(self.fc1(p)))[:, 0]


class DiscriminatorSet(nn.Module):
    def __init__(self, grl_lambda: float = 1.0, seed: int = 0):
        super().__init__()
        if grl_lambda <= 0:
            raise ValueError("grl_lambda must be positive")
        self.img = ImageDiscriminator()
        self.inst = InstanceDiscriminator()
        self.grl_lambda = float(grl_lambda)
        g = torch.Generator().manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                std = (2.0 / m.weight[0].numel()) ** 0.5
                with torch.no_grad():
                    m.weight.copy_(torch.randn(m.weight.shape, generator=g) * std)
                    m.bias.zero_()

    def describe(self, num_rois: int = 64):
        from .evaluation.complexity import LayerSpec
        return [LayerSpec.conv(self.img.conv1), LayerSpec.conv(self.img.conv2),
                LayerSpec.linear(self.img.fc), LayerSpec.linear(self.inst.fc1, rows=num_rois),
                LayerSpec.linear(self.inst.fc2, rows=num_rois)]


# -- composed losses ---------------------------------------------------------

def domain_losses(det: Detector, disc: DiscriminatorSet, z: torch.Tensor, obj, deltas,
                  d: Sequence[int], kind: str = "focal", reverse: bool = True,
                  lam: float | None = None):
    """Per-image image-level losses and per-instance losses for a batch.

    Returns ``(img_losses (B,), inst_losses (N,), inst_owner (N,))`` where
    ``inst_owner`` maps each instance to its image index.
    """
    lam = disc.grl_lambda if lam is None else lam
    zr = grl(z, lam) if reverse else z
    d_img = torch.as_tensor(list(d), dtype=z.dtype)
    img_losses = binary_domain_loss(disc.img(zr), d_img, kind)
    feats, owner = [], []
    for i in range(z.shape[0]):
        props, _ = det.proposals(obj[i], deltas[i], "train")
        if props.shape[0]:
            feats.append(det.roi_features(zr[i], props))
            owner += [i] * props.shape[0]
    owner_t = torch.as_tensor(owner, dtype=torch.long)
    if not feats:
        return img_losses, z.new_zeros((0,)), owner_t
    logits = disc.inst(torch.cat(feats))
    return img_losses, binary_domain_loss(logits, d_img[owner_t], kind), owner_t


def _mean_or_zero(x: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    if x.numel() == 0:
        warnings.warn("no proposals in batch; instance loss is 0", NoInstancesWarning, stacklevel=3)
        return like.sum() * 0
    return x.mean()


def _split_batch(batch):
    images = [b[0] for b in batch]
    labels = [int(b[1]) for b in batch]
    if not images:
        raise ValueError("empty batch")
    if any(v not in (0, 1) for v in labels):
        raise ValueError("domain labels must be 0 (source) or 1 (target)")
    return images, labels


def _forward(det: Detector, images):
    z = det.features(batch_tensor(images, det.rpn_conv.weight.dtype))
    obj, deltas = det.rpn_head(z)
    return z, obj, deltas


def image_da_loss(det: Detector, disc: DiscriminatorSet, batch, kind: str = "focal") -> torch.Tensor:
    """Mean image-level domain loss over ``[(image, d), ...]``."""
    images, labels = _split_batch(batch)
    z = det.features(batch_tensor(images, det.rpn_conv.weight.dtype))
    d_img = torch.as_tensor(labels, dtype=z.dtype)
    return binary_domain_loss(disc.img(grl(z, disc.grl_lambda)), d_img, kind).mean()


def instance_da_loss(det: Detector, disc: DiscriminatorSet, batch, kind: str = "focal") -> torch.Tensor:
    """Mean instance-level domain loss over all proposals in the batch."""
    images, labels = _split_batch(batch)
    z, obj, deltas = _forward(det, images)
    _, inst, _ = domain_losses(det, disc, z, obj, deltas, labels, kind)
    return _mean_or_zero(inst, z)


def total_da_loss(det: Detector, disc: DiscriminatorSet, source_batch, target_batch,
                  lam: float, kind: str = "focal", rng: np.random.Generator | None = None) -> torch.Tensor:
    """``lam * (image + instance DA loss) + supervised loss on the source``.

    ``source_batch`` holds ``(image, annotations)``, ``target_batch`` images.
    """
    src_imgs = [im for im, _ in source_batch]
    images = src_imgs + list(target_batch)
    labels = [0] * len(src_imgs) + [1] * len(target_batch)
    z, obj, deltas = _forward(det, images)
    sup = sum(detection_loss_from_features(det, z[i], obj[i], deltas[i], gts, rng)
              for i, (_, gts) in enumerate(source_batch)) / len(source_batch)
    if lam == 0:
        return sup
    img, inst, _ = domain_losses(det, disc, z, obj, deltas, labels, kind)
    return lam * (img.mean() + _mean_or_zero(inst, z)) + sup


@torch.no_grad()
def discriminator_probabilities(det: Detector, disc: DiscriminatorSet, images, chunk: int = 64) -> np.ndarray:
    """Image-discriminator target probability for each image (or raw tensor batch)."""
    out = []
    for i in range(0, len(images), chunk):
        part = images[i:i + chunk]
        x = part if torch.is_tensor(part) else batch_tensor(part, det.rpn_conv.weight.dtype)
        out.append(torch.sigmoid(disc.img(det.features(x))).double().numpy())
    return np.concatenate(out) if out else np.zeros(0)


def discriminator_accuracy(det: Detector, disc: DiscriminatorSet, source_images, target_images) -> float:
    ps = discriminator_probabilities(det, disc, source_images)
    pt = discriminator_probabilities(det, disc, target_images)
    correct = np.sum(ps < 0.5) + np.sum(pt >= 0.5)
    return float(correct) / (len(ps) + len(pt))


def stda_adapt(det: Detector, disc: DiscriminatorSet, source, target, schedule,
               lam: float = 1.0, kind: str = "focal", seed: int = 0, access_log=None,
               step: int = 1):
    """Single-target adversarial adaptation; returns adapted copies.

    ``schedule`` is a :class:`imtda.training.Schedule`.
    """
    from .training import DAPhase, run_phase

    if target.labeled:
        raise ValueError("stda_adapt expects an unlabeled target domain")
    det, disc = copy.deepcopy(det), copy.deepcopy(disc)
    phase = DAPhase(det=det, disc=disc, source=source, targets=[target], lam=lam, kind=kind,
                    seed=seed, step=step, access_log=access_log)
    run_phase(phase, schedule)
    return det, disc
