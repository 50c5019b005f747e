"""SGD phase runner, learning-rate schedules and dataset access logging.

A *phase* object owns the models being optimised and knows how to produce
the scalar objective for iteration ``it``; :func:`run_phase` drives it with
momentum SGD under a :class:`Schedule`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .adversarial import DiscriminatorSet, domain_losses
from .detector import Detector, batch_tensor, detection_loss_from_features
from .seeding import numpy_rng


class DivergenceError(RuntimeError):
    """A training loss became non-finite."""


@dataclass(frozen=True)
class Schedule:
    iterations: int
    lr: float
    lr_decayed: float
    decay_at: int  # first iteration using lr_decayed
    momentum: float = 0.9

    def lr_at(self, it: int) -> float:
        return self.lr if it < self.decay_at else self.lr_decayed

    def plan(self) -> list[tuple[int, int, float]]:
        """``[(start, stop, lr), ...]`` segments covering the phase."""
        segs = []
        if self.decay_at > 0:
            segs.append((0, min(self.decay_at, self.iterations), self.lr))
        if self.decay_at < self.iterations:
            segs.append((self.decay_at, self.iterations, self.lr_decayed))
        return segs


@dataclass
class AccessRecord:
    step: int
    domain: str
    split: str
    index: int
    purpose: str


class AccessLog:
    """Records every dataset image read by training and evaluation code."""

    def __init__(self):
        self.records: list[AccessRecord] = []

    def read(self, step: int, dataset, split: str, index: int, purpose: str = "train"):
        self.records.append(AccessRecord(step, dataset.name, split, int(index), purpose))
        if split == "train":
            return dataset.train_images[index]
        return dataset.eval[index][0]

    def domains_read(self, step: int, purpose: str = "train") -> set[str]:
        return {r.domain for r in self.records if r.step == step and r.purpose == purpose}

    def lines(self) -> list[str]:
        return [f"{r.step}\t{r.purpose}\t{r.domain}\t{r.split}\t{r.index}" for r in self.records]


class _NullLog(AccessLog):
    def read(self, step, dataset, split, index, purpose="train"):
        if split == "train":
            return dataset.train_images[index]
        return dataset.eval[index][0]


class _Cycler:
    """Endless reshuffled pass over ``n`` indices."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng = n, rng
        self.order = rng.permutation(n)
        self.pos = 0

    def next(self) -> int:
        if self.pos == self.n:
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        self.pos += 1
        return int(self.order[self.pos - 1])


def check_finite(loss: torch.Tensor) -> None:
    if not torch.isfinite(loss).all():
        raise DivergenceError(f"non-finite loss {loss.item()}")


def run_phase(phase, schedule: Schedule, clip_norm: float | None = None,
              callback: Callable[[int, float], None] | None = None) -> list[float]:
    params = [p for p in phase.parameters() if p.requires_grad]
    opt = torch.optim.SGD(params, lr=schedule.lr, momentum=schedule.momentum)
    losses = []
    for it in range(schedule.iterations):
        for grp in opt.param_groups:
            grp["lr"] = schedule.lr_at(it)
        opt.zero_grad(set_to_none=True)
        loss = phase.loss(it)
        check_finite(loss)
        loss.backward()
        if clip_norm is not None:
            torch.nn.utils.clip_grad_norm_(params, clip_norm)
        opt.step()
        value = float(loss.detach())
        losses.append(value)
        if callback is not None:
            callback(it, value)
    return losses


@dataclass
class SupervisedPhase:
    """Plain detection training on labeled pools ``[(dataset, items), ...]``."""

    det: Detector
    pools: Sequence[tuple[object, list]]
    seed: int = 0
    step: int = 0
    access_log: AccessLog | None = None

    def __post_init__(self):
        self.log = self.access_log or _NullLog()
        self.rng = numpy_rng(self.seed, "shuffle", self.step)
        self.roi_rng = numpy_rng(self.seed, "roi", self.step)
        self.index = [(k, i) for k, (_, items) in enumerate(self.pools) for i in range(len(items))]
        self.cycle = _Cycler(len(self.index), self.rng)

    def parameters(self):
        return self.det.parameters()

    def loss(self, it: int) -> torch.Tensor:
        k, i = self.index[self.cycle.next()]
        ds, items = self.pools[k]
        img = self.log.read(self.step, ds, "train", i)
        gts = items[i][1]
        z = self.det.features(batch_tensor([img], self.det.rpn_conv.weight.dtype))
        obj, deltas = self.det.rpn_head(z)
        return detection_loss_from_features(self.det, z[0], obj[0], deltas[0], gts, self.roi_rng)


@dataclass
class DAPhase:
    """One adversarial adaptation phase.

    Each iteration draws one source image and one image from the pooled
    ``targets``. Optional extras: pseudo-target samples from a frozen
    transfer module ``dtm`` (weight ``alpha``) and L2 distillation towards a
    frozen ``teacher`` (weight ``kd_weight``).
    """

    det: Detector
    disc: DiscriminatorSet
    source: object
    targets: Sequence[object]
    lam: float = 1.0
    kind: str = "focal"
    seed: int = 0
    step: int = 1
    access_log: AccessLog | None = None
    dtm: torch.nn.Module | None = None
    alpha: float = 0.0
    teacher: Detector | None = None
    kd_weight: float = 0.0
    grl_lambda: float | None = None
    _pool: list = field(init=False, default_factory=list)

    def __post_init__(self):
        self.log = self.access_log or _NullLog()
        if any(t.labeled for t in self.targets):
            raise ValueError("adaptation targets must be unlabeled")
        self.src_items = self.source.reveal_train_labels()
        self.rng = numpy_rng(self.seed, "shuffle", self.step)
        self.roi_rng = numpy_rng(self.seed, "roi", self.step)
        self.src_cycle = _Cycler(len(self.src_items), self.rng)
        self._pool = [(k, i) for k, t in enumerate(self.targets) for i in range(len(t.train_images))]
        # separate stream so the source order matches plain supervised training
        self.tgt_cycle = _Cycler(len(self._pool), numpy_rng(self.seed, "shuffle-target", self.step)) \
            if self._pool else None
        if self.dtm is not None:
            for p in self.dtm.parameters():
                p.requires_grad_(False)
        if self.teacher is not None:
            for p in self.teacher.parameters():
                p.requires_grad_(False)

    def parameters(self):
        return list(self.det.parameters()) + list(self.disc.parameters())

    def loss(self, it: int) -> torch.Tensor:
        dtype = self.det.rpn_conv.weight.dtype
        si = self.src_cycle.next()
        src = batch_tensor([self.log.read(self.step, self.source, "train", si)], dtype)
        tgt = None
        if self.lam > 0 and self.tgt_cycle is not None:
            k, ti = self._pool[self.tgt_cycle.next()]
            tgt = batch_tensor([self.log.read(self.step, self.targets[k], "train", ti)], dtype)
        return da_objective(self.det, self.disc, src, self.src_items[si][1], tgt, lam=self.lam,
                            kind=self.kind, dtm=self.dtm, alpha=self.alpha, teacher=self.teacher,
                            kd_weight=self.kd_weight, grl_lambda=self.grl_lambda, rng=self.roi_rng)


def da_objective(det: Detector, disc: DiscriminatorSet, src: torch.Tensor, gts, tgt: torch.Tensor | None,
                 lam: float = 1.0, kind: str = "focal", dtm=None, alpha: float = 0.0,
                 teacher: Detector | None = None, kd_weight: float = 0.0,
                 grl_lambda: float | None = None, rng: np.random.Generator | None = None) -> torch.Tensor:
    """Single scalar objective for one source image (plus optional extras).

    ``L_sup(src) + lam * (image + instance DA loss over {src, tgt})``
    ``+ alpha * (image + instance loss on dtm(src) labelled target)``
    ``+ kd_weight * distillation``. Terms whose weight is 0 are skipped
    entirely. Gradients reach ``dtm`` never; it is evaluated under no_grad.
    """
    images = [src]
    use_da = lam > 0 and tgt is not None
    use_pseudo = dtm is not None and alpha > 0
    if use_da:
        images.append(tgt)
    if use_pseudo:
        with torch.no_grad():
            images.append(dtm(src).to(src.dtype))
    x = torch.cat(images)
    z = det.features(x)
    obj, deltas = det.rpn_head(z)
    loss = detection_loss_from_features(det, z[0], obj[0], deltas[0], gts, rng)
    if use_da or use_pseudo:
        d = [0] + [1] * (len(images) - 1)
        img_l, inst_l, owner = domain_losses(det, disc, z, obj, deltas, d, kind, lam=grl_lambda)
        n_real = 2 if use_da else 1
        if use_da:
            real = owner < n_real
            inst = inst_l[real].mean() if real.any() else z.sum() * 0
            loss = loss + lam * (img_l[:n_real].mean() + inst)
        if use_pseudo:
            fake = owner == n_real
            inst = inst_l[fake].mean() if fake.any() else z.sum() * 0
            loss = loss + alpha * (img_l[n_real] + inst)
    if teacher is not None and kd_weight > 0:
        loss = loss + kd_weight * distillation_loss(det, teacher, z[0], src)
    return loss


def distillation_loss(student: Detector, teacher: Detector, z_student: torch.Tensor,
                      image: torch.Tensor) -> torch.Tensor:
    """L2 between student and teacher ROI outputs on the teacher's top-32 proposals."""
    with torch.no_grad():
        zt = teacher.features(image.to(teacher.rpn_conv.weight.dtype))
        obj, deltas = teacher.rpn_head(zt)
        rois, _ = teacher.proposals(obj[0], deltas[0], "eval")
        t_cls, t_box = teacher.head(teacher.roi_features(zt[0], rois))
    if rois.shape[0] == 0:
        return z_student.sum() * 0
    s_cls, s_box = student.head(student.roi_features(z_student, rois))
    return ((s_cls - t_cls) ** 2).mean() + ((s_box - t_box) ** 2).mean()


def schedule_from(iterations: int, lr: float, decay_factor: float, decay_point: float,
                  momentum: float = 0.9) -> Schedule:
    if not 0 < decay_point <= 1:
        raise ValueError("decay_point must lie in (0, 1]")
    decay_at = int(math.floor(iterations * decay_point + 1e-9))
    return Schedule(iterations, lr, lr * decay_factor, decay_at, momentum)
