"""Domain transfer module: a stack of bias-free 1x1 convolutions.

Trained against a frozen detector and frozen discriminators so that its
outputs on source images are classified as "target". Outputs are not
clamped to [0, 1]; the backbone accepts them as they are.
"""

from __future__ import annotations

import contextlib
import hashlib
from typing import Iterable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .adversarial import DiscriminatorSet, domain_losses
from .detector import Detector, batch_tensor
from .seeding import numpy_rng
from .training import AccessLog, DivergenceError, Schedule, _Cycler, _NullLog, check_finite

VARIANTS: dict[str, tuple[int, ...]] = {
    "original": (3, 256, 3),
    "wider": (3, 512, 3),
    "four_layer": (3, 256, 512, 256, 3),
    "six_layer": (3, 64, 128, 256, 128, 64, 3),
}
FIRST_LAYER_SCALE = 0.1


class FrozenError(RuntimeError):
    """A model that must be frozen still has trainable parameters."""


def _orthonormal(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    """Random matrix with orthonormal columns (rows >= cols) or rows."""
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q if rows >= cols else q.T


class DTM(nn.Module):
    def __init__(self, variant: str = "original", seed: int = 0):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"unknown DTM variant {variant!r}; choose from {tuple(VARIANTS)}")
        self.variant = variant
        dims = VARIANTS[variant]
        self.layers = nn.ModuleList(
            nn.Conv2d(dims[i], dims[i + 1], 1, bias=False) for i in range(len(dims) - 1))
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int = 0) -> None:
        """Exact identity start built from sign-paired hidden units.

        Each hidden layer of width ``2k`` carries ``[relu(u), relu(-u)]`` for
        a k-dim linear code ``u`` of the input, so ``[I, -I]`` recovers ``u``
        through the ReLU. The first layer is a random orthonormal code scaled
        by 0.1; the last layer is the pseudo-inverse of the composed code.
        """
        rng = np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)
        dims = VARIANTS[self.variant]
        hidden = dims[1:-1]
        k = hidden[0] // 2
        a = FIRST_LAYER_SCALE * _orthonormal(k, 3, rng)
        mats = [np.vstack([a, -a])]
        code = a
        for h_in, h_out in zip(hidden[:-1], hidden[1:]):
            k_in, k_out = h_in // 2, h_out // 2
            m = _orthonormal(k_out, k_in, rng)
            code = m @ code
            unpair = np.hstack([np.eye(k_in), -np.eye(k_in)])
            mats.append(np.vstack([m, -m]) @ unpair)
        k_last = hidden[-1] // 2
        b = np.linalg.pinv(code)
        mats.append(b @ np.hstack([np.eye(k_last), -np.eye(k_last)]))
        with torch.no_grad():
            for conv, w in zip(self.layers, mats):
                conv.weight.copy_(torch.as_tensor(w, dtype=conv.weight.dtype)[:, :, None, None])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        single = x.dim() == 3
        if single:
            x = x[None]
        if x.shape[1] != 3:
            raise ValueError(f"expected 3 input channels, got {x.shape[1]}")
        x = x.to(self.layers[0].weight.dtype)
        for conv in self.layers[:-1]:
            x = F.relu(conv(x))
        x = self.layers[-1](x)
        return x[0] if single else x

    def describe(self):
        from .evaluation.complexity import LayerSpec
        return [LayerSpec.conv(c) for c in self.layers]


def dtm_forward(g: DTM, img) -> torch.Tensor:
    x = img if torch.is_tensor(img) else batch_tensor([img], g.layers[0].weight.dtype)[0]
    if x.dim() not in (3, 4):
        raise ValueError(f"expected (3, H, W) or (B, 3, H, W), got {tuple(x.shape)}")
    return g(x)


def parameter_count(variant: str) -> int:
    dims = VARIANTS[variant]
    return sum(a * b for a, b in zip(dims[:-1], dims[1:]))


def state_checksum(*modules: nn.Module) -> str:
    h = hashlib.sha256()
    for m in modules:
        for name, t in sorted(m.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@contextlib.contextmanager
def frozen(*modules: nn.Module):
    """Temporarily disable gradients for every parameter of ``modules``."""
    saved = [(p, p.requires_grad) for m in modules for p in m.parameters()]
    for p, _ in saved:
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, flag in saved:
            p.requires_grad_(flag)


def _require_frozen(*modules: nn.Module) -> None:
    for m in modules:
        if any(p.requires_grad for p in m.parameters()):
            raise FrozenError(f"{type(m).__name__} must be frozen while training the DTM")


def dtm_loss(det: Detector, disc: DiscriminatorSet, g: DTM, source_batch, kind: str = "focal") -> torch.Tensor:
    """Sum over images of the "target" (d=1) domain loss on ``g(X)``.

    Per image: image-level loss plus the mean over its instances. No
    gradient reversal; only ``g`` receives gradients.
    """
    _require_frozen(det, disc)
    if torch.is_tensor(source_batch):
        x = source_batch
    else:
        x = batch_tensor(list(source_batch), g.layers[0].weight.dtype)
    if x.dim() == 3:
        x = x[None]
    out = g(x).to(det.rpn_conv.weight.dtype)
    z = det.features(out)
    obj, deltas = det.rpn_head(z)
    img_l, inst_l, owner = domain_losses(det, disc, z, obj, deltas, [1] * z.shape[0], kind,
                                         reverse=False)
    total = img_l.sum()
    for i in range(z.shape[0]):
        mine = owner == i
        if mine.any():
            total = total + inst_l[mine].mean()
    return total


def train_dtm(det: Detector, disc: DiscriminatorSet, source, iterations: int = 300,
              lr: float = 0.01, momentum: float = 0.9, variant: str = "original",
              seed: int = 0, kind: str = "focal", batch_size: int = 1,
              step: int = 0, access_log: AccessLog | None = None) -> DTM:
    """Fit a fresh DTM on source train images; ``det``/``disc`` stay untouched."""
    log = access_log or _NullLog()
    g = DTM(variant, seed=seed).to(det.rpn_conv.weight.dtype)
    rng = numpy_rng(seed, "dtm-shuffle", step)
    cycle = _Cycler(len(source.train_images), rng)
    schedule = Schedule(iterations, lr, lr, iterations, momentum)
    opt = torch.optim.SGD(g.parameters(), lr=lr, momentum=momentum)
    dtype = det.rpn_conv.weight.dtype
    with frozen(det, disc):
        for it in range(iterations):
            idx = [cycle.next() for _ in range(batch_size)]
            x = batch_tensor([log.read(step, source, "train", i, purpose="dtm") for i in idx], dtype)
            opt.zero_grad(set_to_none=True)
            loss = dtm_loss(det, disc, g, x, kind)
            try:
                check_finite(loss)
            except DivergenceError as e:
                raise DivergenceError(f"DTM training diverged at iteration {it}: {e}") from None
            loss.backward()
            opt.step()
            for grp in opt.param_groups:
                grp["lr"] = schedule.lr_at(it + 1)
    for p in g.parameters():
        p.requires_grad_(False)
    return g


@torch.no_grad()
def mean_target_probability(det: Detector, disc: DiscriminatorSet, images: Iterable,
                            g: DTM | None = None) -> float:
    """Mean image-discriminator target probability on ``images`` (optionally via ``g``)."""
    from .adversarial import discriminator_probabilities
    dtype = det.rpn_conv.weight.dtype
    x = batch_tensor(list(images), dtype)
    if g is not None:
        x = g(x).to(dtype)
    return float(discriminator_probabilities(det, disc, x).mean())
