"""Central finite-difference gradient checks shared by unit and acceptance tests."""

from __future__ import annotations

import numpy as np
import torch

from imtda.detector import pinned_proposals
from oracles import central_difference


def relative_gradient_error(loss_fn, params, eps=1e-6, per_tensor=6, seed=0, pin=()) -> float:
    """Relative error between autograd and finite-difference gradients.

    Returns ``||g_fd - g_ad|| / max(||g_fd||, ||g_ad||)`` over up to
    ``per_tensor`` random entries from every parameter tensor. Detectors
    in ``pin`` keep the proposals of the first pass.
    """
    with pinned_proposals(*pin) as fixed:
        return _relative_error(loss_fn, params, eps, per_tensor, seed, fixed)


def _relative_error(loss_fn, params, eps, per_tensor, seed, fixed):
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    fixed.rewind()
    analytic = {id(p): torch.zeros_like(p) if p.grad is None else p.grad.detach().clone() for p in params}
    with torch.no_grad():
        rng = np.random.default_rng(seed)
        numeric = central_difference(lambda: (fixed.rewind(), loss_fn())[1], params, eps, per_tensor, rng)
    a = np.array([float(analytic[id(p)].view(-1)[i]) for p, i, _ in numeric])
    n = np.array([v for _, _, v in numeric])
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-300)
    return float(np.linalg.norm(a - n) / denom)


@torch.no_grad()
def relu_margin(det, x: torch.Tensor) -> float:
    """Smallest |pre-activation| feeding a backbone ReLU.

    Central differences straddle a kink when this is below the step size,
    so callers pick evaluation points with a comfortable margin.
    """
    margin = float("inf")
    h = x
    for m in det.backbone:
        if isinstance(m, torch.nn.ReLU):
            margin = min(margin, float(h.abs().min()))
        h = m(h)
    return margin


def smooth_detector(x: torch.Tensor, seeds=range(8, 40), margin: float = 1e-5):
    """First float64 detector whose backbone stays ``margin`` away from every kink on ``x``."""
    from imtda.detector import Detector
    for seed in seeds:
        det = Detector(seed=seed).double()
        if relu_margin(det, x) > margin:
            return det, seed
    raise RuntimeError("no seed gives a smooth evaluation point")
