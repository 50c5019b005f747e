"""Model-dependent evaluation: dataset mAP, feature shift and score histograms."""

from __future__ import annotations

import numpy as np
import torch

from ..detector import Detector, batch_tensor, predict_batch
from .metrics import EvalReport, evaluate_detections


def map_over_dataset(det: Detector, dataset, score_thresh: float = 0.05,
                     access_log=None, step: int = 0) -> EvalReport:
    """Run the detector over the eval split and score it per class."""
    if not dataset.eval:
        raise ValueError(f"dataset {dataset.name!r} has an empty eval split")
    if access_log is not None:
        for i in range(len(dataset.eval)):
            access_log.read(step, dataset, "eval", i, purpose="eval")
    images = [im for im, _ in dataset.eval]
    dets = predict_batch(det, images, score_thresh)
    return evaluate_detections(dets, [g for _, g in dataset.eval], det.num_classes)


@torch.no_grad()
def pooled_features(det: Detector, images, chunk: int = 64) -> np.ndarray:
    """Globally average-pooled backbone features, one row per image."""
    out = []
    dtype = det.rpn_conv.weight.dtype
    for i in range(0, len(images), chunk):
        part = images[i:i + chunk]
        x = part if torch.is_tensor(part) else batch_tensor(part, dtype)
        out.append(det.features(x.to(dtype)).mean(dim=(2, 3)).double().numpy())
    return np.concatenate(out) if out else np.zeros((0, 0))


def cosine_domain_shift(det: Detector, a, b) -> float:
    """``1 - cos`` between mean pooled features of two datasets' eval images."""
    if not a.eval or not b.eval:
        raise ValueError("empty dataset")
    mu_a = pooled_features(det, [im for im, _ in a.eval]).mean(axis=0)
    mu_b = pooled_features(det, [im for im, _ in b.eval]).mean(axis=0)
    denom = np.linalg.norm(mu_a) * np.linalg.norm(mu_b)
    if denom == 0:
        return 0.0 if np.allclose(mu_a, mu_b) else 1.0
    return float(np.clip(1.0 - mu_a @ mu_b / denom, 0.0, 2.0))


@torch.no_grad()
def stage_scores(det: Detector, images, stage: str, cls: int = 0) -> np.ndarray:
    """Objectness of eval proposals (``rpn``) or class scores of detections (``classifier``)."""
    if stage not in ("rpn", "classifier"):
        raise ValueError("stage must be 'rpn' or 'classifier'")
    if stage == "classifier":
        dets = predict_batch(det, images)
        return np.array([d.score for ds in dets for d in ds if d.c == cls], dtype=np.float64)
    dtype = det.rpn_conv.weight.dtype
    scores = []
    for i in range(0, len(images), 64):
        z = det.features(batch_tensor(images[i:i + 64], dtype))
        obj, deltas = det.rpn_head(z)
        for j in range(z.shape[0]):
            _, s = det.proposals(obj[j], deltas[j], "eval")
            scores.append(s.double().numpy())
    return np.concatenate(scores) if scores else np.zeros(0)


def score_histogram(scores, bins: int):
    """Counts over ``bins`` uniform bins on [0, 1]; score 1.0 lands in the last bin."""
    counts, edges = np.histogram(np.clip(np.asarray(scores, dtype=np.float64), 0.0, 1.0),
                                 bins=bins, range=(0.0, 1.0))
    return counts, edges


def confidence_histograms(det: Detector, dataset, stage: str = "rpn", cls: int = 0,
                          bins: int | None = None, images=None):
    if bins is None:
        bins = 100 if stage == "rpn" else 10
    if images is None:
        images = [im for im, _ in dataset.eval]
    return score_histogram(stage_scores(det, images, stage, cls), bins)


def histogram_divergence(h1, h2) -> float:
    """L1 distance between two normalised histograms (in [0, 2])."""
    a = np.asarray(h1, dtype=np.float64)
    b = np.asarray(h2, dtype=np.float64)
    a = a / a.sum() if a.sum() else a
    b = b / b.sum() if b.sum() else b
    return float(np.abs(a - b).sum())
