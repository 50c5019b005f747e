"""Miniature two-stage detector: stride-8 backbone, RPN and ROI heads.

Boxes are ``(x1, y1, x2, y2)`` tensors internally; the public
:class:`Detection` uses ``(x, y, w, h)``. Box deltas follow the usual
``(dx / w_a, dy / h_a, log(w / w_a), log(h / h_a))`` centre parameterisation.
Background is label 0 of the ROI classifier, object class ``c`` is ``c + 1``.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .synth_domains import IMAGE_SIZE, NUM_CLASSES, Image

STRIDE = 8
ANCHOR_SIZES = (16, 32, 48)
ROI_SIZE = 4
FEATURE_CHANNELS = 64
INSTANCE_DIM = ROI_SIZE * ROI_SIZE * FEATURE_CHANNELS  # 1024
HEAD_DIM = 256

RPN_POS_IOU = 0.5
RPN_NEG_IOU = 0.3
RPN_NMS_IOU = 0.7
RPN_TOPK = {"train": 64, "eval": 32}
ROI_POS_IOU = 0.5
ROI_BATCH = 16
ROI_POS_FRACTION = 0.5
DETECTION_NMS_IOU = 0.5
SMOOTH_L1_BETA = 1.0
_MAX_LOG_SCALE = math.log(1000.0 / 16)

ARCHITECTURE_ID = "mini-frcnn-v1"


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]  # x, y, w, h
    c: int
    score: float

    @property
    def x(self):
        return self.box[0]

    @property
    def y(self):
        return self.box[1]

    @property
    def w(self):
        return self.box[2]

    @property
    def h(self):
        return self.box[3]


# -- box utilities ----------------------------------------------------------

def xywh_to_xyxy(b: torch.Tensor) -> torch.Tensor:
    return torch.cat([b[..., :2], b[..., :2] + b[..., 2:4]], dim=-1)


def xyxy_to_xywh(b: torch.Tensor) -> torch.Tensor:
    return torch.cat([b[..., :2], b[..., 2:4] - b[..., :2]], dim=-1)


def box_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise IoU of (N, 4) and (M, 4) xyxy boxes."""
    area_a = (a[:, 2] - a[:, 0]).clamp(min=0) * (a[:, 3] - a[:, 1]).clamp(min=0)
    area_b = (b[:, 2] - b[:, 0]).clamp(min=0) * (b[:, 3] - b[:, 1]).clamp(min=0)
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None] - inter
    return torch.where(union > 0, inter / union.clamp(min=1e-12), torch.zeros_like(inter))


def encode_boxes(ref: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    rw, rh = ref[:, 2] - ref[:, 0], ref[:, 3] - ref[:, 1]
    rx, ry = ref[:, 0] + 0.5 * rw, ref[:, 1] + 0.5 * rh
    tw, th = target[:, 2] - target[:, 0], target[:, 3] - target[:, 1]
    tx, ty = target[:, 0] + 0.5 * tw, target[:, 1] + 0.5 * th
    return torch.stack([(tx - rx) / rw, (ty - ry) / rh,
                        torch.log(tw / rw), torch.log(th / rh)], dim=1)


def decode_boxes(ref: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
    rw, rh = ref[:, 2] - ref[:, 0], ref[:, 3] - ref[:, 1]
    rx, ry = ref[:, 0] + 0.5 * rw, ref[:, 1] + 0.5 * rh
    cx = rx + deltas[:, 0] * rw
    cy = ry + deltas[:, 1] * rh
    w = rw * torch.exp(deltas[:, 2].clamp(max=_MAX_LOG_SCALE))
    h = rh * torch.exp(deltas[:, 3].clamp(max=_MAX_LOG_SCALE))
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=1)


def clip_boxes(boxes: torch.Tensor, size: int = IMAGE_SIZE) -> torch.Tensor:
    """Clip to the image and widen degenerate boxes to 1 px."""
    x1 = boxes[:, 0].clamp(0, size - 1)
    y1 = boxes[:, 1].clamp(0, size - 1)
    x2 = torch.maximum(boxes[:, 2].clamp(0, size), x1 + 1)
    y2 = torch.maximum(boxes[:, 3].clamp(0, size), y1 + 1)
    return torch.stack([x1, y1, x2, y2], dim=1)


def make_anchors(feature_size: int = IMAGE_SIZE // STRIDE, stride: int = STRIDE,
                 sizes: Sequence[int] = ANCHOR_SIZES) -> torch.Tensor:
    """Square anchors, ordered (row, col, size)."""
    c = (torch.arange(feature_size, dtype=torch.float64) + 0.5) * stride
    cy, cx = torch.meshgrid(c, c, indexing="ij")
    s = torch.tensor(sizes, dtype=torch.float64)
    half = s[None, None, :] / 2
    out = torch.stack([cx[..., None] - half, cy[..., None] - half,
                       cx[..., None] + half, cy[..., None] + half], dim=-1)
    return out.reshape(-1, 4)


def nms(boxes, scores, iou_thresh: float) -> list[int]:
    """Greedy NMS; returns kept indices in descending-score order.

    Ties in score keep the lower original index first. A box is suppressed
    when its IoU with a kept box is >= ``iou_thresh``.
    """
    return _nms(boxes, scores, iou_thresh, None)


def _nms(boxes, scores, iou_thresh, max_keep):
    b = np.asarray(boxes.detach().cpu() if torch.is_tensor(boxes) else boxes, dtype=np.float64).reshape(-1, 4)
    s = np.asarray(scores.detach().cpu() if torch.is_tensor(scores) else scores, dtype=np.float64).reshape(-1)
    if len(b) != len(s):
        raise ValueError("boxes and scores differ in length")
    if len(b) == 0:
        return []
    order = np.lexsort((np.arange(len(s)), -s))
    area = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    suppressed = np.zeros(len(b), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        if max_keep is not None and len(keep) >= max_keep:
            break
        iw = np.maximum(np.minimum(b[i, 2], b[:, 2]) - np.maximum(b[i, 0], b[:, 0]), 0.0)
        ih = np.maximum(np.minimum(b[i, 3], b[:, 3]) - np.maximum(b[i, 1], b[:, 1]), 0.0)
        inter = iw * ih
        union = area[i] + area - inter
        ov = np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)
        suppressed |= ov >= iou_thresh
    return keep


def smooth_l1(x: torch.Tensor, beta: float = SMOOTH_L1_BETA) -> torch.Tensor:
    ax = x.abs()
    return torch.where(ax < beta, 0.5 * ax * ax / beta, ax - 0.5 * beta)


# -- the model ---------------------------------------------------------------

class Detector(nn.Module):
    def __init__(self, num_classes: int = NUM_CLASSES, seed: int = 0):
        super().__init__()
        self.num_classes = num_classes
        self.seed = seed
        chans = (3, 16, 32, 64, 64)
        layers = []
        for i in range(4):
            layers += [nn.Conv2d(chans[i], chans[i + 1], 3, stride=2 if i < 3 else 1, padding=1),
                       nn.ReLU()]
        self.backbone = nn.Sequential(*layers)
        a = len(ANCHOR_SIZES)
        self.rpn_conv = nn.Conv2d(FEATURE_CHANNELS, FEATURE_CHANNELS, 3, padding=1)
        self.rpn_obj = nn.Conv2d(FEATURE_CHANNELS, a, 1)
        self.rpn_box = nn.Conv2d(FEATURE_CHANNELS, 4 * a, 1)
        self.head_fc = nn.Linear(INSTANCE_DIM, HEAD_DIM)
        self.cls_head = nn.Linear(HEAD_DIM, num_classes + 1)
        self.box_head = nn.Linear(HEAD_DIM, 4 * num_classes)
        self.register_buffer("anchors", make_anchors().float(), persistent=False)
        self._init_weights(seed)

    def _init_weights(self, seed: int) -> None:
        g = torch.Generator().manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                fan_in = m.weight[0].numel()
                std = math.sqrt(2.0 / fan_in)
                if m in (self.rpn_obj, self.rpn_box, self.cls_head, self.box_head):
                    std = 0.01
                with torch.no_grad():
                    m.weight.copy_(torch.randn(m.weight.shape, generator=g) * std)
                    m.bias.zero_()

    # forward pieces
    def features(self, images: torch.Tensor) -> torch.Tensor:
        return self.backbone(images.to(self.rpn_conv.weight.dtype))

    def rpn_head(self, z: torch.Tensor):
        h = F.relu(self.rpn_conv(z))
        b = z.shape[0]
        obj = self.rpn_obj(h).permute(0, 2, 3, 1).reshape(b, -1)
        deltas = self.rpn_box(h).permute(0, 2, 3, 1).reshape(b, -1, 4)
        return obj, deltas

    def anchors_like(self, ref: torch.Tensor) -> torch.Tensor:
        return self.anchors.to(ref.dtype)

    def proposals(self, obj_logits: torch.Tensor, deltas: torch.Tensor, mode: str = "train"):
        """Decode, clip, NMS and top-k for a single image. Outputs carry no grad."""
        pin = getattr(self, "_pin", None)
        if pin is not None and pin.replaying:
            return pin.next()
        with torch.no_grad():
            anchors = self.anchors_like(deltas)
            boxes = clip_boxes(decode_boxes(anchors, deltas))
            scores = torch.sigmoid(obj_logits)
            keep = _nms(boxes, scores, RPN_NMS_IOU, RPN_TOPK[mode])
            idx = torch.as_tensor(keep, dtype=torch.long)
            out = boxes[idx].detach(), scores[idx].detach()
        if pin is not None:
            pin.record(out)
        return out

    def roi_features(self, z: torch.Tensor, boxes: torch.Tensor) -> torch.Tensor:
        return roi_align(z, boxes)

    def head(self, feats: torch.Tensor):
        h = F.relu(self.head_fc(feats))
        return self.cls_head(h), self.box_head(h).reshape(-1, self.num_classes, 4)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.features(images)

    def describe(self, num_rois: int = RPN_TOPK["eval"]):
        """Layer list for analytic complexity accounting."""
        from .evaluation.complexity import LayerSpec
        specs = []
        for m in self.backbone:
            if isinstance(m, nn.Conv2d):
                specs.append(LayerSpec.conv(m))
        specs += [LayerSpec.conv(self.rpn_conv), LayerSpec.conv(self.rpn_obj, branch=True),
                  LayerSpec.conv(self.rpn_box, branch=True)]
        specs += [LayerSpec.linear(self.head_fc, rows=num_rois),
                  LayerSpec.linear(self.cls_head, rows=num_rois),
                  LayerSpec.linear(self.box_head, rows=num_rois)]
        return specs


class ProposalPin:
    """Records proposals on the first pass and replays them afterwards."""

    def __init__(self):
        self.saved: list = []
        self.replaying = False
        self._cursor = 0

    def record(self, out) -> None:
        self.saved.append(out)

    def next(self):
        out = self.saved[self._cursor]
        self._cursor += 1
        return out

    def rewind(self) -> None:
        """Start replaying from the first recorded call."""
        self.replaying = True
        self._cursor = 0


@contextmanager
def pinned_proposals(*detectors: Detector):
    """Hold proposal boxes fixed across repeated forward passes.

    Proposal selection is treated as a constant by autograd; pinning it
    makes numeric differentiation see the same function. Call
    ``pin.rewind()`` before each pass after the first.
    """
    pin = ProposalPin()
    for d in detectors:
        d._pin = pin
    try:
        yield pin
    finally:
        for d in detectors:
            d._pin = None


def roi_align(z: torch.Tensor, boxes: torch.Tensor, stride: int = STRIDE,
              out: int = ROI_SIZE) -> torch.Tensor:
    """Bilinear crop-resize of a (C, H, W) map over xyxy pixel boxes.

    One bilinear sample at each output bin centre, border-clamped.
    Returns (K, C * out * out).
    """
    c, h, w = z.shape
    k = boxes.shape[0]
    if k == 0:
        return z.new_zeros((0, c * out * out))
    boxes = boxes.to(z.dtype) / stride
    t = (torch.arange(out, dtype=z.dtype) + 0.5) / out
    xs = boxes[:, 0:1] + t[None] * (boxes[:, 2:3] - boxes[:, 0:1])  # (K, out)
    ys = boxes[:, 1:2] + t[None] * (boxes[:, 3:4] - boxes[:, 1:2])
    gx = xs / w * 2 - 1
    gy = ys / h * 2 - 1
    grid = torch.stack([gx[:, None, :].expand(k, out, out), gy[:, :, None].expand(k, out, out)], dim=-1)
    sampled = F.grid_sample(z[None], grid.reshape(1, k * out, out, 2), mode="bilinear",
                            padding_mode="border", align_corners=False)
    sampled = sampled[0].reshape(c, k, out, out).permute(1, 0, 2, 3)
    return sampled.reshape(k, -1)


# -- public operations ---------------------------------------------------------

def image_tensor(img, dtype=torch.float32) -> torch.Tensor:
    if isinstance(img, Image):
        img = img.pixels
    t = torch.as_tensor(np.asarray(img) if not torch.is_tensor(img) else img, dtype=dtype)
    return t


def batch_tensor(images, dtype=torch.float32) -> torch.Tensor:
    return torch.stack([image_tensor(im, dtype) for im in images])


def _check_image(t: torch.Tensor) -> None:
    if tuple(t.shape[-3:]) != (3, IMAGE_SIZE, IMAGE_SIZE):
        raise ValueError(f"expected image shape (3, {IMAGE_SIZE}, {IMAGE_SIZE}), got {tuple(t.shape)}")


def backbone_forward(params: Detector, img) -> torch.Tensor:
    t = img if torch.is_tensor(img) else image_tensor(img, params.rpn_conv.weight.dtype)
    _check_image(t)
    single = t.dim() == 3
    z = params.features(t[None] if single else t)
    return z[0] if single else z


def rpn_propose(params: Detector, z: torch.Tensor, mode: str = "train"):
    """Proposals for one (C, H, W) feature map: (boxes xyxy, objectness)."""
    if mode not in RPN_TOPK:
        raise ValueError(f"mode must be one of {tuple(RPN_TOPK)}")
    obj, deltas = params.rpn_head(z[None])
    return params.proposals(obj[0], deltas[0], mode)


def roi_extract(z: torch.Tensor, box) -> torch.Tensor:
    """Instance feature of length 1024 for one xyxy pixel box."""
    b = torch.as_tensor(box, dtype=z.dtype).reshape(1, 4)
    if float(b[0, 2] - b[0, 0]) < 1 or float(b[0, 3] - b[0, 1]) < 1:
        raise ValueError("degenerate box: width and height must be >= 1 px")
    return roi_align(z, b)[0]


def gt_tensors(gts, dtype=torch.float32):
    if not gts:
        return torch.zeros((0, 4), dtype=dtype), torch.zeros((0,), dtype=torch.long)
    boxes = torch.tensor([[g.x, g.y, g.x + g.w, g.y + g.h] for g in gts], dtype=dtype)
    labels = torch.tensor([int(g.c) for g in gts], dtype=torch.long)
    return boxes, labels


def assign_anchors(anchors: torch.Tensor, gt_boxes: torch.Tensor) -> torch.Tensor:
    """Anchor labels: 1 positive, 0 negative, -1 ignored."""
    labels = torch.zeros(anchors.shape[0], dtype=torch.long)
    if gt_boxes.shape[0] == 0:
        return labels
    ious = box_iou(anchors, gt_boxes)
    best = ious.max(dim=1).values
    labels.fill_(-1)
    labels[best < RPN_NEG_IOU] = 0
    labels[best >= RPN_POS_IOU] = 1
    labels[ious.argmax(dim=0)] = 1
    return labels


def rpn_loss(obj_logits, deltas, anchors, gt_boxes):
    """Objectness BCE over labelled anchors plus smooth-L1 on positives."""
    labels = assign_anchors(anchors, gt_boxes)
    valid = labels >= 0
    cls = F.binary_cross_entropy_with_logits(obj_logits[valid], labels[valid].to(obj_logits.dtype))
    pos = labels == 1
    if pos.any():
        ious = box_iou(anchors[pos], gt_boxes)
        matched = gt_boxes[ious.argmax(dim=1)]
        target = encode_boxes(anchors[pos], matched)
        reg = smooth_l1(deltas[pos] - target).sum(dim=1).mean()
    else:
        reg = obj_logits.sum() * 0
    return cls, reg


def sample_rois(proposals, gt_boxes, gt_labels, rng: np.random.Generator | None = None):
    """Pick up to 16 ROIs (at most half positive) from GT boxes + proposals.

    Returns (rois, labels with background 0, matched gt boxes). Without an
    rng the first candidates in order are taken, which keeps loss
    evaluation deterministic.
    """
    cand = torch.cat([gt_boxes.to(proposals.dtype), proposals], dim=0)
    if gt_boxes.shape[0]:
        ious = box_iou(cand, gt_boxes.to(cand.dtype))
        best, arg = ious.max(dim=1)
        labels = torch.where(best >= ROI_POS_IOU, gt_labels[arg] + 1, torch.zeros_like(arg))
        matched = gt_boxes.to(cand.dtype)[arg]
    else:
        labels = torch.zeros(cand.shape[0], dtype=torch.long)
        matched = cand.clone()
    pos = torch.nonzero(labels > 0).flatten().numpy()
    neg = torch.nonzero(labels == 0).flatten().numpy()
    if rng is not None:
        pos, neg = rng.permutation(pos), rng.permutation(neg)
    n_pos = min(len(pos), int(ROI_BATCH * ROI_POS_FRACTION))
    n_neg = min(len(neg), ROI_BATCH - n_pos)
    idx = torch.as_tensor(np.concatenate([pos[:n_pos], neg[:n_neg]]).astype(np.int64))
    return cand[idx], labels[idx], matched[idx]


def roi_loss(cls_logits, box_deltas, rois, labels, matched):
    cls = F.cross_entropy(cls_logits, labels)
    pos = labels > 0
    if pos.any():
        target = encode_boxes(rois[pos], matched[pos])
        pred = box_deltas[pos, labels[pos] - 1]
        reg = smooth_l1(pred - target).sum(dim=1).sum() / labels.numel()
    else:
        reg = cls_logits.sum() * 0
    return cls, reg


def detection_loss_from_features(params: Detector, z: torch.Tensor, obj, deltas, gts,
                                 rng: np.random.Generator | None = None) -> torch.Tensor:
    """Supervised loss for one image given its feature map and RPN outputs."""
    anchors = params.anchors_like(deltas)
    gt_boxes, gt_labels = gt_tensors(gts, dtype=z.dtype)
    r_cls, r_reg = rpn_loss(obj, deltas, anchors, gt_boxes)
    props, _ = params.proposals(obj, deltas, "train")
    rois, labels, matched = sample_rois(props, gt_boxes, gt_labels, rng)
    feats = params.roi_features(z, rois)
    cls_logits, box_deltas = params.head(feats)
    h_cls, h_reg = roi_loss(cls_logits, box_deltas, rois, labels, matched)
    return r_cls + r_reg + h_cls + h_reg


def supervised_loss(params: Detector, img, gts, rng: np.random.Generator | None = None) -> torch.Tensor:
    z = backbone_forward(params, img)
    obj, deltas = params.rpn_head(z[None])
    return detection_loss_from_features(params, z, obj[0], deltas[0], gts, rng)


def detections_from_head(params: Detector, rois, cls_logits, box_deltas, score_thresh: float):
    probs = torch.softmax(cls_logits, dim=1)
    out: list[Detection] = []
    for c in range(params.num_classes):
        scores = probs[:, c + 1]
        boxes = clip_boxes(decode_boxes(rois, box_deltas[:, c]))
        sel = torch.nonzero(scores >= score_thresh).flatten()
        if sel.numel() == 0:
            continue
        keep = nms(boxes[sel], scores[sel], DETECTION_NMS_IOU)
        for k in keep:
            i = int(sel[k])
            x1, y1, x2, y2 = (float(v) for v in boxes[i])
            out.append(Detection((x1, y1, x2 - x1, y2 - y1), c, float(scores[i])))
    out.sort(key=lambda d: -d.score)
    return out


@torch.no_grad()
def predict(params: Detector, img, score_thresh: float = 0.05) -> list[Detection]:
    z = backbone_forward(params, img)
    return predict_from_features(params, z, score_thresh)


@torch.no_grad()
def predict_from_features(params: Detector, z: torch.Tensor, score_thresh: float = 0.05):
    obj, deltas = params.rpn_head(z[None])
    rois, _ = params.proposals(obj[0], deltas[0], "eval")
    if rois.shape[0] == 0:
        return []
    cls_logits, box_deltas = params.head(params.roi_features(z, rois))
    return detections_from_head(params, rois, cls_logits, box_deltas, score_thresh)


@torch.no_grad()
def predict_batch(params: Detector, images, score_thresh: float = 0.05, chunk: int = 32):
    out = []
    dtype = params.rpn_conv.weight.dtype
    for i in range(0, len(images), chunk):
        z = params.features(batch_tensor(images[i:i + chunk], dtype))
        out.extend(predict_from_features(params, zi, score_thresh) for zi in z)
    return out


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
