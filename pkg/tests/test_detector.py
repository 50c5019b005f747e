import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from imtda.detector import (Detector, assign_anchors, backbone_forward, box_iou, count_parameters,
                            encode_boxes, make_anchors, nms, predict, roi_extract, roi_loss, rpn_loss,
                            rpn_propose, supervised_loss)
from imtda.synth_domains import DomainSpec, build_domain_dataset
from gradcheck import relative_gradient_error
from oracles import box_iou_naive, nms_naive


@pytest.fixture(scope="module")
def det64():
    return Detector(seed=3).double()


@pytest.fixture(scope="module")
def scene():
    ds = build_domain_dataset(DomainSpec("source", seed=5), n_train=2, n_eval=1)
    return ds.reveal_train_labels()[0]


def _xyxy_iou(a, b):
    return box_iou_naive((a[0], a[1], a[2] - a[0], a[3] - a[1]), (b[0], b[1], b[2] - b[0], b[3] - b[1]))


class TestArchitecture:
    """Shapes, parameter count and determinism of the forward path."""

    def test_feature_shape_and_zero_image(self):
        det = Detector()
        z = backbone_forward(det, torch.zeros(3, 96, 96))
        assert z.shape == (64, 12, 12)
        assert torch.isfinite(z).all()

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            backbone_forward(Detector(), torch.zeros(3, 64, 64))

    def test_parameter_count_exact(self):
        assert count_parameters(Detector()) == 364_927
        assert count_parameters(Detector(seed=9)) == 364_927

    def test_anchor_layout(self):
        a = make_anchors()
        assert a.shape == (432, 4)
        sides = sorted({float(v) for v in (a[:, 2] - a[:, 0])})
        assert sides == [16.0, 32.0, 48.0]

    def test_deterministic_forward_backward(self, scene):
        img, gts = scene
        grads = []
        for _ in range(2):
            det = Detector(seed=4)
            supervised_loss(det, img, gts).backward()
            grads.append(torch.cat([p.grad.flatten() for p in det.parameters()]))
        assert torch.equal(grads[0], grads[1])


class TestNMS:
    """Greedy suppression against the quadratic reference."""

    def test_single_and_identical(self):
        assert nms([[0, 0, 10, 10]], [0.3], 0.5) == [0]
        assert nms([[0, 0, 10, 10], [0, 0, 10, 10]], [0.2, 0.9], 0.5) == [1]
        assert nms([[0, 0, 10, 10], [0, 0, 10, 10]], [0.5, 0.5], 0.5) == [0]

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            nms([[0, 0, 1, 1]], [0.1, 0.2], 0.5)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from([0.3, 0.5, 0.7]))
    def test_matches_bruteforce(self, seed, thresh):
        rng = np.random.default_rng(seed)
        xy = rng.integers(0, 40, size=(10, 2)).astype(float)
        wh = rng.integers(4, 30, size=(10, 2)).astype(float)
        boxes = np.concatenate([xy, xy + wh], axis=1)
        scores = rng.integers(0, 5, size=10) / 4.0
        assert nms(boxes, scores, thresh) == nms_naive(boxes.tolist(), scores.tolist(), thresh)


class TestProposals:
    """RPN proposal caps, clipping and suppression."""

    @pytest.mark.parametrize("mode,cap", [("train", 64), ("eval", 32)])
    def test_cap_clip_and_overlap(self, scene, mode, cap):
        det = Detector(seed=1)
        with torch.no_grad():
            z = backbone_forward(det, scene[0])
            boxes, scores = rpn_propose(det, z, mode)
        assert len(boxes) <= cap
        assert float(boxes.min()) >= 0 and float(boxes.max()) <= 96
        b = boxes.tolist()
        for i in range(len(b)):
            for j in range(i + 1, len(b)):
                assert _xyxy_iou(b[i], b[j]) < 0.7

    def test_bad_mode(self):
        det = Detector()
        with pytest.raises(ValueError):
            rpn_propose(det, torch.zeros(64, 12, 12), "test")

    def test_anchor_assignment_rules(self):
        anchors = make_anchors()
        gt = torch.tensor([[10.0, 10.0, 40.0, 40.0]], dtype=torch.float64)
        labels = assign_anchors(anchors, gt)
        ious = box_iou(anchors, gt)[:, 0]
        assert bool((labels[ious >= 0.5] == 1).all())
        assert int(labels[int(ious.argmax())]) == 1
        mid = (ious >= 0.3) & (ious < 0.5)
        mid[int(ious.argmax())] = False
        assert bool((labels[mid] == -1).all())

    def test_no_ground_truth_all_negative(self):
        labels = assign_anchors(make_anchors(), torch.zeros((0, 4), dtype=torch.float64))
        assert bool((labels == 0).all())


class TestRoiExtract:
    """Bilinear crop-resize to a 1024-vector."""

    def test_full_box_is_downsample(self):
        z = torch.arange(64 * 12 * 12, dtype=torch.float64).reshape(64, 12, 12)
        p = roi_extract(z, [0, 0, 96, 96])
        assert p.shape == (1024,)
        # bin centres land exactly on feature cells 1, 4, 7, 10
        assert torch.equal(p.reshape(64, 4, 4), z[:, 1::3, 1::3])

    @pytest.mark.parametrize("box", [[10, 10, 10.5, 30], [0, 0, 30, 0]])
    def test_degenerate_rejected(self, box):
        with pytest.raises(ValueError):
            roi_extract(torch.zeros(64, 12, 12), box)

    def test_gradient_finite_difference(self):
        z = torch.randn(64, 12, 12, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
        z.requires_grad_(True)
        w = torch.randn(1024, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
        err = relative_gradient_error(lambda: (roi_extract(z, [13.0, 7.0, 61.0, 50.0]) * w).sum(), [z],
                                      per_tensor=40)
        assert err < 1e-4


class TestSupervisedLoss:
    """Nonnegativity, empty-annotation handling and finite differences."""

    def test_nonnegative_and_finite(self, scene):
        loss = supervised_loss(Detector(seed=2), *scene)
        assert torch.isfinite(loss) and loss.item() >= 0

    def test_no_ground_truth_valid(self, scene):
        loss = supervised_loss(Detector(seed=2), scene[0], [])
        assert torch.isfinite(loss) and loss.item() > 0

    def test_gradient_backbone_sum(self, det64, scene):
        img = torch.from_numpy(scene[0].pixels).double()
        err = relative_gradient_error(lambda: backbone_forward(det64, img).sum(),
                                      list(det64.backbone.parameters()))
        assert err < 1e-4

    def test_gradient_supervised(self, det64, scene):
        err = relative_gradient_error(lambda: supervised_loss(det64, *scene), list(det64.parameters()),
                                      pin=[det64])
        assert err < 1e-4

    def test_saturated_logits_drive_loss_to_zero(self):
        """RPN and ROI losses vanish when logits saturate on the right answer."""
        anchors = make_anchors()
        gt = torch.tensor([[24.0, 24.0, 56.0, 56.0]], dtype=torch.float64)
        labels = assign_anchors(anchors, gt)
        deltas = encode_boxes(anchors, gt.expand(len(anchors), 4))
        rois = torch.cat([gt, torch.tensor([[70.0, 70.0, 90.0, 90.0]], dtype=torch.float64)])
        roi_labels = torch.tensor([2, 0])
        losses = []
        for scale in (1.0, 5.0, 20.0, 40.0):
            obj = torch.where(labels == 1, scale, -scale).double()
            r_cls, r_reg = rpn_loss(obj, deltas, anchors, gt)
            logits = torch.full((2, 4), -scale, dtype=torch.float64)
            logits[0, 2] = logits[1, 0] = scale
            h_cls, h_reg = roi_loss(logits, torch.zeros(2, 3, 4, dtype=torch.float64), rois, roi_labels,
                                    gt.expand(2, 4))
            losses.append(float(r_cls + r_reg + h_cls + h_reg))
        assert all(a > b for a, b in zip(losses, losses[1:]))
        assert losses[-1] < 1e-12


class TestPredict:
    """Inference path validity and score threshold monotonicity."""

    def test_blank_image_valid(self):
        dets = predict(Detector(seed=0), np.zeros((3, 96, 96), np.float32))
        for d in dets:
            assert 0 <= d.x and 0 <= d.y and d.x + d.w <= 96 + 1e-6 and d.y + d.h <= 96 + 1e-6
            assert 0 <= d.score <= 1

    def test_threshold_monotone_and_per_class_nms(self, scene):
        det = Detector(seed=6)
        counts = [len(predict(det, scene[0], t)) for t in (0.0, 0.05, 0.2, 0.3, 0.5)]
        assert counts == sorted(counts, reverse=True)
        dets = predict(det, scene[0], 0.0)
        for i, a in enumerate(dets):
            for b in dets[i + 1:]:
                if a.c == b.c:
                    assert box_iou_naive(a.box, b.box) < 0.5
