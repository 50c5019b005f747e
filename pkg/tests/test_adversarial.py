import copy
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from imtda.adversarial import (DiscriminatorSet, NoInstancesWarning, binary_domain_loss,
                               discriminator_accuracy, domain_losses, grl, image_da_loss,
                               instance_da_loss, stda_adapt, total_da_loss)
from imtda.detector import Detector, batch_tensor, supervised_loss
from imtda.synth_domains import DomainSpec, build_domain_dataset
from imtda.training import DAPhase, SupervisedPhase, Schedule, da_objective, run_phase
from gradcheck import relative_gradient_error


@pytest.fixture(scope="module")
def pair():
    src = build_domain_dataset(DomainSpec("source", seed=21), n_train=4, n_eval=2)
    fog = build_domain_dataset(DomainSpec("fog", seed=22), n_train=4, n_eval=2)
    return src, fog


def _zero_logits(disc, which):
    """Force a discriminator to output logit 0 for every input."""
    fc = disc.img.fc if which == "img" else disc.inst.fc2
    with torch.no_grad():
        fc.weight.zero_()
        fc.bias.zero_()


class TestGradientReversal:
    """Identity forward, negated scaled backward."""

    def test_forward_identity_backward_negated(self):
        x = torch.randn(5, dtype=torch.float64, requires_grad=True)
        y = grl(x, 0.3)
        assert torch.equal(y, x)
        g = torch.arange(5, dtype=torch.float64)
        y.backward(g)
        assert torch.allclose(x.grad, -0.3 * g, rtol=0, atol=1e-15)

    @pytest.mark.parametrize("lam", [1.0, 0.5, 0.7])
    def test_backbone_gradient_is_reversed(self, pair, lam):
        src, fog = pair
        det = Detector(seed=1).double()
        disc = DiscriminatorSet(grl_lambda=lam, seed=2).double()
        x = batch_tensor([src.train_images[0], fog.train_images[0]], torch.float64)

        def grads(reverse):
            det.zero_grad(set_to_none=True)
            disc.zero_grad(set_to_none=True)
            z = det.features(x)
            obj, deltas = det.rpn_head(z)
            img, inst, _ = domain_losses(det, disc, z, obj, deltas, [0, 1], "focal", reverse=reverse)
            (img.mean() + inst.mean()).backward()
            return ([p.grad.clone() for p in det.backbone.parameters()],
                    [p.grad.clone() for p in disc.parameters()])

        rev_b, rev_d = grads(True)
        raw_b, raw_d = grads(False)
        for a, b in zip(rev_b, raw_b):
            assert torch.allclose(a, -lam * b, rtol=1e-10, atol=1e-10)
            assert float(b.abs().max()) > 0
        for a, b in zip(rev_d, raw_d):
            assert torch.equal(a, b)


class TestBinaryDomainLoss:
    """Cross-entropy and focal variants on logits."""

    def test_worked_values(self):
        assert binary_domain_loss(0.0, 1, "cross_entropy").item() == pytest.approx(math.log(2), abs=1e-7)
        assert binary_domain_loss(0.0, 1, "focal").item() == pytest.approx(0.25 * math.log(2), abs=1e-7)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-30, 30), st.integers(0, 1))
    def test_focal_gamma_zero_is_cross_entropy(self, logit, d):
        t = torch.tensor(logit, dtype=torch.float64)
        assert binary_domain_loss(t, d, "focal", gamma=0.0).item() == pytest.approx(
            binary_domain_loss(t, d, "cross_entropy").item(), rel=1e-12, abs=1e-15)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-1e4, 1e4), st.integers(0, 1), st.sampled_from(["focal", "cross_entropy"]))
    def test_finite_nonnegative(self, logit, d, kind):
        v = binary_domain_loss(torch.tensor(logit, dtype=torch.float64), d, kind).item()
        assert math.isfinite(v) and v >= 0
        assert v <= -math.log(1e-7) + 1e-9

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            binary_domain_loss(0.0, 0, "hinge")


class TestImageLoss:
    """Image-level adversarial loss."""

    def test_logit_zero_gives_ln2(self, pair):
        src, _ = pair
        disc = DiscriminatorSet(seed=0)
        _zero_logits(disc, "img")
        batch = [(im, 0) for im in src.train_images]
        assert image_da_loss(Detector(), disc, batch, "cross_entropy").item() == pytest.approx(math.log(2), abs=1e-6)

    def test_permutation_invariant(self, pair):
        src, fog = pair
        det, disc = Detector(seed=3), DiscriminatorSet(seed=3)
        batch = [(im, 0) for im in src.train_images[:2]] + [(im, 1) for im in fog.train_images[:2]]
        a = image_da_loss(det, disc, batch).item()
        b = image_da_loss(det, disc, batch[::-1]).item()
        assert a == pytest.approx(b, rel=1e-6)

    def test_empty_and_bad_labels(self, pair):
        with pytest.raises(ValueError):
            image_da_loss(Detector(), DiscriminatorSet(), [])
        with pytest.raises(ValueError):
            image_da_loss(Detector(), DiscriminatorSet(), [(pair[0].train_images[0], 2)])

    def test_step_helps_discriminator_and_opposes_backbone(self, pair):
        src, fog = pair
        det, disc = Detector(seed=4).double(), DiscriminatorSet(seed=4).double()
        batch = [(src.train_images[0], 0), (fog.train_images[0], 1)]
        loss = image_da_loss(det, disc, batch)
        loss.backward()
        w = det.backbone[0].weight
        reversed_grad = w.grad.clone()
        with torch.no_grad():
            for p in disc.img.parameters():
                p -= 0.05 * p.grad
        assert image_da_loss(det, disc, batch).item() < loss.item()
        # same loss without reversal
        det2, disc2 = Detector(seed=4).double(), DiscriminatorSet(seed=4).double()
        x = batch_tensor([src.train_images[0], fog.train_images[0]], torch.float64)
        binary_domain_loss(disc2.img(det2.features(x)), torch.tensor([0.0, 1.0], dtype=torch.float64)).mean().backward()
        plain = det2.backbone[0].weight.grad
        assert float((reversed_grad * plain).sum()) < 0


class TestInstanceLoss:
    """Instance-level adversarial loss over proposals."""

    def test_logit_zero_gives_ln2(self, pair):
        disc = DiscriminatorSet(seed=0)
        _zero_logits(disc, "inst")
        batch = [(pair[1].train_images[0], 1)]
        assert instance_da_loss(Detector(), disc, batch, "cross_entropy").item() == pytest.approx(math.log(2), abs=1e-6)

    def test_zero_proposals(self, pair, monkeypatch):
        det = Detector()
        monkeypatch.setattr(det, "proposals", lambda o, d, m="train": (torch.zeros((0, 4)), torch.zeros(0)))
        with pytest.warns(NoInstancesWarning):
            v = instance_da_loss(det, DiscriminatorSet(), [(pair[0].train_images[0], 0)])
        assert v.item() == 0.0

    def test_duplicated_proposal_counts_twice(self, pair, monkeypatch):
        det, disc = Detector(seed=5).double(), DiscriminatorSet(seed=5).double()
        a = torch.tensor([[8.0, 8.0, 40.0, 40.0]], dtype=torch.float64)
        b = torch.tensor([[50.0, 20.0, 90.0, 70.0]], dtype=torch.float64)
        batch = [(pair[0].train_images[0], 0)]
        values = {}
        for name, boxes in {"a": a, "b": b, "ab": torch.cat([a, b]), "aab": torch.cat([a, a, b])}.items():
            monkeypatch.setattr(det, "proposals", lambda o, d, m="train", bx=boxes: (bx, torch.ones(len(bx))))
            values[name] = instance_da_loss(det, disc, batch).item()
        assert values["ab"] == pytest.approx((values["a"] + values["b"]) / 2, rel=1e-12)
        assert values["aab"] == pytest.approx((2 * values["a"] + values["b"]) / 3, rel=1e-12)


class TestTotalLoss:
    """Weighted sum of supervised and adversarial terms."""

    def test_lambda_zero_is_supervised(self, pair):
        src, fog = pair
        det, disc = Detector(seed=6), DiscriminatorSet(seed=6)
        item = src.reveal_train_labels()[0]
        total = total_da_loss(det, disc, [item], [fog.train_images[0]], lam=0.0)
        assert total.item() == pytest.approx(supervised_loss(det, *item).item(), rel=1e-6)

    def test_derivative_in_lambda(self, pair):
        src, fog = pair
        det, disc = Detector(seed=7).double(), DiscriminatorSet(seed=7).double()
        item = src.reveal_train_labels()[0]
        tgt = [fog.train_images[0]]

        def f(lam):
            return total_da_loss(det, disc, [item], tgt, lam=lam).item()

        h = 1e-5
        slope = (f(1.0 + h) - f(1.0 - h)) / (2 * h)
        da = f(1.0) - f(0.0)
        assert slope == pytest.approx(da, rel=1e-6)
        assert math.isfinite(f(1.0))


class TestFiniteDifferences:
    """Float64 gradient checks of the adversarial objectives.

    The reversal layer makes autograd differ from the forward function on
    purpose, so these checks run with ``grl_lambda = -1`` (identity in both
    directions). The reversal itself is covered by TestGradientReversal.
    """

    @pytest.fixture
    def models(self):
        disc = DiscriminatorSet(seed=8).double()
        disc.grl_lambda = -1.0
        return Detector(seed=8).double(), disc

    def _params(self, det, disc):
        return list(det.parameters()) + list(disc.parameters())

    def test_image_loss(self, pair, models):
        det, disc = models
        batch = [(pair[0].train_images[0], 0), (pair[1].train_images[0], 1)]
        err = relative_gradient_error(lambda: image_da_loss(det, disc, batch), self._params(det, disc), pin=[det])
        assert err < 1e-4

    def test_instance_loss(self, pair, models):
        det, disc = models
        batch = [(pair[0].train_images[0], 0), (pair[1].train_images[0], 1)]
        err = relative_gradient_error(lambda: instance_da_loss(det, disc, batch), self._params(det, disc),
                                      pin=[det])
        assert err < 1e-4

    def test_total_objective(self, pair, models):
        det, disc = models
        img, gts = pair[0].reveal_train_labels()[0]
        src = batch_tensor([img], torch.float64)
        tgt = batch_tensor([pair[1].train_images[0]], torch.float64)
        err = relative_gradient_error(lambda: da_objective(det, disc, src, gts, tgt, lam=1.0),
                                      self._params(det, disc), pin=[det])
        assert err < 1e-4


class TestAdaptation:
    """Short adaptation runs."""

    def test_labeled_target_rejected(self, pair):
        src, _ = pair
        with pytest.raises(ValueError):
            stda_adapt(Detector(), DiscriminatorSet(), src, src, Schedule(1, 0.001, 0.001, 1))

    def test_lambda_zero_matches_supervised_trajectory(self, pair):
        src, fog = pair
        base = Detector(seed=9)
        schedule = Schedule(10, 0.01, 0.001, 7)
        a = copy.deepcopy(base)
        run_phase(DAPhase(det=a, disc=DiscriminatorSet(seed=9), source=src, targets=[fog], lam=0.0, seed=3),
                  schedule)
        b = copy.deepcopy(base)
        run_phase(SupervisedPhase(det=b, pools=[(src, src.reveal_train_labels())], seed=3, step=1), schedule)
        for (n, p), q in zip(a.named_parameters(), b.parameters()):
            assert torch.equal(p, q), n

    def test_inputs_untouched_and_accuracy_defined(self, pair):
        src, fog = pair
        det, disc = Detector(seed=10), DiscriminatorSet(seed=10)
        before = [p.clone() for p in det.parameters()]
        det2, disc2 = stda_adapt(det, disc, src, fog, Schedule(4, 0.001, 0.001, 4))
        assert all(torch.equal(p, q) for p, q in zip(before, det.parameters()))
        assert not all(torch.equal(p, q) for p, q in zip(before, det2.parameters()))
        acc = discriminator_accuracy(det2, disc2, [im for im, _ in src.eval], [im for im, _ in fog.eval])
        assert 0.0 <= acc <= 1.0
        assert np.isfinite(acc)
