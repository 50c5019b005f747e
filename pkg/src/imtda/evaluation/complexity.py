"""Analytic parameter and FLOP accounting for conv/linear layer lists.

Only convolutions and linear layers are counted; activations, pooling and
ROI sampling are ignored. FLOPs are reported under both conventions:
``macs`` (one multiply-accumulate = 1 op) and ``flops = 2 * macs``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv" or "linear"
    in_features: int
    out_features: int
    kernel: tuple[int, int] = (1, 1)
    stride: int = 1
    padding: int = 0
    bias: bool = True
    rows: int = 1  # linear layers: number of input vectors
    branch: bool = False  # conv consumes the current map but its output is a leaf

    @classmethod
    def conv(cls, m, branch: bool = False) -> "LayerSpec":
        return cls("conv", m.in_channels, m.out_channels, tuple(m.kernel_size),
                   m.stride[0], m.padding[0], m.bias is not None, branch=branch)

    @classmethod
    def linear(cls, m, rows: int = 1) -> "LayerSpec":
        return cls("linear", m.in_features, m.out_features, bias=m.bias is not None, rows=rows)

    @property
    def params(self) -> int:
        kh, kw = self.kernel
        n = self.in_features * self.out_features * (kh * kw if self.kind == "conv" else 1)
        return n + (self.out_features if self.bias else 0)


@dataclass(frozen=True)
class ComplexityReport:
    params: int
    macs: int

    @property
    def flops(self) -> int:
        return 2 * self.macs

    def __add__(self, other: "ComplexityReport") -> "ComplexityReport":
        return ComplexityReport(self.params + other.params, self.macs + other.macs)


def _out_size(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def complexity_report(layers: Iterable[LayerSpec], input_shape: Sequence[int]) -> ComplexityReport:
    """Exact parameter count and MACs for one forward pass.

    ``input_shape`` is ``(C, H, W)`` of the tensor entering the first conv.
    """
    c, h, w = (int(v) for v in input_shape)
    params = macs = 0
    for spec in layers:
        params += spec.params
        if spec.kind == "conv":
            if spec.in_features != c:
                raise ValueError(f"conv expects {spec.in_features} channels, got {c}")
            kh, kw = spec.kernel
            ho = _out_size(h, kh, spec.stride, spec.padding)
            wo = _out_size(w, kw, spec.stride, spec.padding)
            macs += spec.out_features * ho * wo * spec.in_features * kh * kw
            if not spec.branch:
                c, h, w = spec.out_features, ho, wo
        elif spec.kind == "linear":
            macs += spec.rows * spec.in_features * spec.out_features
        else:
            raise ValueError(f"unknown layer kind {spec.kind!r}")
    return ComplexityReport(params, macs)


def model_complexity(model, input_shape: Sequence[int], **describe_kwargs) -> ComplexityReport:
    return complexity_report(model.describe(**describe_kwargs), input_shape)


def strategy_complexity(strategy: str, image_shape: Sequence[int] = (3, 96, 96),
                        dtm_variant: str = "original") -> dict[str, ComplexityReport]:
    """Models resident during training for ``strategy``, one forward each.

    The detector counts once, twice for ``incr_mtda_kd`` (frozen teacher);
    ``mtda_dtm`` adds the DTM. Discriminators run on the backbone map.
    """
    from ..adversarial import DiscriminatorSet
    from ..detector import FEATURE_CHANNELS, STRIDE, Detector
    from ..dtm import DTM

    det = model_complexity(Detector(), image_shape)
    feat = (FEATURE_CHANNELS, image_shape[1] // STRIDE, image_shape[2] // STRIDE)
    parts = {"detector": det}
    if strategy not in ("source_only", "sup_only", "sup_ft", "sup_mixed"):
        parts["discriminators"] = model_complexity(DiscriminatorSet(), feat)
    if strategy == "incr_mtda_kd":
        parts["teacher"] = det
    if strategy == "mtda_dtm":
        parts["dtm"] = model_complexity(DTM(dtm_variant), image_shape)
    parts["total"] = sum(parts.values(), ComplexityReport(0, 0))
    return parts
