"""Checkpoints: a key=value manifest next to one IDKA tensor archive.

Detector parameters are stored under their plain names, discriminator
tensors under ``disc/`` and DTM weights under ``dtm/``.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from .adversarial import DiscriminatorSet
from .detector import ARCHITECTURE_ID, Detector
from .dtm import DTM
from .synth_domains import parse_manifest
from .tensor_io import read_archive, write_archive

MANIFEST = "manifest.txt"
ARCHIVE = "weights.idka"


class CheckpointError(RuntimeError):
    pass


def manifest_lines(meta: dict) -> str:
    return "".join(f"{k}={v}\n" for k, v in meta.items())


def _to_numpy(state: dict, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy() for k, v in state.items()}


def save_checkpoint(directory, det: Detector | dict, seed: int, step: int,
                    disc: DiscriminatorSet | dict | None = None,
                    dtm: DTM | dict | None = None, dtm_variant: str | None = None,
                    extra: dict | None = None) -> Path:
    """Write ``det`` (and optionally ``disc``/``dtm``) to ``directory``.

    Modules or plain state dicts are both accepted.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    as_state = lambda m: m.state_dict() if isinstance(m, torch.nn.Module) else m  # noqa: E731
    tensors = _to_numpy(as_state(det))
    if disc is not None:
        tensors.update(_to_numpy(as_state(disc), "disc/"))
    if dtm is not None:
        tensors.update(_to_numpy(as_state(dtm), "dtm/"))
        if dtm_variant is None:
            dtm_variant = getattr(dtm, "variant", None)
        if dtm_variant is None:
            raise CheckpointError("a DTM checkpoint needs its variant name")
    meta = {"architecture": ARCHITECTURE_ID, "seed": int(seed), "step": int(step),
            "has_disc": int(disc is not None), "has_dtm": int(dtm is not None)}
    if dtm is not None:
        meta["dtm_variant"] = dtm_variant
    meta.update(extra or {})
    write_archive(d / ARCHIVE, tensors)
    tmp = d / (MANIFEST + ".tmp")
    tmp.write_text(manifest_lines(meta))
    tmp.replace(d / MANIFEST)
    return d


def read_manifest(directory) -> dict[str, str]:
    p = Path(directory) / MANIFEST
    if not p.exists():
        raise CheckpointError(f"no checkpoint manifest in {directory}")
    return parse_manifest(p.read_text())


def _state(tensors: dict, prefix: str) -> dict[str, torch.Tensor]:
    out = {}
    for k, v in tensors.items():
        if prefix and not k.startswith(prefix):
            continue
        if not prefix and "/" in k:
            continue
        out[k[len(prefix):]] = torch.from_numpy(np.array(v))
    return out


def load_checkpoint(directory):
    """Return ``(det, disc_or_None, dtm_or_None, manifest)``."""
    meta = read_manifest(directory)
    if meta.get("architecture") != ARCHITECTURE_ID:
        raise CheckpointError(f"architecture {meta.get('architecture')!r} is not {ARCHITECTURE_ID!r}")
    tensors = read_archive(Path(directory) / ARCHIVE)
    det = Detector()
    det.load_state_dict(_state(tensors, ""))
    disc = g = None
    if meta.get("has_disc") == "1":
        disc = DiscriminatorSet()
        disc.load_state_dict(_state(tensors, "disc/"))
    if meta.get("has_dtm") == "1":
        g = DTM(meta["dtm_variant"])
        g.load_state_dict(_state(tensors, "dtm/"))
        for p in g.parameters():
            p.requires_grad_(False)
    return det, disc, g, meta
