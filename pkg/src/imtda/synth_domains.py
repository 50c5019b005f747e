"""Seeded synthetic detection scenes and photometric target domains.

The source domain is a set of 96x96 scenes with circles (class 0), squares
(class 1) and triangles (class 2) on a low-frequency textured background.
Target domains are photometric transforms of freshly rendered scenes: fog
(blend towards grey), colorshift (per-channel gain + gamma) and noise
(Gaussian noise + bright streaks). Geometry is never touched, so the boxes
of a transformed image are those of the rendered scene.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .evaluation.metrics import iou
from .tensor_io import read_tensor, sha256_file, write_tensor

IMAGE_SIZE = 96
NUM_CLASSES = 3
CLASS_NAMES = ("circle", "square", "triangle")
KINDS = ("source", "fog", "colorshift", "noise")
FOG_LEVEL = 0.6
MAX_PLACEMENT_ATTEMPTS = 100
MAX_OBJECT_IOU = 0.3

DEFAULT_PARAMETERS: dict[str, dict[str, tuple[float, float]]] = {
    "source": {},
    "fog": {"a": (0.4, 0.7)},
    "colorshift": {"gain": (0.6, 1.4), "gamma": (0.7, 1.4)},
    "noise": {"sigma": (0.05, 0.12), "streaks": (5, 15)},
}
# default ids keep domain labels stable across experiments
DEFAULT_DOMAIN_IDS = {"source": 0, "fog": 1, "colorshift": 2, "noise": 3}


class DomainSpecError(ValueError):
    pass


class ChecksumError(RuntimeError):
    pass


@dataclass(frozen=True)
class BoxAnnotation:
    x: float
    y: float
    w: float
    h: float
    c: int

    def __post_init__(self):
        if self.w < 4 or self.h < 4:
            raise ValueError(f"box too small: {self}")
        if self.x < 0 or self.y < 0:
            raise ValueError(f"box outside image: {self}")

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)


@dataclass
class Image:
    pixels: np.ndarray  # (3, H, W) float32 in [0, 1]
    domain_id: int = 0

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.float32)
        if p.ndim != 3 or p.shape[0] != 3:
            raise ValueError(f"expected (3, H, W) pixels, got {p.shape}")
        if not np.all(np.isfinite(p)) or p.min() < 0.0 or p.max() > 1.0:
            raise ValueError("pixel values must be finite and within [0, 1]")
        self.pixels = p

    @property
    def shape(self):
        return self.pixels.shape


@dataclass(frozen=True)
class DomainSpec:
    kind: str
    parameters: Mapping[str, tuple[float, float]] = field(default_factory=dict)
    seed: int = 0
    name: str = ""
    domain_id: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainSpecError(f"unknown domain kind {self.kind!r}")
        params = dict(DEFAULT_PARAMETERS[self.kind])
        for key, rng in dict(self.parameters).items():
            if key not in DEFAULT_PARAMETERS[self.kind]:
                raise DomainSpecError(f"parameter {key!r} not valid for kind {self.kind!r}")
            lo, hi = (float(v) for v in rng)
            params[key] = (lo, hi)
        for key, (lo, hi) in params.items():
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                raise DomainSpecError(f"bad range for {key}: {(lo, hi)}")
            if key == "a" and not (0.0 <= lo and hi <= 1.0):
                raise DomainSpecError("fog blend a must lie in [0, 1]")
            if key in ("gain", "gamma") and lo <= 0:
                raise DomainSpecError(f"{key} must be positive")
            if key in ("sigma", "streaks") and lo < 0:
                raise DomainSpecError(f"{key} must be non-negative")
        object.__setattr__(self, "parameters", params)
        object.__setattr__(self, "seed", int(self.seed))
        if not self.name:
            object.__setattr__(self, "name", self.kind)
        if self.domain_id is None:
            object.__setattr__(self, "domain_id", DEFAULT_DOMAIN_IDS[self.kind])


@dataclass
class DomainDataset:
    """Train/eval split of one domain.

    Train annotations of unlabeled domains are kept private: ``train``
    yields ``(image, None)`` for them. Only the supervised reference
    strategies call :meth:`reveal_train_labels`.
    """

    spec: DomainSpec
    train_images: list[Image]
    eval: list[tuple[Image, list[BoxAnnotation]]]
    labeled: bool
    _train_annotations: list[list[BoxAnnotation]] = field(repr=False, default_factory=list)

    @property
    def name(self) -> str:
        return self.spec.name

    @property
    def train(self) -> list[tuple[Image, list[BoxAnnotation] | None]]:
        if self.labeled:
            return list(zip(self.train_images, self._train_annotations))
        return [(img, None) for img in self.train_images]

    def reveal_train_labels(self) -> list[tuple[Image, list[BoxAnnotation]]]:
        return list(zip(self.train_images, self._train_annotations))


# -- rendering ---------------------------------------------------------------

def _value_noise(rng: np.random.Generator, size: int, cells: int, channels: int = 3) -> np.ndarray:
    grid = rng.uniform(0.0, 1.0, size=(channels, cells, cells))
    pos = (np.arange(size) + 0.5) * (cells - 1) / size
    i0 = np.floor(pos).astype(int)
    t = pos - i0
    t = t * t * (3 - 2 * t)
    i1 = np.minimum(i0 + 1, cells - 1)
    rows = grid[:, i0, :] * (1 - t)[None, :, None] + grid[:, i1, :] * t[None, :, None]
    return rows[:, :, i0] * (1 - t)[None, None, :] + rows[:, :, i1] * t[None, None, :]


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(0.3, 0.7, size=(3, 1, 1))
    tex = 0.7 * (_value_noise(rng, size, 5) - 0.5) + 0.3 * (_value_noise(rng, size, 13) - 0.5)
    return np.clip(base + 0.5 * tex, 0.0, 1.0)


def _shape_mask(cls: int, x: int, y: int, s: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if cls == 0:
        r = s / 2.0
        return (xx - (x + r)) ** 2 + (yy - (y + r)) ** 2 <= r * r
    if cls == 1:
        return (xx >= x) & (xx < x + s) & (yy >= y) & (yy < y + s)
    # isoceles triangle, apex at top centre, base on the bottom edge
    cx = x + s / 2.0
    inside_v = (yy >= y) & (yy <= y + s)
    half = (yy - y) / 2.0
    return inside_v & (np.abs(xx - cx) <= half)


def render_scene(seed: int, num_objects: int, size: int = IMAGE_SIZE
                 ) -> tuple[Image, list[BoxAnnotation]]:
    """Render one labeled scene.

    Objects are resampled until their boxes overlap earlier ones by at most
    IoU 0.3; after 100 failed draws the scene keeps fewer objects.
    """
    if not 1 <= num_objects <= 4:
        raise ValueError("num_objects must be in [1, 4]")
    rng = np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)
    img = _background(rng, size)
    boxes: list[BoxAnnotation] = []
    first_cls = int(rng.integers(NUM_CLASSES))
    attempts = 0
    while len(boxes) < num_objects and attempts < MAX_PLACEMENT_ATTEMPTS:
        attempts += 1
        cls = (first_cls + len(boxes)) % NUM_CLASSES
        s = int(rng.integers(16, 49))
        x = int(rng.integers(0, size - s + 1))
        y = int(rng.integers(0, size - s + 1))
        cand = (x, y, s, s)
        if any(iou(cand, b.box) > MAX_OBJECT_IOU for b in boxes):
            continue
        mask = _shape_mask(cls, x, y, s, size)
        region = img[:, y:y + s, x:x + s].reshape(3, -1).mean(axis=1)
        color = rng.uniform(0.0, 1.0, size=3)
        # keep foreground distinguishable from the local background
        if np.abs(color - region).mean() < 0.25:
            color = np.where(region > 0.5, color * 0.35, 0.65 + 0.35 * color)
        img[:, mask] = color[:, None]
        boxes.append(BoxAnnotation(x, y, s, s, cls))
    return Image(img.astype(np.float32), 0), boxes


# -- domain transforms ---------------------------------------------------------

def _draw(rng: np.random.Generator, rng_range) -> float:
    lo, hi = rng_range
    return float(lo) if lo == hi else float(rng.uniform(lo, hi))


def _streaks(rng: np.random.Generator, out: np.ndarray, count: int) -> None:
    _, h, w = out.shape
    for _ in range(count):
        x0, y0 = rng.uniform(0, w), rng.uniform(0, h)
        angle = rng.uniform(math.pi / 2 - 0.4, math.pi / 2 + 0.4)
        length = rng.uniform(10, 40)
        brightness = rng.uniform(0.85, 1.0)
        t = np.linspace(0.0, length, int(length * 2) + 1)
        xs = np.clip((x0 + t * math.cos(angle)).astype(int), 0, w - 1)
        ys = np.clip((y0 + t * math.sin(angle)).astype(int), 0, h - 1)
        out[:, ys, xs] = np.maximum(out[:, ys, xs], brightness)


def apply_domain_transform(img: Image, spec: DomainSpec, per_image_seed: int) -> Image:
    if spec.kind == "source":
        raise DomainSpecError("source domain has no transform")
    rng = np.random.default_rng(int(per_image_seed) & 0xFFFFFFFFFFFFFFFF)
    p = spec.parameters
    x = img.pixels.astype(np.float64)
    if spec.kind == "fog":
        a = _draw(rng, p["a"])
        out = (1.0 - a) * x + a * FOG_LEVEL
    elif spec.kind == "colorshift":
        gain = np.array([_draw(rng, p["gain"]) for _ in range(3)])
        gamma = _draw(rng, p["gamma"])
        out = np.clip(x * gain[:, None, None], 0.0, 1.0) ** gamma
    else:
        sigma = _draw(rng, p["sigma"])
        lo, hi = p["streaks"]
        count = int(rng.integers(int(lo), int(hi) + 1))
        out = x + rng.normal(0.0, sigma, size=x.shape)
        _streaks(rng, out, count)
    return Image(np.clip(out, 0.0, 1.0).astype(np.float32), spec.domain_id)


# -- datasets --------------------------------------------------------------

def _scene_seeds(spec: DomainSpec, index: int) -> tuple[int, int, int]:
    ss = np.random.SeedSequence([spec.seed & 0xFFFFFFFFFFFFFFFF, index])
    a, b, c = ss.generate_state(3, dtype=np.uint64)
    return int(a), int(b), int(c)


def build_domain_dataset(spec: DomainSpec, n_train: int = 400, n_eval: int = 200) -> DomainDataset:
    if n_train <= 0 or n_eval <= 0:
        raise ValueError("n_train and n_eval must be positive")
    items = []
    for i in range(n_train + n_eval):
        scene_seed, count_seed, tf_seed = _scene_seeds(spec, i)
        n_obj = int(np.random.default_rng(count_seed).integers(1, 5))
        img, boxes = render_scene(scene_seed, n_obj)
        if spec.kind == "source":
            img = Image(img.pixels, spec.domain_id)
        else:
            img = apply_domain_transform(img, spec, tf_seed)
        items.append((img, boxes))
    train = items[:n_train]
    return DomainDataset(
        spec=spec,
        train_images=[im for im, _ in train],
        eval=items[n_train:],
        labeled=spec.kind == "source",
        _train_annotations=[b for _, b in train],
    )


# -- serialization ----------------------------------------------------------

def _write_annotations(path: Path, boxes) -> None:
    path.write_text("".join(f"{b.x:g} {b.y:g} {b.w:g} {b.h:g} {b.c}\n" for b in boxes))


def _read_annotations(path: Path) -> list[BoxAnnotation]:
    out = []
    for line in path.read_text().splitlines():
        if line.strip():
            x, y, w, h, c = line.split()
            out.append(BoxAnnotation(float(x), float(y), float(w), float(h), int(c)))
    return out


def manifest_text(spec: DomainSpec, n_train: int, n_eval: int, labeled: bool) -> str:
    lines = [
        f"kind={spec.kind}",
        f"name={spec.name}",
        f"seed={spec.seed}",
        f"domain_id={spec.domain_id}",
        f"n_train={n_train}",
        f"n_eval={n_eval}",
        f"labeled={'true' if labeled else 'false'}",
    ]
    for key, (lo, hi) in sorted(spec.parameters.items()):
        lines.append(f"param.{key}={lo!r},{hi!r}")
    return "\n".join(lines) + "\n"


def parse_manifest(text: str) -> dict[str, str]:
    out = {}
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"manifest line {ln}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def save_domain_dataset(ds: DomainDataset, directory) -> Path:
    d = Path(directory)
    for split in ("train", "eval"):
        (d / split).mkdir(parents=True, exist_ok=True)
    sums = []
    for split, items in (("train", ds.reveal_train_labels()), ("eval", ds.eval)):
        for i, (img, boxes) in enumerate(items):
            tpath = d / split / f"{i:05d}.idk"
            apath = d / split / f"{i:05d}.txt"
            write_tensor(tpath, img.pixels)
            _write_annotations(apath, boxes)
            for p in (tpath, apath):
                sums.append(f"{sha256_file(p)}  {p.relative_to(d).as_posix()}")
    (d / "manifest.txt").write_text(manifest_text(ds.spec, len(ds.train_images), len(ds.eval), ds.labeled))
    (d / "checksums.txt").write_text("\n".join(sums) + "\n")
    return d


def verify_domain_dir(directory) -> None:
    """Raise :class:`ChecksumError` naming the first file that differs."""
    d = Path(directory)
    sums = d / "checksums.txt"
    if not sums.exists():
        raise ChecksumError(f"{sums}: missing checksum list")
    try:
        lines = sums.read_text().splitlines()
    except UnicodeDecodeError:
        raise ChecksumError(f"{sums}: corrupt checksum list") from None
    for line in lines:
        if not line.strip():
            continue
        parts = line.split(None, 1)
        if len(parts) != 2:
            raise ChecksumError(f"{sums}: corrupt checksum list")
        digest, rel = parts
        p = d / rel
        if not p.exists():
            raise ChecksumError(f"{p}: missing file")
        if sha256_file(p) != digest:
            raise ChecksumError(f"{p}: checksum mismatch")


def spec_from_manifest(m: Mapping[str, str]) -> DomainSpec:
    params = {}
    for k, v in m.items():
        if k.startswith("param."):
            lo, hi = v.split(",")
            params[k[len("param."):]] = (float(lo), float(hi))
    return DomainSpec(kind=m["kind"], parameters=params, seed=int(m["seed"]),
                      name=m.get("name", ""), domain_id=int(m["domain_id"]))


def load_domain_dataset(directory, verify: bool = True) -> DomainDataset:
    d = Path(directory)
    if verify:
        verify_domain_dir(d)
    m = parse_manifest((d / "manifest.txt").read_text())
    spec = spec_from_manifest(m)
    n_train, n_eval = int(m["n_train"]), int(m["n_eval"])

    def load(split, i):
        pix = read_tensor(d / split / f"{i:05d}.idk")
        return Image(pix, spec.domain_id), _read_annotations(d / split / f"{i:05d}.txt")

    train = [load("train", i) for i in range(n_train)]
    evals = [load("eval", i) for i in range(n_eval)]
    return DomainDataset(spec=spec, train_images=[im for im, _ in train], eval=evals,
                         labeled=m["labeled"] == "true",
                         _train_annotations=[b for _, b in train])
