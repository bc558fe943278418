"""Deterministic synthetic lesion datasets with exact ground truth.

Each image holds one lesion (disk or ellipse) filled with a sinusoidal
grating. For classification data the grating frequency encodes the class.
Background clutter (decoy lesions with a randomly drawn texture class and
hair-like strokes) is independent of the label; ``distractor_strength``
sets its contrast.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .dataio import CLASSES, write_labels_csv

SKIN = np.array([0.80, 0.62, 0.52])
LESION = np.array([0.42, 0.27, 0.20])
TEXTURE_AMPLITUDE = 0.16
# cycles per pixel, one per class; spaced so neighbouring classes stay separable on small lesions
CLASS_FREQUENCIES = (0.06, 0.10, 0.15, 0.21, 0.28, 0.36, 0.45)
HAM10000_COUNTS = {"AKIEC": 327, "BCC": 514, "BKL": 1099, "DF": 115, "MEL": 1113, "NV": 6705, "VASC": 142}


@dataclass
class SynthConfig:
    n_samples: int = 8
    image_size: tuple = (64, 64)
    lesion_shape: str = "disk"
    texture_classes: int = 7
    background_noise: float = 0.0
    distractor_strength: float = 0.0
    seed: int = 0
    class_counts: list | None = None
    radius_fraction: tuple = (0.15, 0.25)

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        self.radius_fraction = tuple(float(v) for v in self.radius_fraction)
        if self.lesion_shape not in ("disk", "ellipse"):
            raise ValueError(f"lesion_shape must be disk or ellipse, got {self.lesion_shape!r}")
        if not 1 <= self.texture_classes <= len(CLASSES):
            raise ValueError(f"texture_classes must be in 1..{len(CLASSES)}")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        lo, hi = self.radius_fraction
        if not 0 < lo <= hi <= 0.4:
            raise ValueError("radius_fraction must satisfy 0 < lo <= hi <= 0.4 so the lesion fits")
        if self.class_counts is not None:
            self.class_counts = [int(c) for c in self.class_counts]
            if len(self.class_counts) != self.texture_classes:
                raise ValueError("class_counts needs one entry per texture class")
            if sum(self.class_counts) != self.n_samples:
                raise ValueError("class_counts must sum to n_samples")

    @property
    def class_names(self) -> tuple:
        return CLASSES[: self.texture_classes]

    def counts(self) -> list:
        if self.class_counts is not None:
            return list(self.class_counts)
        k = self.texture_classes
        return [self.n_samples // k + (1 if i < self.n_samples % k else 0) for i in range(k)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        d["radius_fraction"] = list(self.radius_fraction)
        return d


def proportional_counts(n: int, reference: dict = HAM10000_COUNTS) -> list:
    """Split n samples across classes in the reference proportions (largest remainder)."""
    total = sum(reference.values())
    exact = [n * reference[c] / total for c in CLASSES]
    counts = [int(math.floor(e)) for e in exact]
    order = sorted(range(len(CLASSES)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def class_frequency(texture_class: int, n_classes: int) -> float:
    """Grating frequency of a class; fewer classes spread over the whole table."""
    if n_classes == 1:
        return CLASS_FREQUENCIES[0]
    step = (len(CLASS_FREQUENCIES) - 1) / (n_classes - 1)
    return CLASS_FREQUENCIES[int(round(texture_class * step))]


@dataclass
class Lesion:
    center: tuple
    radii: tuple  # (row semi-axis, col semi-axis)
    angle: float = 0.0

    def raster(self, shape) -> np.ndarray:
        """Pixel-centre inclusion test; exact ground truth for this lesion."""
        rr, cc = np.mgrid[: shape[0], : shape[1]].astype(np.float64)
        dr, dc = rr - self.center[0], cc - self.center[1]
        ca, sa = math.cos(self.angle), math.sin(self.angle)
        u = ca * dr + sa * dc
        v = -sa * dr + ca * dc
        return ((u / self.radii[0]) ** 2 + (v / self.radii[1]) ** 2 <= 1.0).astype(np.uint8)


@dataclass
class SampleRecord:
    stem: str
    lesion: dict
    texture_class: int
    decoys: list = field(default_factory=list)
    label: str | None = None


def _rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def _place(rng, config: SynthConfig, avoid: list[Lesion]) -> Lesion | None:
    h, w = config.image_size
    lo, hi = config.radius_fraction
    for _ in range(100):
        r = rng.uniform(lo, hi) * min(h, w)
        if config.lesion_shape == "disk":
            radii, angle = (r, r), 0.0
        else:
            radii = (r, r * rng.uniform(0.6, 1.0))
            angle = float(rng.uniform(0, math.pi))
        rmax = max(radii)
        cy = rng.uniform(rmax + 1, h - rmax - 2)
        cx = rng.uniform(rmax + 1, w - rmax - 2)
        if all(math.hypot(cy - a.center[0], cx - a.center[1]) > rmax + max(a.radii) + 2 for a in avoid):
            return Lesion((float(cy), float(cx)), (float(radii[0]), float(radii[1])), angle)
    return None


def _grating(rng, shape, frequency: float) -> np.ndarray:
    theta = rng.uniform(0, math.pi)
    phase = rng.uniform(0, 2 * math.pi)
    rr, cc = np.mgrid[: shape[0], : shape[1]].astype(np.float64)
    return np.sin(2 * math.pi * frequency * (rr * math.cos(theta) + cc * math.sin(theta)) + phase)


def _paint_lesion(img, rng, lesion: Lesion, frequency: float, alpha: float):
    m = lesion.raster(img.shape[:2]).astype(bool)
    tex = LESION[None, :] + TEXTURE_AMPLITUDE * _grating(rng, img.shape[:2], frequency)[m][:, None]
    img[m] = (1 - alpha) * img[m] + alpha * tex
    return m


def _paint_strokes(img, rng, strength: float, n: int = 3):
    h, w = img.shape[:2]
    rr, cc = np.mgrid[:h, :w].astype(np.float64)
    for _ in range(n):
        r0, c0 = rng.uniform(0, h), rng.uniform(0, w)
        t = rng.uniform(0, math.pi)
        dist = np.abs((rr - r0) * math.cos(t) - (cc - c0) * math.sin(t))
        hair = np.clip(1.0 - dist / 0.8, 0, 1) * strength
        img[:] = img * (1 - hair[..., None]) + 0.15 * hair[..., None]


def render_sample(config: SynthConfig, index: int, texture_class: int | None = None):
    """Render sample ``index``; returns (uint8 image, uint8 mask, SampleRecord)."""
    rng = _rng(config.seed, index)
    h, w = config.image_size
    if texture_class is None:
        texture_class = int(rng.integers(config.texture_classes))
    img = np.broadcast_to(SKIN, (h, w, 3)).copy()
    # vignette: label-independent darkening toward the corners
    rr, cc = np.mgrid[:h, :w].astype(np.float64)
    radial = np.hypot((rr - (h - 1) / 2) / h, (cc - (w - 1) / 2) / w)
    img *= (1 - 0.3 * config.distractor_strength * radial ** 2)[..., None]
    lesion = _place(rng, config, [])
    decoys = []
    if config.distractor_strength > 0:
        decoy = _place(rng, config, [lesion])
        if decoy is not None:
            decoy_class = int(rng.integers(config.texture_classes))
            _paint_lesion(img, rng, decoy, class_frequency(decoy_class, config.texture_classes),
                          config.distractor_strength)
            decoys.append({"center": decoy.center, "radii": decoy.radii, "angle": decoy.angle,
                           "texture_class": decoy_class})
        _paint_strokes(img, rng, config.distractor_strength)
    _paint_lesion(img, rng, lesion, class_frequency(texture_class, config.texture_classes), 1.0)
    if config.background_noise > 0:
        img = img + rng.normal(0, config.background_noise, img.shape)
    img8 = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)
    mask = lesion.raster((h, w))
    record = SampleRecord(f"synth_{index:05d}", asdict(lesion), texture_class, decoys)
    return img8, mask, record


def _write(out: Path, stem: str, img8, mask, write_mask: bool = True):
    Image.fromarray(img8).save(out / "images" / f"{stem}.png")
    if write_mask:
        Image.fromarray(mask * 255).save(out / "masks" / f"{stem}.png")


def _prepare(out_dir) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    return out


def generate_seg_dataset(config: SynthConfig, out_dir) -> Path:
    """Write ``images/`` and ``masks/`` plus a ``synth_config.json`` sidecar."""
    out = _prepare(out_dir)
    records = []
    for i in range(config.n_samples):
        img8, mask, rec = render_sample(config, i)
        _write(out, rec.stem, img8, mask)
        records.append(asdict(rec))
    _sidecar(out, "seg", config, records)
    return out


def class_assignment(config: SynthConfig) -> list:
    """Per-sample class index: counts as configured, order shuffled by seed."""
    labels = np.repeat(np.arange(config.texture_classes), config.counts())
    return [int(v) for v in np.random.default_rng(config.seed).permutation(labels)]


def generate_cls_dataset(config: SynthConfig, out_dir) -> Path:
    """Write ``images/``, ``masks/`` (oracle lesion masks) and ``labels.csv``."""
    out = _prepare(out_dir)
    records, rows = [], []
    for i, k in enumerate(class_assignment(config)):
        img8, mask, rec = render_sample(config, i, texture_class=k)
        rec.label = CLASSES[k]
        _write(out, rec.stem, img8, mask)
        rows.append((rec.stem, rec.label))
        records.append(asdict(rec))
    write_labels_csv(out / "labels.csv", rows)
    _sidecar(out, "cls", config, records)
    return out


def _sidecar(out: Path, kind: str, config: SynthConfig, records: list):
    payload = {"kind": kind, "config": config.to_dict(), "samples": records}
    (out / "synth_config.json").write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def read_sidecar(root) -> dict:
    return json.loads((Path(root) / "synth_config.json").read_text())


def render_arrays(config: SynthConfig, labeled: bool = True):
    """In-memory variant: float images in [0,1] (N,H,W,3), masks (N,H,W,1), labels (N,)."""
    classes = class_assignment(config) if labeled else [None] * config.n_samples
    imgs, masks, labels = [], [], []
    for i, k in enumerate(classes):
        img8, mask, rec = render_sample(config, i, texture_class=k)
        imgs.append(img8.astype(np.float32) / 255.0)
        masks.append(mask)
        labels.append(rec.texture_class)
    return np.stack(imgs), np.stack(masks)[..., None], np.array(labels, dtype=np.int64)
