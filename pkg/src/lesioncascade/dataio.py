"""Dataset manifests, splitting and normalized batch loading.

Layouts on disk::

    seg:  root/images/<stem>.png|jpg   root/masks/<stem>.png
    cls:  root/images/<image_id>.png|jpg   root/labels.csv  (header image_id,class)
"""
from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

CLASSES = ("AKIEC", "BCC", "BKL", "DF", "MEL", "NV", "VASC")
CLASS_INDEX = {c: i for i, c in enumerate(CLASSES)}
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
MASK_THRESHOLD = 127.5


class DataError(ValueError):
    pass


@dataclass
class SegSample:
    image_path: str
    mask_path: str
    split: str = "train"

    @property
    def stem(self) -> str:
        return Path(self.image_path).stem


@dataclass
class LabeledSample:
    image_path: str
    label: str
    split: str = "train"
    mask_path: str | None = None

    def __post_init__(self):
        if self.label not in CLASS_INDEX:
            raise DataError(f"unknown class {self.label!r}")

    @property
    def stem(self) -> str:
        return Path(self.image_path).stem

    @property
    def label_index(self) -> int:
        return CLASS_INDEX[self.label]


@dataclass
class NormalizationPolicy:
    mode: str = "unit_interval"
    target_size: tuple = (512, 512)

    def __post_init__(self):
        if self.mode not in ("unit_interval", "symmetric_unit"):
            raise ValueError(f"unknown normalization mode {self.mode!r}")
        self.target_size = tuple(int(v) for v in self.target_size)
        if len(self.target_size) != 2 or min(self.target_size) < 1:
            raise ValueError(f"target_size must be two positive ints, got {self.target_size}")

    @property
    def value_range(self) -> tuple[float, float]:
        return (0.0, 1.0) if self.mode == "unit_interval" else (-1.0, 1.0)

    def normalize(self, pixels: np.ndarray) -> np.ndarray:
        x = pixels.astype(np.float32) / np.float32(255.0)
        return x if self.mode == "unit_interval" else x * 2 - 1

    def to_bytes(self, values: np.ndarray) -> np.ndarray:
        x = np.asarray(values, dtype=np.float64)
        if self.mode == "symmetric_unit":
            x = (x + 1) / 2
        return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "target_size": list(self.target_size)}


@dataclass
class DatasetManifest:
    samples: list
    class_counts: dict = field(default_factory=dict)
    seed: int = 0
    split_fraction: float | None = None
    kind: str = "seg"
    policy: dict | None = None
    config_digest: str | None = None

    def __len__(self):
        return len(self.samples)

    def subset(self, split: str) -> "DatasetManifest":
        samples = [s for s in self.samples if s.split == split]
        return DatasetManifest(samples, count_classes(samples), self.seed, self.split_fraction,
                               self.kind, self.policy, self.config_digest)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "samples": [asdict(s) for s in self.samples],
            "class_counts": self.class_counts,
            "seed": self.seed,
            "split_fraction": self.split_fraction,
            "policy": self.policy,
            "config_digest": self.config_digest,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetManifest":
        kind = data.get("kind", "seg")
        sample_cls = SegSample if kind == "seg" else LabeledSample
        return cls(samples=[sample_cls(**s) for s in data["samples"]],
                   class_counts=dict(data.get("class_counts", {})),
                   seed=data.get("seed", 0),
                   split_fraction=data.get("split_fraction"),
                   kind=kind,
                   policy=data.get("policy"),
                   config_digest=data.get("config_digest"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))


def count_classes(samples) -> dict:
    counts = Counter(s.label for s in samples if isinstance(s, LabeledSample))
    return {c: counts[c] for c in CLASSES if counts[c]}


def _image_files(directory: Path) -> dict:
    files = {}
    for p in sorted(directory.iterdir()):
        if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file():
            if p.stem in files:
                raise DataError(f"duplicate image stem {p.stem!r} in {directory}")
            files[p.stem] = p
    return files


def _check_decodable(path: Path) -> None:
    try:
        with Image.open(path) as im:
            im.verify()
    except Exception as exc:
        raise DataError(f"cannot decode {path}: {exc}") from exc


def load_seg_manifest(root_dir, verify: bool = True) -> DatasetManifest:
    root = Path(root_dir)
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir():
        raise DataError(f"no samples found: {img_dir} does not exist")
    images = _image_files(img_dir)
    masks = _image_files(mask_dir) if mask_dir.is_dir() else {}
    if not images:
        raise DataError(f"no samples found in {root}")
    missing = sorted(set(images) - set(masks))
    if missing:
        raise DataError(f"missing mask for stem {missing[0]!r}" +
                        (f" (and {len(missing) - 1} more)" if len(missing) > 1 else ""))
    orphans = sorted(set(masks) - set(images))
    if orphans:
        raise DataError(f"mask without image for stem {orphans[0]!r}")
    samples = []
    for stem in sorted(images):
        if verify:
            _check_decodable(images[stem])
            _check_decodable(masks[stem])
        samples.append(SegSample(str(images[stem]), str(masks[stem])))
    return DatasetManifest(samples, {}, kind="seg")


def load_cls_manifest(root_dir, labels_csv=None, verify: bool = True) -> DatasetManifest:
    root = Path(root_dir)
    labels_csv = Path(labels_csv) if labels_csv is not None else root / "labels.csv"
    images = _image_files(root / "images") if (root / "images").is_dir() else {}
    masks = _image_files(root / "masks") if (root / "masks").is_dir() else {}
    with open(labels_csv, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"image_id", "class"} <= set(reader.fieldnames):
            raise DataError(f"{labels_csv} must have header 'image_id,class'")
        rows = list(reader)
    if not rows:
        raise DataError(f"no samples found in {labels_csv}")
    samples = []
    seen = set()
    for row in rows:
        image_id, label = row["image_id"].strip(), row["class"].strip()
        if label not in CLASS_INDEX:
            raise DataError(f"unknown class {label!r} for image {image_id!r}")
        if image_id in seen:
            raise DataError(f"duplicate image_id {image_id!r} in {labels_csv}")
        seen.add(image_id)
        if image_id not in images:
            raise DataError(f"image {image_id!r} listed in {labels_csv.name} but absent on disk")
        if verify:
            _check_decodable(images[image_id])
        mask = str(masks[image_id]) if image_id in masks else None
        samples.append(LabeledSample(str(images[image_id]), label, mask_path=mask))
    samples.sort(key=lambda s: s.stem)
    return DatasetManifest(samples, count_classes(samples), kind="cls")


def train_count(n: int, train_fraction: float) -> int:
    # tolerance guards products like 0.29 * 100 landing just under an integer
    return int(math.floor(n * train_fraction + 1e-9))


def split(manifest: DatasetManifest, train_fraction: float = 0.8, seed: int = 0,
          stratify: bool | None = None) -> DatasetManifest:
    """Assign each sample to train/test.

    Deterministic in ``(seed, sorted stems)``. Exactly ``floor(N * f)``
    samples land in train. Classification manifests are stratified by class
    unless ``stratify=False``; per-class quotas are floored and the shortfall
    goes to the classes with the largest remainders.
    """
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    samples = sorted(manifest.samples, key=lambda s: s.stem)
    n = len(samples)
    n_train = train_count(n, train_fraction)
    rng = np.random.default_rng(seed)
    if stratify is None:
        stratify = manifest.kind == "cls"
    train_idx = set()
    if stratify:
        groups = {}
        for i, s in enumerate(samples):
            groups.setdefault(s.label, []).append(i)
        quotas = {}
        remainders = []
        for label in CLASSES:
            if label not in groups:
                continue
            exact = len(groups[label]) * train_fraction
            quotas[label] = min(len(groups[label]), int(math.floor(exact + 1e-9)))
            remainders.append((-(exact - quotas[label]), CLASS_INDEX[label], label))
        shortfall = n_train - sum(quotas.values())
        for _, _, label in sorted(remainders)[:shortfall]:
            quotas[label] += 1
        for label in CLASSES:
            if label in groups:
                perm = rng.permutation(len(groups[label]))
                train_idx.update(groups[label][j] for j in perm[: quotas[label]])
    else:
        train_idx.update(int(i) for i in rng.permutation(n)[:n_train])
    out = []
    for i, s in enumerate(samples):
        kw = asdict(s)
        kw["split"] = "train" if i in train_idx else "test"
        out.append(type(s)(**kw))
    return DatasetManifest(out, count_classes(out), seed, train_fraction, manifest.kind,
                           manifest.policy, manifest.config_digest)


def _read_rgb(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except Exception as exc:
        raise DataError(f"cannot decode {path}: {exc}") from exc


def _read_gray(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"))
    except Exception as exc:
        raise DataError(f"cannot decode {path}: {exc}") from exc


def binarize_mask(mask8: np.ndarray) -> np.ndarray:
    return (np.asarray(mask8, dtype=np.float64) > MASK_THRESHOLD).astype(np.uint8)


def resize_image(pixels: np.ndarray, size: tuple) -> np.ndarray:
    """Bilinear resize of an 8-bit HWC image to (height, width)."""
    h, w = size
    if pixels.shape[:2] == (h, w):
        return pixels
    return np.asarray(Image.fromarray(pixels).resize((w, h), Image.BILINEAR))


def resize_mask(mask: np.ndarray, size: tuple) -> np.ndarray:
    """Nearest-neighbour resize of a {0,1} mask."""
    h, w = size
    if mask.shape[:2] == (h, w):
        return mask
    return np.asarray(Image.fromarray(mask).resize((w, h), Image.NEAREST))


def load_image(path, policy: NormalizationPolicy) -> np.ndarray:
    return policy.normalize(resize_image(_read_rgb(path), policy.target_size))


def load_mask(path, size: tuple) -> np.ndarray:
    return resize_mask(binarize_mask(_read_gray(path)), size)


def load_batch(samples, policy: NormalizationPolicy, with_masks: bool | None = None):
    """Decode, resize and normalize samples in order.

    Returns ``images`` (N, H, W, 3) float32, plus ``masks`` (N, H, W, 1)
    uint8 for segmentation samples (or when ``with_masks`` is set and
    labeled samples carry masks).
    """
    samples = list(samples)
    if not samples:
        raise DataError("no samples to load")
    images = np.stack([load_image(s.image_path, policy) for s in samples])
    if with_masks is None:
        with_masks = isinstance(samples[0], SegSample)
    if not with_masks:
        return images
    masks = []
    for s in samples:
        if s.mask_path is None:
            raise DataError(f"sample {s.stem!r} has no mask")
        masks.append(load_mask(s.mask_path, policy.target_size))
    return images, np.stack(masks)[..., None]


def labels_of(samples) -> np.ndarray:
    return np.array([s.label_index for s in samples], dtype=np.int64)


def write_labels_csv(path, rows) -> None:
    """rows: iterable of (image_id, class)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image_id", "class"])
        writer.writerows(rows)
