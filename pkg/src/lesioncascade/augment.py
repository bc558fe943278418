"""Training-time augmentation: rotation, shear, zoom, brightness, flips.

Geometric transforms share one affine map between image and mask. Images
are resampled bilinearly, masks bilinearly then re-thresholded at 0.5.
Borders are filled by reflection.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage


def _range(v) -> tuple[float, float]:
    if isinstance(v, (int, float)):
        return (-float(v), float(v))
    lo, hi = (float(x) for x in v)
    if lo > hi:
        raise ValueError(f"range lower bound {lo} exceeds upper bound {hi}")
    return (lo, hi)


@dataclass
class AugmentConfig:
    rotation_degrees: tuple = (-25.0, 25.0)
    shear_degrees: tuple = (-10.0, 10.0)
    zoom_factor: tuple = (0.9, 1.1)
    brightness_delta: tuple = (-0.1, 0.1)
    horizontal_flip: float = 0.5
    vertical_flip: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.rotation_degrees = _range(self.rotation_degrees)
        self.shear_degrees = _range(self.shear_degrees)
        self.brightness_delta = _range(self.brightness_delta)
        self.zoom_factor = tuple(float(z) for z in self.zoom_factor)
        lo, hi = self.zoom_factor
        if lo > hi or lo <= 0:
            raise ValueError(f"zoom range must be positive and exclude 0, got {self.zoom_factor}")
        for name in ("horizontal_flip", "vertical_flip"):
            p = getattr(self, name)
            if not 0 <= p <= 1:
                raise ValueError(f"{name} probability must be in [0, 1], got {p}")

    @classmethod
    def identity(cls, seed: int = 0) -> "AugmentConfig":
        return cls((0, 0), (0, 0), (1, 1), (0, 0), 0.0, 0.0, seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def sample_seed(global_seed: int, epoch: int, index: int) -> int:
    """Stable per-sample seed; independent of worker scheduling."""
    return int(np.random.SeedSequence([global_seed, epoch, index]).generate_state(1)[0])


@dataclass
class _Draw:
    rotation: float
    shear: float
    zoom: float
    brightness: float
    hflip: bool
    vflip: bool


def _draw(config: AugmentConfig, seed: int) -> _Draw:
    rng = np.random.default_rng(seed)
    return _Draw(
        rotation=float(rng.uniform(*config.rotation_degrees)),
        shear=float(rng.uniform(*config.shear_degrees)),
        zoom=float(rng.uniform(*config.zoom_factor)),
        brightness=float(rng.uniform(*config.brightness_delta)),
        hflip=bool(rng.random() < config.horizontal_flip),
        vflip=bool(rng.random() < config.vertical_flip),
    )


def affine_matrix(rotation_deg: float, shear_deg: float, zoom: float) -> np.ndarray:
    """Forward map on (row, col) offsets from the image centre.

    Rotation is counter-clockwise as displayed (rows grow downward).
    """
    t = math.radians(rotation_deg)
    c, s = math.cos(t), math.sin(t)
    rot = np.array([[c, -s], [s, c]])
    shear = np.array([[1.0, 0.0], [math.tan(math.radians(shear_deg)), 1.0]])
    return zoom * rot @ shear


def _warp(channel: np.ndarray, inverse: np.ndarray, center: np.ndarray) -> np.ndarray:
    offset = center - inverse @ center
    return ndimage.affine_transform(channel, inverse, offset=offset, order=1, mode="reflect")


def _geometric(arr: np.ndarray, d: _Draw) -> np.ndarray:
    """Apply the drawn geometric transform to an HW or HWC array."""
    out = np.asarray(arr, dtype=np.float64)
    fwd = affine_matrix(d.rotation, d.shear, d.zoom)
    if not np.allclose(fwd, np.eye(2), rtol=0, atol=1e-12):
        inverse = np.linalg.inv(fwd)
        center = (np.array(out.shape[:2], dtype=np.float64) - 1) / 2
        if out.ndim == 2:
            out = _warp(out, inverse, center)
        else:
            out = np.stack([_warp(out[..., k], inverse, center) for k in range(out.shape[-1])], axis=-1)
    if d.hflip:
        out = out[:, ::-1]
    if d.vflip:
        out = out[::-1]
    return np.ascontiguousarray(out)


def augment_pair(image: np.ndarray, mask: np.ndarray, config: AugmentConfig, sample_seed: int,
                 value_range: tuple = (0.0, 1.0)):
    """Jointly augment one HWC image and its HW or HW1 binary mask."""
    if image.shape[:2] != mask.shape[:2]:
        raise ValueError(f"image {image.shape[:2]} and mask {mask.shape[:2]} are not aligned")
    d = _draw(config, sample_seed)
    img = _geometric(image, d) + d.brightness
    img = np.clip(img, *value_range).astype(image.dtype, copy=False)
    m = (_geometric(mask, d) >= 0.5).astype(mask.dtype, copy=False)
    return img, m


def augment_image(image: np.ndarray, config: AugmentConfig, sample_seed: int,
                  value_range: tuple = (0.0, 1.0)) -> np.ndarray:
    d = _draw(config, sample_seed)
    img = _geometric(image, d) + d.brightness
    return np.clip(img, *value_range).astype(image.dtype, copy=False)
