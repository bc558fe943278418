"""Segment, mask, classify.

The predicted binary mask is multiplied into the image so everything
outside the lesion becomes 0 in normalized space; the masked full frame is
then resized to the classifier's input size.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .clsmodel import ClsModel, argmax_label, predict_proba
from .dataio import (DatasetManifest, LabeledSample, NormalizationPolicy, count_classes, load_image,
                     resize_mask, write_labels_csv, _read_rgb)
from .segmodel import SegModel, predict_mask


@dataclass
class CascadeResult:
    mask: np.ndarray       # (H, W, 1) uint8 at segmenter resolution
    roi_image: np.ndarray  # (H, W, 3) masked image before the classifier resize
    label: str
    probs: np.ndarray


def extract_roi(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """image * mask, broadcasting the mask over channels.

    Accepts HWC/NHWC images with HW, HW1, NHW or NHW1 masks.
    """
    image = np.asarray(image)
    mask = np.asarray(mask)
    if mask.ndim == image.ndim - 1:
        mask = mask[..., None]
    if mask.shape[:-1] != image.shape[:-1] or mask.shape[-1] != 1:
        raise ValueError(f"mask shape {mask.shape} does not match image {image.shape}")
    return (image * (mask != 0)).astype(image.dtype, copy=False)


def bbox_crop(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Crop an HWC image to the bounding box of a nonempty mask (whole frame if empty)."""
    m = np.asarray(mask).reshape(mask.shape[0], mask.shape[1]) != 0
    if not m.any():
        return image
    rows, cols = np.flatnonzero(m.any(1)), np.flatnonzero(m.any(0))
    return image[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]


def resize_float(image: np.ndarray, size: tuple) -> np.ndarray:
    """Bilinear resize of a float HWC image to (height, width)."""
    h, w = size
    if image.shape[:2] == (h, w):
        return image
    t = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))[None].double()
    out = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0).numpy().astype(image.dtype)


def cascade_infer(seg_model: SegModel, cls_model: ClsModel, image: np.ndarray, threshold: float = 0.5,
                  crop: bool = False) -> CascadeResult:
    """Run both stages on one HWC (or 1xHxWxC) image sized for the segmenter."""
    img = image[0] if image.ndim == 4 else image
    mask = predict_mask(seg_model, img[None], threshold)[0]
    roi = extract_roi(img, mask)
    src = bbox_crop(roi, mask) if crop else roi
    h, w, _ = cls_model.config.input_size
    probs = predict_proba(cls_model, resize_float(src, (h, w))[None])[0]
    label, _ = argmax_label(probs, cls_model.config.class_names)
    return CascadeResult(mask, roi, label, probs)


def roi_fill_byte(policy: NormalizationPolicy) -> int:
    """8-bit value whose normalized value is closest to 0."""
    return int(policy.to_bytes(np.array([0.0]))[0])


def batch_extract_roi(seg_model: SegModel, manifest: DatasetManifest, out_dir,
                      policy: NormalizationPolicy | None = None, threshold: float = 0.5,
                      config_digest: str = "") -> DatasetManifest:
    """Write a masked copy of every image and a matching labels.csv.

    Masks are predicted at the segmenter's input size, resized back to each
    image's native size (nearest neighbour) and applied to the original
    pixels. Output order follows the input manifest.
    """
    h, w, _ = seg_model.config.input_size
    policy = policy or NormalizationPolicy("unit_interval", (h, w))
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    fill = roi_fill_byte(policy)
    samples, rows = [], []
    for s in manifest.samples:
        try:
            x = load_image(s.image_path, policy)
            mask = predict_mask(seg_model, x[None], threshold)[0, ..., 0]
            raw = _read_rgb(s.image_path)
            native = resize_mask(mask, raw.shape[:2]).astype(bool)
            roi = np.where(native[..., None], raw, np.uint8(fill)).astype(np.uint8)
            dest = out / "images" / f"{Path(s.image_path).stem}.png"
            Image.fromarray(roi).save(dest)
        except OSError as exc:
            raise OSError(f"ROI extraction failed for {s.image_path}: {exc}") from exc
        samples.append(LabeledSample(str(dest), s.label, s.split))
        rows.append((dest.stem, s.label))
    write_labels_csv(out / "labels.csv", rows)
    result = DatasetManifest(samples, count_classes(samples), manifest.seed, manifest.split_fraction,
                             "cls", policy.to_dict(), config_digest)
    result.save(out / "manifest.json")
    return result
