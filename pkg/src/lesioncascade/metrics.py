"""Evaluation metrics for masks and labels."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .dataio import CLASSES, CLASS_INDEX


def _as_binary(mask, name):
    m = np.asarray(mask)
    if m.dtype == bool:
        return m
    if not np.isin(m, (0, 1)).all():
        raise ValueError(f"{name} mask is not binary")
    return m.astype(bool)


def _pair(p, g):
    p, g = _as_binary(p, "predicted"), _as_binary(g, "ground-truth")
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    return p, g


def dice_score(p, g) -> float:
    p, g = _pair(p, g)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / total


def iou(p, g) -> float:
    p, g = _pair(p, g)
    union = int(np.logical_or(p, g).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(p, g).sum()) / union


MIOU_CONVENTIONS = ("foreground", "two_class")


def mean_iou(pairs, convention: str = "foreground") -> float:
    """Mean over images of the foreground IoU.

    ``two_class`` instead averages foreground and background IoU per image.
    """
    if convention not in MIOU_CONVENTIONS:
        raise ValueError(f"convention must be one of {MIOU_CONVENTIONS}, got {convention!r}")
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no samples")
    if convention == "foreground":
        return float(np.mean([iou(p, g) for p, g in pairs]))
    scores = []
    for p, g in pairs:
        bg_p, bg_g = (np.asarray(p) == 0).astype(np.uint8), (np.asarray(g) == 0).astype(np.uint8)
        scores.append((iou(p, g) + iou(bg_p, bg_g)) / 2)
    return float(np.mean(scores))


def mean_dice(pairs) -> float:
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no samples")
    return float(np.mean([dice_score(p, g) for p, g in pairs]))


@dataclass
class MetricsReport:
    dice: float | None = None
    miou: float | None = None
    accuracy: float | None = None
    confusion: list | None = None
    n_samples: int = 0
    config_digest: str = ""
    class_names: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def per_class_counts(self) -> dict:
        if self.confusion is None:
            return {}
        return {c: int(sum(row)) for c, row in zip(self.class_names, self.confusion)}

    def to_dict(self) -> dict:
        d = {
            "dice": self.dice,
            "miou": self.miou,
            "accuracy": self.accuracy,
            "confusion": self.confusion,
            "n_samples": self.n_samples,
            "config_digest": self.config_digest,
            "class_names": list(self.class_names),
            "per_class_counts": self.per_class_counts,
        }
        if self.extra:
            d["extra"] = self.extra
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsReport":
        data = {k: v for k, v in data.items() if k != "per_class_counts"}
        return cls(**data)

    def table(self, title: str = "") -> str:
        """Percentages with two decimals, the way results tables usually print them."""
        cols, vals = [], []
        for name, v in (("Dice Score", self.dice), ("mIoU", self.miou), ("Accuracy", self.accuracy)):
            if v is not None:
                cols.append(name)
                vals.append(pct(v))
        widths = [max(len(c), len(v)) for c, v in zip(cols, vals)]
        lines = []
        if title:
            lines.append(title)
        lines.append("  ".join(c.rjust(w) for c, w in zip(cols, widths)))
        lines.append("  ".join(v.rjust(w) for v, w in zip(vals, widths)))
        lines.append(f"n = {self.n_samples}")
        return "\n".join(lines) + "\n"


def pct(value: float) -> str:
    return f"{100.0 * value:.2f}"


def segmentation_report(pairs, config_digest: str = "", miou_convention: str = "foreground") -> MetricsReport:
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no samples")
    report = MetricsReport(dice=mean_dice(pairs), miou=mean_iou(pairs, miou_convention), n_samples=len(pairs),
                           config_digest=config_digest)
    if miou_convention != "foreground":
        report.extra = {"miou_convention": miou_convention}
    return report


def _index(label, class_names):
    if isinstance(label, (int, np.integer)):
        return int(label)
    if class_names is CLASSES:
        return CLASS_INDEX[label]
    return list(class_names).index(label)


def classification_report(preds, truths, class_names=CLASSES, config_digest: str = "") -> MetricsReport:
    preds, truths = list(preds), list(truths)
    if not truths:
        raise ValueError("no samples")
    if len(preds) != len(truths):
        raise ValueError("preds and truths differ in length")
    k = len(class_names)
    confusion = np.zeros((k, k), dtype=np.int64)
    for p, t in zip(preds, truths):
        confusion[_index(t, class_names), _index(p, class_names)] += 1
    n = len(truths)
    return MetricsReport(accuracy=float(np.trace(confusion)) / n, confusion=confusion.tolist(),
                         n_samples=n, config_digest=config_digest, class_names=list(class_names))
