"""Training objectives.

Rank-4 probability maps (N, C, H, W) are reduced per sample and then
averaged over the batch; anything else is treated as one sample.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .dataio import CLASS_INDEX

CLIP = 1e-7


@dataclass
class LossValue:
    total: torch.Tensor
    components: dict = field(default_factory=dict)

    def item(self) -> float:
        return float(self.total.detach())

    def as_floats(self) -> dict:
        return {k: float(v) for k, v in self.components.items()}


def _check_shapes(p, g):
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: prediction {tuple(p.shape)} vs target {tuple(g.shape)}")


def _per_sample(t: torch.Tensor) -> torch.Tensor:
    return t.reshape(t.shape[0], -1) if t.dim() == 4 else t.reshape(1, -1)


def dice_loss(p: torch.Tensor, g: torch.Tensor, epsilon: float = 1.0) -> torch.Tensor:
    """1 - (2 sum(P G) + eps) / (sum P + sum G + eps)."""
    _check_shapes(p, g)
    p2, g2 = _per_sample(p), _per_sample(g).to(p.dtype)
    inter = (p2 * g2).sum(dim=1)
    denom = p2.sum(dim=1) + g2.sum(dim=1)
    return (1 - (2 * inter + epsilon) / (denom + epsilon)).mean()


def binary_cross_entropy(p: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    _check_shapes(p, g)
    g = g.to(p.dtype)
    pc = p.clamp(CLIP, 1 - CLIP)
    return -(g * torch.log(pc) + (1 - g) * torch.log(1 - pc)).mean()


def seg_loss(p: torch.Tensor, g: torch.Tensor, epsilon: float = 1.0) -> LossValue:
    bce = binary_cross_entropy(p, g)
    dice = dice_loss(p, g, epsilon)
    return LossValue(bce + dice, {"bce": bce.detach(), "dice": dice.detach()})


def categorical_cross_entropy(probs: torch.Tensor, label, num_classes: int | None = None) -> torch.Tensor:
    """-ln probs[label], averaged over a batch when ``probs`` is (N, K)."""
    probs2 = probs.unsqueeze(0) if probs.dim() == 1 else probs
    k = probs2.shape[1]
    if num_classes is not None and k != num_classes:
        raise ValueError(f"probability vector has length {k}, expected {num_classes}")
    if isinstance(label, str):
        label = CLASS_INDEX[label]
    idx = torch.as_tensor(label, dtype=torch.long).reshape(-1)
    if idx.numel() != probs2.shape[0]:
        raise ValueError("one label per probability vector required")
    if (idx < 0).any() or (idx >= k).any():
        raise ValueError(f"label index out of range for {k} classes")
    picked = probs2.gather(1, idx[:, None]).squeeze(1)
    return -torch.log(picked.clamp(CLIP, 1.0)).mean()


def cls_loss(logits: torch.Tensor, labels, num_classes: int | None = None) -> LossValue:
    ce = categorical_cross_entropy(torch.softmax(logits, dim=1), labels, num_classes)
    return LossValue(ce, {"ce": ce.detach()})

