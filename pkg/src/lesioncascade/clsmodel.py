"""Lesion classifier: output-stride-32 backbone, global average pooling, FC head."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .blocks import Backbone, BackboneSpec, backbone_preset
from .dataio import CLASSES
from .segmodel import model_dtype, to_nchw


@dataclass
class ClsModelConfig:
    backbone: BackboneSpec = field(default_factory=lambda: backbone_preset("mobilenet", 32))
    num_classes: int = 7
    input_size: tuple = (224, 224, 3)
    head_width: int = 0
    dropout: float = 0.0
    class_names: tuple = ()

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneSpec.from_dict(self.backbone)
        self.input_size = tuple(int(v) for v in self.input_size)
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.backbone.output_stride != 32:
            raise ValueError("classification backbone must have output_stride 32")
        if not self.class_names:
            self.class_names = CLASSES[: self.num_classes] if self.num_classes <= len(CLASSES) else \
                tuple(str(i) for i in range(self.num_classes))
        self.class_names = tuple(self.class_names)
        if len(self.class_names) != self.num_classes:
            raise ValueError("class_names length must equal num_classes")

    def to_dict(self) -> dict:
        return {
            "backbone": self.backbone.to_dict(),
            "num_classes": self.num_classes,
            "input_size": list(self.input_size),
            "head_width": self.head_width,
            "dropout": self.dropout,
            "class_names": list(self.class_names),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ClsModelConfig":
        return cls(**data)


class ClsModel(nn.Module):
    def __init__(self, config: ClsModelConfig):
        super().__init__()
        self.config = config
        self.backbone = Backbone(config.backbone)
        ch = self.backbone.out_channels
        layers = []
        if config.dropout > 0:
            layers.append(nn.Dropout(config.dropout))
        if config.head_width:
            layers += [nn.Linear(ch, config.head_width), nn.ReLU()]
            ch = config.head_width
        layers.append(nn.Linear(ch, config.num_classes))
        self.head = nn.Sequential(*layers)

    def features(self, x):
        return self.backbone(x)[0]

    def pool_logits(self, fmap):
        return self.head(fmap.mean(dim=(2, 3)))

    def forward(self, x):
        """NCHW batch -> (N, num_classes) logits."""
        return self.pool_logits(self.features(x))

    def probabilities(self, x):
        return torch.softmax(self(x), dim=1)


def build_cls_model(config: ClsModelConfig, seed: int | None = None) -> ClsModel:
    h, w, _ = config.input_size
    if h % 32 or w % 32:
        raise ValueError(f"classifier input {h}x{w} must be divisible by 32")
    if seed is not None:
        torch.manual_seed(seed)
    return ClsModel(config)


def argmax_label(probs, class_names=CLASSES) -> tuple[str, int]:
    # np.argmax returns the first maximum, i.e. ties go to the lowest index
    idx = int(np.argmax(np.asarray(probs)))
    return class_names[idx], idx


@torch.no_grad()
def predict_proba(model: ClsModel, image) -> np.ndarray:
    """NHWC batch (or one HWC image) -> (N, num_classes) probabilities."""
    x = to_nchw(image, model_dtype(model))
    h, w, c = model.config.input_size
    if tuple(x.shape[1:]) != (c, h, w):
        raise ValueError(f"classifier expects images of size {(h, w, c)}, got {tuple(x.permute(0, 2, 3, 1).shape[1:])}")
    was_training = model.training
    model.eval()
    try:
        probs = model.probabilities(x)
    finally:
        model.train(was_training)
    return probs.cpu().numpy()


def predict_class(model: ClsModel, image) -> tuple[str, np.ndarray]:
    """Label and probability vector for a single image (HWC or 1xHxWxC)."""
    probs = predict_proba(model, image)[0]
    label, _ = argmax_label(probs, model.config.class_names)
    return label, probs
