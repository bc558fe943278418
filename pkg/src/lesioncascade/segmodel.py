"""Encoder-decoder lesion segmenter.

An output-stride-16 backbone feeds a decoder that repeatedly upsamples by
two (bilinear), optionally concatenates an encoder feature of matching
stride, and convolves. A 1x1 convolution and sigmoid give the mask
probability at input resolution.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .blocks import Backbone, BackboneSpec, ConvNormAct, backbone_preset

DEFAULT_DECODER_WIDTHS = (128, 64, 48, 32)


@dataclass
class SegModelConfig:
    backbone: BackboneSpec = field(default_factory=lambda: backbone_preset("efficientnet", 16))
    skip_strides: tuple = (4, 8)
    decoder_widths: tuple = DEFAULT_DECODER_WIDTHS
    input_size: tuple = (512, 512, 3)
    decoder_norm: bool = True

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneSpec.from_dict(self.backbone)
        self.skip_strides = tuple(sorted(int(s) for s in self.skip_strides))
        self.decoder_widths = tuple(int(w) for w in self.decoder_widths)
        self.input_size = tuple(int(v) for v in self.input_size)
        if self.backbone.output_stride != 16:
            raise ValueError("segmentation backbone must have output_stride 16")
        n_stages = int(math.log2(self.backbone.output_stride))
        if len(self.decoder_widths) != n_stages:
            raise ValueError(f"decoder needs {n_stages} widths, got {len(self.decoder_widths)}")
        bad = [s for s in self.skip_strides if s not in (2, 4, 8)]
        if bad:
            raise ValueError(f"skip strides must be drawn from {{2, 4, 8}}, got {bad}")

    def to_dict(self) -> dict:
        return {
            "backbone": self.backbone.to_dict(),
            "skip_strides": list(self.skip_strides),
            "decoder_widths": list(self.decoder_widths),
            "input_size": list(self.input_size),
            "decoder_norm": self.decoder_norm,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SegModelConfig":
        return cls(**data)


class SegModel(nn.Module):
    def __init__(self, config: SegModelConfig):
        super().__init__()
        self.config = config
        self.encoder = Backbone(config.backbone)
        taps = self.encoder.feature_channels
        missing = [s for s in config.skip_strides if s not in taps]
        if missing:
            raise ValueError(f"no encoder tap at stride(s) {missing}; available {sorted(taps)}")
        self.up_blocks = nn.ModuleList()
        self.stage_strides = []
        ch = self.encoder.out_channels
        stride = config.backbone.output_stride
        for width in config.decoder_widths:
            stride //= 2
            skip_ch = taps[stride] if stride in config.skip_strides else 0
            self.up_blocks.append(ConvNormAct(ch + skip_ch, width, 3, norm=config.decoder_norm))
            self.stage_strides.append(stride)
            ch = width
        self.head = nn.Conv2d(ch, 1, 1)

    def logits(self, x):
        x, feats = self.encoder(x)
        for block, stride in zip(self.up_blocks, self.stage_strides):
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            if stride in self.config.skip_strides:
                x = torch.cat([x, feats[stride]], dim=1)
            x = block(x)
        return self.head(x)

    def forward(self, x):
        """NCHW image batch -> (N, 1, H, W) lesion probabilities."""
        return torch.sigmoid(self.logits(x))


def build_seg_model(config: SegModelConfig, seed: int | None = None) -> SegModel:
    if seed is not None:
        torch.manual_seed(seed)
    return SegModel(config)


def to_nchw(images, dtype=None) -> torch.Tensor:
    """NHWC numpy/tensor (or a single HWC image) -> NCHW tensor."""
    t = torch.as_tensor(np.ascontiguousarray(images)) if isinstance(images, np.ndarray) else images
    if t.dim() == 3:
        t = t.unsqueeze(0)
    t = t.permute(0, 3, 1, 2).contiguous()
    return t.to(dtype) if dtype is not None else t.float() if not t.is_floating_point() else t


def model_dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def threshold_mask(probs, threshold: float = 0.5) -> np.ndarray:
    """1 where probability >= threshold, else 0 (uint8)."""
    if isinstance(probs, torch.Tensor):
        probs = probs.detach().cpu().numpy()
    return (np.asarray(probs) >= threshold).astype(np.uint8)


@torch.no_grad()
def predict_probs(model: SegModel, image) -> np.ndarray:
    """NHWC image batch -> NHWC (N, H, W, 1) probability map."""
    x = to_nchw(image, model_dtype(model))
    h, w, c = model.config.input_size
    if tuple(x.shape[1:]) != (c, h, w):
        raise ValueError(f"segmenter expects images of size {(h, w, c)}, got {tuple(x.permute(0, 2, 3, 1).shape[1:])}")
    was_training = model.training
    model.eval()
    try:
        probs = model(x)
    finally:
        model.train(was_training)
    return probs.permute(0, 2, 3, 1).cpu().numpy()


def predict_mask(model: SegModel, image, threshold: float = 0.5) -> np.ndarray:
    """NHWC image batch -> NHWC binary mask (uint8)."""
    return threshold_mask(predict_probs(model, image), threshold)
