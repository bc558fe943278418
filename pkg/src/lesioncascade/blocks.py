"""Backbone building blocks and the backbone builder.

All modules here take and return NCHW tensors. Five block families are
available: ``plain`` (U-Net style double conv, max-pool downsampling),
``residual``, ``dsc`` (depthwise separable), ``dsc_residual`` (Xception
style) and ``mbconv_se`` (inverted bottleneck with squeeze-and-excitation).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
from torch import nn

FAMILIES = ("plain", "residual", "dsc", "dsc_residual", "mbconv_se")


@dataclass
class BlockSpec:
    family: str
    in_channels: int
    out_channels: int
    stride: int = 1
    kernel: int = 3
    expansion: float = 6.0
    se_ratio: float = 0.25
    norm: bool = True
    depth: int = 2

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown block family {self.family!r}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.expansion < 1:
            raise ValueError(f"expansion must be >= 1, got {self.expansion}")
        if not 0 < self.se_ratio <= 1:
            raise ValueError(f"se_ratio must be in (0, 1], got {self.se_ratio}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "BlockSpec":
        return cls(**data)


def conv_param_count(kernel: int, in_channels: int, out_channels: int) -> int:
    """Weights of a bias-free standard convolution."""
    return kernel * kernel * in_channels * out_channels


def dsc_param_count(kernel: int, in_channels: int, out_channels: int) -> int:
    """Weights of a bias-free depthwise + pointwise pair."""
    return kernel * kernel * in_channels + in_channels * out_channels


def conv_weight_count(module: nn.Module) -> int:
    """Number of convolution weights (biases and norm parameters excluded)."""
    return sum(m.weight.numel() for m in module.modules() if isinstance(m, nn.Conv2d))


def _norm(channels: int, enabled: bool) -> nn.Module:
    return nn.BatchNorm2d(channels) if enabled else nn.Identity()


class ConvNormAct(nn.Sequential):
    def __init__(self, in_ch, out_ch, kernel=3, stride=1, groups=1, norm=True, act=nn.ReLU):
        layers = [
            nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=kernel // 2, groups=groups, bias=not norm),
            _norm(out_ch, norm),
        ]
        if act is not None:
            layers.append(act())
        super().__init__(*layers)


class SeparableConv(nn.Module):
    """Depthwise k x k per channel, then pointwise 1 x 1. Stride lives in the depthwise step."""

    def __init__(self, in_ch, out_ch, kernel=3, stride=1, norm=True, act=nn.ReLU):
        super().__init__()
        self.depthwise = nn.Conv2d(in_ch, in_ch, kernel, stride=stride, padding=kernel // 2,
                                   groups=in_ch, bias=False)
        self.pointwise = nn.Conv2d(in_ch, out_ch, 1, bias=not norm)
        self.norm = _norm(out_ch, norm)
        self.act = act() if act is not None else nn.Identity()

    def forward(self, x):
        return self.act(self.norm(self.pointwise(self.depthwise(x))))


class Shortcut(nn.Module):
    """Identity when shapes agree, otherwise a strided 1 x 1 projection."""

    def __init__(self, in_ch, out_ch, stride, norm=True):
        super().__init__()
        if stride == 1 and in_ch == out_ch:
            self.proj = None
        else:
            self.proj = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=not norm),
                _norm(out_ch, norm),
            )

    @property
    def is_identity(self) -> bool:
        return self.proj is None

    def forward(self, x):
        return x if self.proj is None else self.proj(x)


class _Block(nn.Module):
    def __init__(self, spec: BlockSpec):
        super().__init__()
        self.spec = spec

    def _check(self, x):
        if x.dim() != 4 or x.shape[1] != self.spec.in_channels:
            raise ValueError(
                f"{self.spec.family} block expects {self.spec.in_channels} input channels, "
                f"got tensor of shape {tuple(x.shape)}"
            )


class PlainBlock(_Block):
    """U-Net encoder unit: optional 2x2 max-pool, then ``depth`` conv-norm-ReLU layers."""

    def __init__(self, spec: BlockSpec):
        super().__init__(spec)
        self.pool = nn.MaxPool2d(2, ceil_mode=True) if spec.stride == 2 else nn.Identity()
        layers = []
        ch = spec.in_channels
        for _ in range(spec.depth):
            layers.append(ConvNormAct(ch, spec.out_channels, spec.kernel, norm=spec.norm))
            ch = spec.out_channels
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        self._check(x)
        return self.body(self.pool(x))


class ResidualBlock(_Block):
    """Stacked k x k convolutions with an additive shortcut.

    The sum is returned without a trailing activation so a zeroed residual
    branch leaves the input untouched.
    """

    def __init__(self, spec: BlockSpec):
        super().__init__(spec)
        layers = []
        ch = spec.in_channels
        for i in range(spec.depth):
            last = i == spec.depth - 1
            layers.append(ConvNormAct(ch, spec.out_channels, spec.kernel,
                                      stride=spec.stride if i == 0 else 1,
                                      norm=spec.norm, act=None if last else nn.ReLU))
            ch = spec.out_channels
        self.branch = nn.Sequential(*layers)
        self.shortcut = Shortcut(spec.in_channels, spec.out_channels, spec.stride, spec.norm)

    def forward(self, x):
        self._check(x)
        return self.branch(x) + self.shortcut(x)


class DSCBlock(_Block):
    """A single depthwise separable layer."""

    def __init__(self, spec: BlockSpec):
        super().__init__(spec)
        self.conv = SeparableConv(spec.in_channels, spec.out_channels, spec.kernel,
                                  stride=spec.stride, norm=spec.norm)

    def forward(self, x):
        self._check(x)
        return self.conv(x)


class DSCResidualBlock(_Block):
    """``depth`` separable layers plus shortcut, as in Xception's middle flow."""

    def __init__(self, spec: BlockSpec):
        super().__init__(spec)
        layers = []
        ch = spec.in_channels
        for i in range(spec.depth):
            last = i == spec.depth - 1
            layers.append(SeparableConv(ch, spec.out_channels, spec.kernel,
                                        stride=spec.stride if i == 0 else 1,
                                        norm=spec.norm, act=None if last else nn.ReLU))
            ch = spec.out_channels
        self.branch = nn.Sequential(*layers)
        self.shortcut = Shortcut(spec.in_channels, spec.out_channels, spec.stride, spec.norm)

    def forward(self, x):
        self._check(x)
        return self.branch(x) + self.shortcut(x)


def se_width(channels: int, se_ratio: float) -> int:
    # round half up; Python's round() is banker's rounding
    return max(1, int(math.floor(channels * se_ratio + 0.5)))


class SqueezeExcite(nn.Module):
    """Channel gating: GAP -> reduce FC -> SiLU -> expand FC -> sigmoid, then rescale ``x``."""

    def __init__(self, channels: int, se_ratio: float = 0.25):
        super().__init__()
        self.channels = channels
        self.reduced = se_width(channels, se_ratio)
        self.reduce = nn.Conv2d(channels, self.reduced, 1)
        self.act = nn.SiLU()
        self.expand = nn.Conv2d(self.reduced, channels, 1)

    def scale(self, x):
        s = x.mean(dim=(2, 3), keepdim=True)
        return torch.sigmoid(self.expand(self.act(self.reduce(s))))

    def forward(self, x):
        return x * self.scale(x)


class MBConvBlock(_Block):
    def __init__(self, spec: BlockSpec):
        super().__init__(spec)
        hidden = int(round(spec.in_channels * spec.expansion))
        self.hidden = hidden
        if hidden != spec.in_channels:
            self.expand = ConvNormAct(spec.in_channels, hidden, 1, norm=spec.norm, act=nn.SiLU)
        else:
            self.expand = nn.Identity()
        self.depthwise = ConvNormAct(hidden, hidden, spec.kernel, stride=spec.stride,
                                     groups=hidden, norm=spec.norm, act=nn.SiLU)
        self.se = SqueezeExcite(hidden, spec.se_ratio)
        self.project = ConvNormAct(hidden, spec.out_channels, 1, norm=spec.norm, act=None)
        self.use_residual = spec.stride == 1 and spec.in_channels == spec.out_channels

    def forward(self, x):
        self._check(x)
        out = self.project(self.se(self.depthwise(self.expand(x))))
        if self.use_residual:
            out = out + x
        return out


_BLOCKS = {
    "plain": PlainBlock,
    "residual": ResidualBlock,
    "dsc": DSCBlock,
    "dsc_residual": DSCResidualBlock,
    "mbconv_se": MBConvBlock,
}


def make_block(spec: BlockSpec) -> nn.Module:
    return _BLOCKS[spec.family](spec)


def residual_block(x, spec: BlockSpec):
    return make_block(BlockSpec(**{**spec.to_dict(), "family": "residual"})).to(x.dtype)(x)


def dsc_block(x, spec: BlockSpec):
    return make_block(BlockSpec(**{**spec.to_dict(), "family": "dsc"})).to(x.dtype)(x)


def dsc_residual_block(x, spec: BlockSpec):
    return make_block(BlockSpec(**{**spec.to_dict(), "family": "dsc_residual"})).to(x.dtype)(x)


def mbconv_block(x, spec: BlockSpec):
    return make_block(BlockSpec(**{**spec.to_dict(), "family": "mbconv_se"})).to(x.dtype)(x)


def squeeze_excite(x, se_ratio: float = 0.25):
    return SqueezeExcite(x.shape[1], se_ratio).to(x.dtype)(x)


@dataclass
class BackboneSpec:
    stem: BlockSpec
    stages: list = field(default_factory=list)  # [(BlockSpec, repeat), ...]
    output_stride: int = 16

    def __post_init__(self):
        self.stages = [(s if isinstance(s, BlockSpec) else BlockSpec.from_dict(s), int(r))
                       for s, r in self.stages]
        self.validate()

    def validate(self):
        if self.output_stride not in (16, 32):
            raise ValueError(f"output_stride must be 16 or 32, got {self.output_stride}")
        product = self.stem.stride
        width = self.stem.out_channels
        for spec, repeat in self.stages:
            if repeat < 1:
                raise ValueError("stage repeat count must be >= 1")
            if spec.in_channels != width:
                raise ValueError(
                    f"stage expects {spec.in_channels} input channels but previous stage yields {width}"
                )
            if spec.out_channels < width:
                raise ValueError("channel widths must be non-decreasing across stages")
            product *= spec.stride
            width = spec.out_channels
        if product != self.output_stride:
            raise ValueError(
                f"product of strides is {product}, inconsistent with output_stride {self.output_stride}"
            )

    def to_dict(self) -> dict:
        return {
            "stem": self.stem.to_dict(),
            "stages": [[s.to_dict(), r] for s, r in self.stages],
            "output_stride": self.output_stride,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BackboneSpec":
        return cls(stem=BlockSpec.from_dict(data["stem"]),
                   stages=[(BlockSpec.from_dict(s), r) for s, r in data["stages"]],
                   output_stride=data["output_stride"])


class Backbone(nn.Module):
    """Runs a BackboneSpec; ``forward`` returns ``(final, {stride: feature})``.

    The dict holds the last feature map produced at each cumulative stride,
    so strides 2, 4 and 8 are the skip candidates for a decoder.
    """

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        stem = spec.stem
        if stem.family == "plain":
            self.stem = make_block(stem)
        else:
            act = nn.SiLU if stem.family == "mbconv_se" else nn.ReLU
            self.stem = ConvNormAct(stem.in_channels, stem.out_channels, stem.kernel,
                                    stride=stem.stride, norm=stem.norm, act=act)
        self.stages = nn.ModuleList()
        self.stage_strides = []
        stride = stem.stride
        self.feature_channels = {stride: stem.out_channels}
        for block, repeat in spec.stages:
            layers = [make_block(block)]
            for _ in range(repeat - 1):
                layers.append(make_block(BlockSpec(**{**block.to_dict(), "in_channels": block.out_channels,
                                                      "stride": 1})))
            self.stages.append(nn.Sequential(*layers))
            stride *= block.stride
            self.stage_strides.append(stride)
            self.feature_channels[stride] = block.out_channels
        self.output_stride = spec.output_stride
        self.in_channels = stem.in_channels
        self.out_channels = self.feature_channels[stride]

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"backbone expects NCHW input with {self.in_channels} channels, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % self.output_stride or w % self.output_stride:
            raise ValueError(f"input {h}x{w} is not divisible by output stride {self.output_stride}")
        x = self.stem(x)
        feats = {self.spec.stem.stride: x}
        for stage, stride in zip(self.stages, self.stage_strides):
            x = stage(x)
            feats[stride] = x
        return x, feats


def build_backbone(spec: BackboneSpec) -> Backbone:
    return Backbone(spec)


# family name -> (stem family, stage block family)
REGISTRY = {
    "unet": ("plain", "plain"),
    "resnet": ("residual", "residual"),
    "mobilenet": ("dsc", "dsc"),
    "xception": ("dsc_residual", "dsc_residual"),
    "efficientnet": ("mbconv_se", "mbconv_se"),
    "efficientnet_b4": ("mbconv_se", "mbconv_se"),
    "efficientnet_b7": ("mbconv_se", "mbconv_se"),
}

# compound scaling (width, depth) relative to the plain efficientnet preset
SCALING = {"efficientnet_b4": (1.4, 1.8), "efficientnet_b7": (2.0, 3.1)}


def backbone_preset(name: str, output_stride: int = 16, base_width: int = 32, max_width: int = 256,
                    repeats: int = 1, in_channels: int = 3, norm: bool = True, **block_kw) -> BackboneSpec:
    """Default desk-scale backbone for a named family.

    Widths start at ``base_width`` and double with every downsample, capped
    at ``max_width``.
    """
    if name not in REGISTRY:
        raise ValueError(f"unknown backbone family {name!r}; choose from {sorted(REGISTRY)}")
    stem_family, family = REGISTRY[name]
    if name in SCALING:
        w, d = SCALING[name]
        base_width, max_width = int(round(base_width * w)), int(round(max_width * w))
        repeats = math.ceil(repeats * d)
    n_down = int(math.log2(output_stride))
    # U-Net keeps a full-resolution stem; the others downsample immediately
    stem_stride = 1 if name == "unet" else 2
    stem = BlockSpec(stem_family, in_channels, base_width, stride=stem_stride, norm=norm, **block_kw)
    stages = []
    width = base_width
    if name != "unet":
        n_down -= 1
    if name.startswith("efficientnet"):
        # MBConv stages open with an expansion-1 block at stride 1
        first = {**block_kw, "expansion": 1.0}
        stages.append((BlockSpec(family, width, width, 1, norm=norm, **first), 1))
    for _ in range(n_down):
        nxt = min(width * 2, max_width)
        stages.append((BlockSpec(family, width, nxt, 2, norm=norm, **block_kw), repeats))
        width = nxt
    return BackboneSpec(stem=stem, stages=stages, output_stride=output_stride)
