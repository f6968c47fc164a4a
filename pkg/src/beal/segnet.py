"""Encoder-decoder segmentation network with boundary and mask branches.

Inverted-residual encoder -> ASPP -> low-level fusion decoder -> boundary
branch (three convolutions, sigmoid) -> mask branch (one convolution over the
decoder features concatenated with the boundary probability). Both heads are
upsampled bilinearly to the input size.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

BN_MOMENTUM = 0.1


def _make_divisible(v: float, divisor: int = 8) -> int:
    new_v = max(divisor, int(v + divisor / 2) // divisor * divisor)
    if new_v < 0.9 * v:
        new_v += divisor
    return new_v


@dataclass
class SegNetConfig:
    crop_size: int = 128
    tiny_mode: bool = True
    encoder_width_multiplier: float | None = None
    encoder_depth: int | None = None
    aspp_rates: tuple[int, ...] | None = None
    boundary_branch_channels: tuple[int, ...] | None = None
    decoder_channels: int | None = None
    use_boundary: bool = True

    def __post_init__(self):
        tiny = self.tiny_mode
        if self.encoder_width_multiplier is None:
            self.encoder_width_multiplier = 0.25 if tiny else 1.0
        if self.encoder_depth is None:
            self.encoder_depth = 3 if tiny else 4
        if self.aspp_rates is None:
            full = (1, 6, 12, 18)
            self.aspp_rates = tuple(max(1, round(r / 4)) for r in full) if tiny else full
        if self.boundary_branch_channels is None:
            self.boundary_branch_channels = (32, 32, 1) if tiny else (256, 256, 1)
        if self.decoder_channels is None:
            self.decoder_channels = 32 if tiny else 256
        self.aspp_rates = tuple(int(r) for r in self.aspp_rates)
        self.boundary_branch_channels = tuple(int(c) for c in self.boundary_branch_channels)
        self.validate()

    def validate(self) -> None:
        if self.encoder_depth < 2 or self.encoder_depth > 5:
            raise ValueError("encoder_depth must lie in [2, 5]")
        if not self.aspp_rates or any(b <= a for a, b in zip(self.aspp_rates, self.aspp_rates[1:])):
            raise ValueError(f"aspp_rates must be nonempty and strictly increasing: {self.aspp_rates}")
        if len(self.boundary_branch_channels) != 3 or self.boundary_branch_channels[-1] != 1:
            raise ValueError("boundary_branch_channels must have three entries ending in 1")
        if self.encoder_width_multiplier <= 0 or self.decoder_channels < 1:
            raise ValueError("width multiplier and decoder_channels must be positive")
        if self.crop_size % self.stride:
            raise ValueError(f"crop_size {self.crop_size} is not divisible by the encoder stride {self.stride}")

    @property
    def stride(self) -> int:
        return 2 ** self.encoder_depth

    def to_dict(self) -> dict:
        d = asdict(self)
        d["aspp_rates"] = list(self.aspp_rates)
        d["boundary_branch_channels"] = list(self.boundary_branch_channels)
        return d


class SegOutput(NamedTuple):
    boundary: torch.Tensor | None  # (B, 1, H, W), sigmoid
    mask_prob: torch.Tensor  # (B, 2, H, W), channel 0 disc, channel 1 cup
    mask_logits: torch.Tensor


def conv_bn_relu(cin, cout, k=3, stride=1, dilation=1, groups=1, act=nn.ReLU):
    pad = dilation * (k - 1) // 2
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, stride, pad, dilation=dilation, groups=groups, bias=False),
        nn.BatchNorm2d(cout, momentum=BN_MOMENTUM),
        act(),
    )


class InvertedResidual(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int, expand: int):
        super().__init__()
        hidden = cin * expand
        self.use_res = stride == 1 and cin == cout
        layers = []
        if expand != 1:
            layers.append(conv_bn_relu(cin, hidden, 1, act=nn.ReLU6))
        layers += [
            conv_bn_relu(hidden, hidden, 3, stride, groups=hidden, act=nn.ReLU6),
            nn.Conv2d(hidden, cout, 1, bias=False),
            nn.BatchNorm2d(cout, momentum=BN_MOMENTUM),
        ]
        self.conv = nn.Sequential(*layers)

    def forward(self, x):
        return x + self.conv(x) if self.use_res else self.conv(x)


# (expand, channels, repeats) of the stride-2 stages following the stem
_DOWN_STAGES = [(6, 24, 2), (6, 32, 3), (6, 64, 4), (6, 160, 3)]


class Encoder(nn.Module):
    """Inverted-residual stack; returns (low-level features at stride 4, high-level features)."""

    def __init__(self, width: float, depth: int):
        super().__init__()
        c = lambda n: _make_divisible(n * width)  # noqa: E731
        self.stem = nn.Sequential(conv_bn_relu(3, c(32), 3, 2, act=nn.ReLU6), InvertedResidual(c(32), c(16), 1, 1))
        cin = c(16)
        stages = []
        for expand, ch, n in _DOWN_STAGES[: depth - 1]:
            blocks = []
            for i in range(n):
                blocks.append(InvertedResidual(cin, c(ch), 2 if i == 0 else 1, expand))
                cin = c(ch)
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.ModuleList(stages)
        self.tail = InvertedResidual(cin, c(320), 1, 6)
        self.low_channels = c(_DOWN_STAGES[0][1])
        self.high_channels = c(320)

    def forward(self, x):
        x = self.stem(x)
        low = None
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i == 0:
                low = x
        return low, self.tail(x)


class ASPP(nn.Module):
    def __init__(self, cin: int, cout: int, rates):
        super().__init__()
        self.branches = nn.ModuleList(
            conv_bn_relu(cin, cout, 1) if r == 1 else conv_bn_relu(cin, cout, 3, dilation=r) for r in rates
        )
        # no normalization on the pooled branch: 1x1 maps break batch statistics at batch size 1
        self.pool = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Conv2d(cin, cout, 1), nn.ReLU())
        self.project = conv_bn_relu(cout * (len(rates) + 1), cout, 1)

    def forward(self, x):
        outs = [b(x) for b in self.branches]
        outs.append(self.pool(x).expand(-1, -1, x.shape[2], x.shape[3]))
        return self.project(torch.cat(outs, 1))


class BoundaryBranch(nn.Module):
    def __init__(self, cin: int, channels):
        super().__init__()
        c1, c2, c3 = channels
        self.conv1 = conv_bn_relu(cin, c1, 3)
        self.conv2 = conv_bn_relu(c1, c2, 3)
        self.conv3 = nn.Conv2d(c2, c3, 1)

    def forward(self, x):
        return self.conv3(self.conv2(self.conv1(x)))


class SegNet(nn.Module):
    def __init__(self, config: SegNetConfig):
        super().__init__()
        self.config = config
        d = config.decoder_channels
        self.encoder = Encoder(config.encoder_width_multiplier, config.encoder_depth)
        self.aspp = ASPP(self.encoder.high_channels, d, config.aspp_rates)
        low_proj = _make_divisible(48 * config.encoder_width_multiplier)
        self.low_proj = conv_bn_relu(self.encoder.low_channels, low_proj, 1)
        self.decoder = nn.Sequential(conv_bn_relu(d + low_proj, d, 3), conv_bn_relu(d, d, 3))
        if config.use_boundary:
            self.boundary_branch = BoundaryBranch(d, config.boundary_branch_channels)
            self.mask_branch = nn.Conv2d(d + 1, 2, 3, padding=1)
        else:
            self.boundary_branch = None
            self.mask_branch = nn.Conv2d(d, 2, 3, padding=1)

    def forward(self, image: torch.Tensor) -> SegOutput:
        h, w = image.shape[-2:]
        s = self.config.stride
        if h % s or w % s:
            raise ValueError(
                f"input size {h}x{w} must be divisible by the encoder stride {s}; "
                f"use e.g. {(h // s + 1) * s}x{(w // s + 1) * s}"
            )
        low, high = self.encoder(image)
        x = self.aspp(high)
        x = F.interpolate(x, size=low.shape[-2:], mode="bilinear", align_corners=False)
        feats = self.decoder(torch.cat([x, self.low_proj(low)], 1))

        boundary = None
        if self.boundary_branch is not None:
            b_logit = self.boundary_branch(feats)
            b_prob = torch.sigmoid(b_logit)
            mask_logit = self.mask_branch(torch.cat([feats, b_prob], 1))
            b_up = F.interpolate(b_logit, size=(h, w), mode="bilinear", align_corners=False)
            boundary = torch.sigmoid(b_up)
        else:
            mask_logit = self.mask_branch(feats)
        mask_logit = F.interpolate(mask_logit, size=(h, w), mode="bilinear", align_corners=False)
        return SegOutput(boundary, torch.sigmoid(mask_logit), mask_logit)


def init_params(config: SegNetConfig, rng_seed: int) -> SegNet:
    """Build a SegNet with deterministic Kaiming-uniform weights."""
    gen = torch.Generator().manual_seed(int(rng_seed))
    net = SegNet(config)
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, nn.Conv2d):
                bound = init_bound(m)
                m.weight.copy_(torch.empty_like(m.weight).uniform_(-bound, bound, generator=gen))
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.fill_(1.0)
                m.bias.zero_()
    return net


def init_bound(conv: nn.Conv2d) -> float:
    fan_in = conv.in_channels // conv.groups * conv.kernel_size[0] * conv.kernel_size[1]
    return (6.0 / fan_in) ** 0.5


def count_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
