"""Patch discriminators over boundary maps and entropy maps."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn


@dataclass
class DiscConfig:
    in_channels: int = 1
    base_channels: int = 64
    n_layers: int = 5
    leaky_slope: float = 0.2

    def __post_init__(self):
        if self.in_channels not in (1, 2):
            raise ValueError(f"in_channels must be 1 (boundary) or 2 (entropy), got {self.in_channels}")
        if self.n_layers < 2:
            raise ValueError("n_layers must be >= 2")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")

    @classmethod
    def boundary(cls, tiny: bool = True) -> "DiscConfig":
        return cls(in_channels=1, base_channels=16 if tiny else 64)

    @classmethod
    def entropy(cls, tiny: bool = True) -> "DiscConfig":
        return cls(in_channels=2, base_channels=16 if tiny else 64)

    @property
    def stride(self) -> int:
        return 2 ** (self.n_layers - 1)

    def to_dict(self) -> dict:
        return asdict(self)


class PatchDiscriminator(nn.Module):
    """Stack of 4x4 convolutions: stride 2 on all but the last layer, leaky ReLU in between.

    Output is a map of raw logits, one per input patch; there is no
    normalization anywhere in the stack.
    """

    def __init__(self, config: DiscConfig):
        super().__init__()
        self.config = config
        layers: list[nn.Module] = []
        cin = config.in_channels
        for i in range(config.n_layers - 1):
            cout = config.base_channels * 2 ** min(i, 3)
            layers += [nn.Conv2d(cin, cout, 4, 2, 1), nn.LeakyReLU(config.leaky_slope)]
            cin = cout
        # even kernel at stride 1: pad (1, 2) per axis to keep the spatial size
        layers += [nn.ZeroPad2d((1, 2, 1, 2)), nn.Conv2d(cin, 1, 4, 1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.config.in_channels:
            raise ValueError(
                f"discriminator expects {self.config.in_channels} input channel(s), got {x.shape[1]}"
            )
        return self.net(x)

    def conv_layers(self) -> list[nn.Conv2d]:
        return [m for m in self.net if isinstance(m, nn.Conv2d)]


def init_disc(config: DiscConfig, rng_seed: int) -> PatchDiscriminator:
    gen = torch.Generator().manual_seed(int(rng_seed))
    disc = PatchDiscriminator(config)
    with torch.no_grad():
        for conv in disc.conv_layers():
            fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
            bound = fan_in ** -0.5
            conv.weight.copy_(torch.empty_like(conv.weight).uniform_(-bound, bound, generator=gen))
            conv.bias.copy_(torch.empty_like(conv.bias).uniform_(-bound, bound, generator=gen))
    return disc


def disc_forward(maps: torch.Tensor, disc: PatchDiscriminator) -> torch.Tensor:
    return disc(maps)
