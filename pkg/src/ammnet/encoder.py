"""Asymmetric dual encoder: a deep RGB branch, a shallow DSM branch, and the
channel matcher that lifts DSM features to the RGB width at the fusion stage.

Each branch is a stride-4 stem (two stride-2 3×3 convs) followed by four
stages of pre-activation residual blocks.  Stages 1-3 open with a stride-2
transition, so a 64×64 input yields stage extents 16, 8, 4, 2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .nn import BatchNorm, Conv2d, Module, ReLU, Sequential, conv_bn_relu
from .tensor import Tensor


@dataclass(frozen=True)
class EncoderTier:
    name: str
    stage_depths: tuple[int, int, int, int]
    base_width: int

    def widths(self) -> list[int]:
        return [self.base_width * 2**s for s in range(4)]

    @property
    def out_channels(self) -> int:
        return self.base_width * 8


TIERS = {
    "tiny": EncoderTier("tiny", (1, 1, 1, 1), 16),
    "small": EncoderTier("small", (2, 2, 2, 2), 24),
    "base": EncoderTier("base", (2, 2, 4, 2), 32),
}


def get_tier(name: str | EncoderTier) -> EncoderTier:
    if isinstance(name, EncoderTier):
        return name
    try:
        return TIERS[name.lower()]
    except KeyError:
        raise ConfigError(f"unknown encoder tier {name!r}; expected one of {sorted(TIERS)}") from None


class ResidualBlock(Module):
    """x + conv(relu(bn(conv(relu(bn(x))))))"""

    def __init__(self, ch: int):
        super().__init__()
        self.bn1 = BatchNorm(ch)
        self.act1 = ReLU()
        self.conv1 = Conv2d(ch, ch, 3)
        self.bn2 = BatchNorm(ch)
        self.act2 = ReLU()
        self.conv2 = Conv2d(ch, ch, 3)

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv1(self.act1(self.bn1(x)))
        h = self.conv2(self.act2(self.bn2(h)))
        return x + h


@dataclass
class EncoderOutput:
    stages: list[Tensor]
    stem: Tensor

    @property
    def channels(self) -> int:
        return self.stages[-1].shape[1]


class Encoder(Module):
    def __init__(self, in_ch: int, tier: EncoderTier):
        super().__init__()
        self.tier = tier
        widths = tier.widths()
        self.stem1 = conv_bn_relu(in_ch, widths[0] // 2, 3, stride=2)
        self.stem2 = conv_bn_relu(widths[0] // 2, widths[0], 3, stride=2)
        for s, depth in enumerate(tier.stage_depths):
            layers = []
            if s > 0:
                layers.append(conv_bn_relu(widths[s - 1], widths[s], 3, stride=2))
            layers.extend(ResidualBlock(widths[s]) for _ in range(depth))
            setattr(self, f"stage{s}", Sequential(*layers))

    def forward(self, x) -> EncoderOutput:
        x = T.as_tensor(x)
        _check_extent(x)
        stem = self.stem1(x)
        h = self.stem2(stem)
        stages = []
        for s in range(4):
            h = getattr(self, f"stage{s}")(h)
            stages.append(h)
        return EncoderOutput(stages, stem)


def _check_extent(x: Tensor) -> None:
    if x.ndim != 4:
        raise DimensionError(f"encoder expects B×C×H×W input, got {x.shape}")
    H, W = x.shape[2:]
    if H % 32 or W % 32:
        raise DimensionError(f"input extents {H}×{W} must be divisible by 32")


class ChannelMatcher(Module):
    """1×1 conv (no bias) + batch norm + ReLU lifting c₂ channels to c₁."""

    def __init__(self, c_dsm: int, c_rgb: int):
        super().__init__()
        self.c_in, self.c_out = c_dsm, c_rgb
        self.proj = Conv2d(c_dsm, c_rgb, 1, bias=False)
        self.bn = BatchNorm(c_rgb)
        self.act = ReLU()

    def forward(self, f_dsm: Tensor) -> Tensor:
        return channel_match(f_dsm, self)


def channel_match(f_dsm, matcher: ChannelMatcher) -> Tensor:
    f_dsm = T.as_tensor(f_dsm)
    if f_dsm.ndim != 4 or f_dsm.shape[1] != matcher.c_in:
        raise DimensionError(f"channel matcher expects {matcher.c_in} input channels, got shape {f_dsm.shape}")
    return matcher.act(matcher.bn(matcher.proj(f_dsm)))


class DualEncoder(Module):
    """RGB and DSM encoders of independent tiers plus channel matching.

    The matcher exists only when the two final widths differ; with equal
    widths the DSM features are already compatible.
    """

    def __init__(self, rgb_tier, dsm_tier):
        super().__init__()
        self.rgb_tier = get_tier(rgb_tier)
        self.dsm_tier = get_tier(dsm_tier)
        self.rgb = Encoder(3, self.rgb_tier)
        self.dsm = Encoder(1, self.dsm_tier)
        c1, c2 = self.rgb_tier.out_channels, self.dsm_tier.out_channels
        self.matcher = ChannelMatcher(c2, c1) if c1 != c2 else None

    def forward(self, rgb, dsm) -> tuple[EncoderOutput, EncoderOutput]:
        rgb, dsm = T.as_tensor(rgb), T.as_tensor(dsm)
        if rgb.ndim != 4 or rgb.shape[1] != 3:
            raise DimensionError(f"RGB batch must be B×3×H×W, got {rgb.shape}")
        if dsm.ndim != 4 or dsm.shape[1] != 1:
            raise DimensionError(f"DSM batch must be B×1×H×W, got {dsm.shape}")
        if rgb.shape[0] != dsm.shape[0] or rgb.shape[2:] != dsm.shape[2:]:
            raise DimensionError(f"RGB {rgb.shape} and DSM {dsm.shape} batches are not co-registered")
        out_rgb = self.rgb(rgb)
        out_dsm = self.dsm(dsm)
        if self.matcher is not None:
            out_dsm.stages[-1] = self.matcher(out_dsm.stages[-1])
        return out_rgb, out_dsm


def encode(rgb, dsm, rgb_tier, dsm_tier, seed: int = 0) -> tuple[EncoderOutput, EncoderOutput]:
    """Build a freshly initialized dual encoder and run it once (eval mode)."""
    from .nn import ParamStore, init_params

    enc = DualEncoder(rgb_tier, dsm_tier)
    init_params(ParamStore.from_module(enc), seed)
    enc.eval()
    return enc(np.asarray(rgb), np.asarray(dsm))
