"""Full segmentation network: dual encoder, fusion, alignment tap, decoder.

The decoder is a small FPN-style upsampler.  It starts from the fused
final-stage features and walks back to full resolution with nearest 2×
upsampling; at every level it adds 1×1 projections of the encoder features of
that level (RGB, and DSM when present), and at full resolution a 3×3
projection of the raw inputs.  Each merge is followed by batch norm and ReLU.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .alignment import LatentMapper, da_forward
from .encoder import Encoder, get_tier
from .errors import ConfigError, DataError, FormatError
from .fusion import ApfWeights, ConcatFusion, apf_forward, from_tokens, to_tokens
from .nn import BatchNorm, Conv2d, Module, ReLU, Sequential, conv_bn_relu
from .tensor import Tensor

IGNORE_INDEX = 255


@dataclass
class ModelConfig:
    rgb_tier: str = "base"
    dsm_tier: str = "small"
    fusion: str = "apf"
    da_enabled: bool = True
    da_alpha: float = 5e-4
    num_classes: int = 6
    crop: int = 64
    modality: str = "multi"
    da_latent_len: int = 128
    decoder_width: int = 32

    def validate(self) -> "ModelConfig":
        get_tier(self.rgb_tier)
        get_tier(self.dsm_tier)
        if self.fusion not in ("apf", "concat"):
            raise ConfigError(f"fusion must be 'apf' or 'concat', got {self.fusion!r}")
        if self.modality not in ("multi", "rgb"):
            raise ConfigError(f"modality must be 'multi' or 'rgb', got {self.modality!r}")
        if self.crop % 32 or self.crop <= 0:
            raise ConfigError(f"crop {self.crop} must be a positive multiple of 32")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if self.da_alpha < 0:
            raise ConfigError(f"da_alpha must be non-negative, got {self.da_alpha}")
        if self.da_latent_len < 1:
            raise ConfigError("da_latent_len must be positive")
        return self

    @property
    def uses_dsm(self) -> bool:
        return self.modality == "multi"

    @property
    def uses_da(self) -> bool:
        return self.uses_dsm and self.da_enabled

    def to_dict(self) -> dict:
        return asdict(self)


class Decoder(Module):
    def __init__(self, rgb_widths, dsm_widths, bottom_ch: int, width: int, num_classes: int):
        super().__init__()
        self.has_dsm = dsm_widths is not None
        self.bottom = Conv2d(bottom_ch, width, 1)
        # levels 0..2 are encoder stages 2,1,0; level 3 is the stride-2 stem
        rgb_skips = [rgb_widths[2], rgb_widths[1], rgb_widths[0], rgb_widths[0] // 2]
        for i, ch in enumerate(rgb_skips):
            setattr(self, f"skip_rgb{i}", Conv2d(ch, width, 1))
            setattr(self, f"norm{i}", Sequential(BatchNorm(width), ReLU()))
        if self.has_dsm:
            dsm_skips = [dsm_widths[2], dsm_widths[1], dsm_widths[0], dsm_widths[0] // 2]
            for i, ch in enumerate(dsm_skips):
                setattr(self, f"skip_dsm{i}", Conv2d(ch, width, 1))
            self.full_dsm = Conv2d(1, width, 3)
        self.full_rgb = Conv2d(3, width, 3)
        self.full_norm = Sequential(BatchNorm(width), ReLU())
        self.head = conv_bn_relu(width, width, 1)
        self.classifier = Conv2d(width, num_classes, 1, bias=True)

    def forward(self, bottom, rgb_feats, dsm_feats, rgb_in, dsm_in) -> Tensor:
        x = self.bottom(bottom)
        for i in range(4):
            skip = getattr(self, f"skip_rgb{i}")(rgb_feats[i])
            if self.has_dsm:
                skip = skip + getattr(self, f"skip_dsm{i}")(dsm_feats[i])
            x = getattr(self, f"norm{i}")(T.upsample_nearest(x, 2) + skip)
        full = self.full_rgb(rgb_in)
        if self.has_dsm:
            full = full + self.full_dsm(dsm_in)
        x = self.full_norm(T.upsample_nearest(x, 2) + full)
        return self.classifier(self.head(x))


class AMMNet(Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg.validate()
        rgb_tier = get_tier(cfg.rgb_tier)
        c1 = rgb_tier.out_channels
        d = c1 // 2
        self.rgb_enc = Encoder(3, rgb_tier)
        self.fusion = None
        self.matcher = None
        dsm_widths = None
        if cfg.uses_dsm:
            from .encoder import ChannelMatcher

            dsm_tier = get_tier(cfg.dsm_tier)
            self.dsm_enc = Encoder(1, dsm_tier)
            dsm_widths = dsm_tier.widths()
            if dsm_tier.out_channels != c1:
                self.matcher = ChannelMatcher(dsm_tier.out_channels, c1)
            self.fusion = ApfWeights(c1, d) if cfg.fusion == "apf" else ConcatFusion(c1, d)
            bottom_ch = d
        else:
            bottom_ch = c1
        if cfg.uses_da:
            self.lm_rgb = LatentMapper(c1, cfg.da_latent_len)
            self.lm_dsm = LatentMapper(c1, cfg.da_latent_len)
        self.decoder = Decoder(rgb_tier.widths(), dsm_widths, bottom_ch, cfg.decoder_width, cfg.num_classes)

    def forward(self, rgb, dsm=None, training: bool | None = None, noise_seed=0):
        """Returns ``(logits, align_loss)``; ``align_loss`` is None unless
        training with distribution alignment enabled."""
        training = self.training if training is None else training
        self.train(training)
        rgb = T.as_tensor(rgb)
        out_rgb = self.rgb_enc(rgb)
        f_rgb = out_rgb.stages[-1]
        align = None
        dsm_feats = None
        dsm_in = None
        if self.cfg.uses_dsm:
            if dsm is None:
                raise DataError("multi-modal model needs a DSM batch")
            dsm_in = T.as_tensor(dsm)
            if dsm_in.shape[0] != rgb.shape[0] or dsm_in.shape[2:] != rgb.shape[2:] or dsm_in.shape[1] != 1:
                raise DataError(f"DSM batch {dsm_in.shape} not co-registered with RGB batch {rgb.shape}")
            out_dsm = self.dsm_enc(dsm_in)
            f_dsm = out_dsm.stages[-1]
            if self.matcher is not None:
                f_dsm = self.matcher(f_dsm)
            B, _, h, w = f_rgb.shape
            if self.cfg.fusion == "apf":
                bundle = apf_forward(to_tokens(f_rgb), to_tokens(f_dsm), self.fusion, training)
                bottom = from_tokens(bundle.f_fuse, h, w)
            else:
                bottom = self.fusion(f_rgb, f_dsm)
            if training and self.cfg.uses_da:
                align, _, _ = da_forward(f_rgb.mean(axis=(2, 3)), f_dsm.mean(axis=(2, 3)), self.lm_rgb, self.lm_dsm, noise_seed)
            dsm_feats = [out_dsm.stages[2], out_dsm.stages[1], out_dsm.stages[0], out_dsm.stem]
        else:
            bottom = f_rgb
        rgb_feats = [out_rgb.stages[2], out_rgb.stages[1], out_rgb.stages[0], out_rgb.stem]
        logits = self.decoder(bottom, rgb_feats, dsm_feats, rgb, dsm_in)
        return logits, align


def check_labels(labels: np.ndarray, num_classes: int, ignore_index: int = IGNORE_INDEX) -> None:
    labels = np.asarray(labels)
    bad = (labels >= num_classes) & (labels != ignore_index) | (labels < 0)
    if bad.any():
        where = tuple(int(i) for i in np.argwhere(bad)[0])
        raise DataError(f"label {int(labels[where])} at pixel {where} is outside [0, {num_classes - 1}] and not {ignore_index}")


def supervised_loss(logits: Tensor, labels, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean per-pixel cross-entropy over non-ignored pixels."""
    labels = np.asarray(labels)
    check_labels(labels, logits.shape[1], ignore_index)
    return T.cross_entropy(logits, labels, ignore_index)


def final_loss(sup, align, alpha: float):
    if alpha < 0:
        raise ConfigError(f"alignment weight must be non-negative, got {alpha}")
    if align is None:
        return sup
    return sup + align * alpha


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------
CKPT_MAGIC = b"AMMN"
CKPT_VERSION = 1


def encode_checkpoint(state: "OrderedDict[str, np.ndarray]") -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(state))]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> "OrderedDict[str, np.ndarray]":
    def need(off, n, what):
        if off + n > len(buf):
            raise FormatError(f"truncated checkpoint: {what} needs {n} bytes, {len(buf) - off} remain", off)

    need(0, 12, "header")
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {buf[:4]!r}", 0)
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    off = 12
    state: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        need(off, 2, "name length")
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        need(off, nlen + 1, "name and rank")
        name = buf[off : off + nlen].decode("utf-8")
        off += nlen
        rank = buf[off]
        off += 1
        need(off, 4 * rank, "extents")
        shape = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        nbytes = 4 * int(np.prod(shape))
        need(off, nbytes, f"values of {name!r}")
        state[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=off).reshape(shape).copy()
        off += nbytes
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes after last parameter", off)
    return state


def save_checkpoint(path, state) -> None:
    Path(path).write_bytes(encode_checkpoint(state))


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    return decode_checkpoint(Path(path).read_bytes())
