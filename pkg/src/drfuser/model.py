"""DRFuser network and its comparison variants.

Every variant shares the same skeleton: one residual encoder stream per
modality, a fusion site after each stage listed in
``EncoderConfig.attention_stages``, and a convolutional decoder ending in
two linear layers. At a fusion site the fused map is added back into every
stream; the fused map of the final stage feeds the decoder. Single-stream
variants (``rgb_only``, ``event_only``, ``early``) fuse their only stream
with nothing, so the fused map is the stream itself.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from drfuser import ops
from drfuser.attention import AdditiveAttention, LocalSelfAttention, fuse_elementwise
from drfuser.errors import ConfigError, DimensionError
from drfuser.kernels import conv_output_size
from drfuser.nn import BasicBlock, BatchNorm2d, Conv2d, Dropout, Linear, Module
from drfuser.tensor import Tensor

VARIANTS = ("self_attention", "additive_attention", "no_attention", "early", "late", "rgb_only", "event_only")

# short names accepted on the command line
VARIANT_ALIASES = {
    "drfuser": "self_attention",
    "none": "no_attention",
    "additive": "additive_attention",
    "early": "early",
    "late": "late",
    "rgb": "rgb_only",
    "event": "event_only",
}

RGB_CHANNELS = 3
EVENT_CHANNELS = 2


def resolve_variant(name: str) -> str:
    if name in VARIANTS:
        return name
    if name in VARIANT_ALIASES:
        return VARIANT_ALIASES[name]
    raise ConfigError("fusion_variant", f"unknown variant {name!r}; choose from {sorted(VARIANT_ALIASES)}")


@dataclass
class EncoderConfig:
    """Residual encoder; ``attention_stages`` are 1-based stage indices."""

    widths: Tuple[int, ...] = (16, 32, 64, 128)
    blocks: Tuple[int, ...] = (1, 1, 1, 1)
    stem_channels: int = 16
    stem_kernel: int = 7
    stem_stride: int = 2
    attention_stages: Tuple[int, ...] = (2, 3, 4)

    @classmethod
    def resnet34(cls) -> "EncoderConfig":
        return cls(widths=(64, 128, 256, 512), blocks=(3, 4, 6, 3), stem_channels=64)

    @classmethod
    def resnet50(cls) -> "EncoderConfig":
        return cls(widths=(256, 512, 1024, 2048), blocks=(3, 4, 6, 3), stem_channels=64)

    def validate(self) -> None:
        if not self.widths:
            raise ConfigError("encoder.widths", "need at least one stage")
        if len(self.blocks) != len(self.widths):
            raise ConfigError("encoder.blocks", f"{len(self.blocks)} entries for {len(self.widths)} stages")
        if any(b < 1 for b in self.blocks):
            raise ConfigError("encoder.blocks", "every stage needs at least one block")
        if any(w < 1 for w in self.widths) or self.stem_channels < 1:
            raise ConfigError("encoder.widths", "channel widths must be positive")
        if self.stem_kernel < 1 or self.stem_stride < 1:
            raise ConfigError("encoder.stem_kernel", "stem kernel and stride must be positive")
        n = len(self.widths)
        bad = [s for s in self.attention_stages if not 1 <= s <= n]
        if bad:
            raise ConfigError("encoder.attention_stages", f"stage indices {bad} outside 1..{n}")
        if not self.attention_stages or max(self.attention_stages) != n:
            raise ConfigError("encoder.attention_stages", f"must include the final stage {n}, whose fusion "
                                                          f"feeds the decoder")


@dataclass
class DecoderConfig:
    """Conv-BN-ReLU ladder, then ``hidden`` -> 1 linear head.

    Dropout follows every conv block after the first.
    """

    channels: Tuple[int, ...] = (64, 32, 16)
    keep_prob: float = 0.75
    hidden: int = 512
    output: int = 1

    def validate(self) -> None:
        if not self.channels or any(c < 1 for c in self.channels):
            raise ConfigError("decoder.channels", "need at least one positive width")
        if not 0 < self.keep_prob <= 1:
            raise ConfigError("decoder.keep_prob", f"must be in (0, 1], got {self.keep_prob}")
        if self.hidden < 1:
            raise ConfigError("decoder.hidden", "must be positive")
        if self.output != 1:
            raise ConfigError("decoder.output", "the steering head has exactly one output")


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    fusion_variant: str = "self_attention"
    heads: int = 4
    window: int = 7
    input_height: int = 64
    input_width: int = 64
    share_attention_weights: bool = False

    def validate(self) -> None:
        self.fusion_variant = resolve_variant(self.fusion_variant)
        self.encoder.validate()
        self.decoder.validate()
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigError("window", f"must be a positive odd integer, got {self.window}")
        if self.heads < 1:
            raise ConfigError("heads", "must be positive")
        if self.fusion_variant == "self_attention":
            for s in self.encoder.attention_stages:
                width = self.encoder.widths[s - 1]
                if width % self.heads or (width // self.heads) % 2:
                    raise ConfigError("heads", f"stage {s} width {width} must split into {self.heads} "
                                               f"heads of even width")
        shapes = feature_shapes(self)
        if shapes[-1][1] < 1 or shapes[-1][2] < 1:
            raise ConfigError("input_height", f"{self.input_height}x{self.input_width} input collapses "
                                              f"to an empty feature map")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        raw = dict(raw)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown model configuration key")
        enc = _sub_config(EncoderConfig, raw.pop("encoder", {}), "encoder")
        dec = _sub_config(DecoderConfig, raw.pop("decoder", {}), "decoder")
        cfg = cls(encoder=enc, decoder=dec, **raw)
        cfg.validate()
        return cfg

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _sub_config(kind, raw: dict, prefix: str):
    known = {f.name for f in dataclasses.fields(kind)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{prefix}.{sorted(unknown)[0]}", "unknown configuration key")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()}
    return kind(**values)


def feature_shapes(config: ModelConfig) -> List[Tuple[int, int, int]]:
    """(channels, height, width) after the stem, the max-pool and each stage.

    Pure arithmetic, so full-scale configurations can be checked without
    allocating their weights.
    """
    enc = config.encoder
    h, w = config.input_height, config.input_width
    pad = enc.stem_kernel // 2
    h = conv_output_size(h, enc.stem_kernel, enc.stem_stride, pad)
    w = conv_output_size(w, enc.stem_kernel, enc.stem_stride, pad)
    shapes = [(enc.stem_channels, h, w)]
    h, w = conv_output_size(h, 3, 2, 1), conv_output_size(w, 3, 2, 1)
    shapes.append((enc.stem_channels, h, w))
    for i, width in enumerate(enc.widths):
        if i > 0:
            h, w = conv_output_size(h, 3, 2, 1), conv_output_size(w, 3, 2, 1)
        shapes.append((width, h, w))
    return shapes


class Stage(Module):
    def __init__(self, rng, c_in: int, c_out: int, blocks: int, stride: int):
        self.blocks = [BasicBlock(rng, c_in if i == 0 else c_out, c_out, stride if i == 0 else 1)
                       for i in range(blocks)]

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x


class Encoder(Module):
    """ResNet feature extractor without the pooling/classification head."""

    def __init__(self, rng, cfg: EncoderConfig, in_channels: int):
        self.stem = Conv2d(rng, in_channels, cfg.stem_channels, cfg.stem_kernel, cfg.stem_stride,
                           cfg.stem_kernel // 2, bias=False)
        self.stem_bn = BatchNorm2d(cfg.stem_channels)
        c_in = cfg.stem_channels
        self.stages = []
        for i, (width, blocks) in enumerate(zip(cfg.widths, cfg.blocks)):
            self.stages.append(Stage(rng, c_in, width, blocks, 1 if i == 0 else 2))
            c_in = width

    def head(self, x: Tensor) -> Tensor:
        return ops.max_pool2d(ops.relu(self.stem_bn(self.stem(x))), 3, 2, 1)


class ConvLadder(Module):
    def __init__(self, rng, c_in: int, cfg: DecoderConfig):
        self.convs, self.bns, self.drops = [], [], []
        for i, c_out in enumerate(cfg.channels):
            self.convs.append(Conv2d(rng, c_in, c_out, 3, 1, 1))
            self.bns.append(BatchNorm2d(c_out))
            self.drops.append(Dropout(cfg.keep_prob if i > 0 else 1.0))
            c_in = c_out

    def forward(self, x: Tensor, seed) -> Tensor:
        for i, (conv, bn, drop) in enumerate(zip(self.convs, self.bns, self.drops)):
            x = drop(ops.relu(bn(conv(x))), seed=(*seed, i))
        return ops.flatten(x)


class DRFuser(Module):
    """All seven variants behind one ``forward(rgb, evt)``."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        variant = config.fusion_variant
        enc = config.encoder
        if variant == "early":
            self.encoder = Encoder(rng, enc, RGB_CHANNELS + EVENT_CHANNELS)
        if variant != "early" and variant != "event_only":
            self.rgb_encoder = Encoder(rng, enc, RGB_CHANNELS)
        if variant != "early" and variant != "rgb_only":
            self.evt_encoder = Encoder(rng, enc, EVENT_CHANNELS)
        stages = enc.attention_stages
        if variant == "self_attention":
            def attn(s):
                w = enc.widths[s - 1]
                return LocalSelfAttention(rng, w, w, config.heads, config.window)
            self.attn_rgb = [attn(s) for s in stages]
            self.attn_evt = self.attn_rgb if config.share_attention_weights else [attn(s) for s in stages]
        elif variant == "additive_attention":
            self.gates = [AdditiveAttention(rng, enc.widths[s - 1]) for s in stages]
        c, h, w = feature_shapes(config)[-1]
        flat = config.decoder.channels[-1] * h * w
        hidden = config.decoder.hidden
        if variant == "late":
            self.ladder_rgb = ConvLadder(rng, c, config.decoder)
            self.ladder_evt = ConvLadder(rng, c, config.decoder)
            self.hidden_rgb = Linear(rng, flat, hidden)
            self.hidden_evt = Linear(rng, flat, hidden)
            self.head = Linear(rng, 2 * hidden, 1)
        else:
            self.ladder = ConvLadder(rng, c, config.decoder)
            self.hidden = Linear(rng, flat, hidden)
            self.head = Linear(rng, hidden, 1)

    def named_parameters(self, prefix: str = ""):
        # shared attention modules are listed once
        seen = set()
        for name, p in super().named_parameters(prefix):
            if id(p) not in seen:
                seen.add(id(p))
                yield name, p

    # --- streams -----------------------------------------------------------------

    def _stream(self, encoder: Encoder, x: Tensor) -> Tensor:
        """Single stream with self-fusion at every fusion site."""
        x = encoder.head(x)
        fused = None
        for s, stage in enumerate(encoder.stages, start=1):
            x = stage(x)
            if s in self.config.encoder.attention_stages:
                fused = x
                x = x + fused
        return fused

    def _fuse(self, k: int, f_rgb: Tensor, f_evt: Tensor) -> Tensor:
        variant = self.config.fusion_variant
        if variant == "self_attention":
            return self.attn_rgb[k](f_rgb) + self.attn_evt[k](f_evt)
        if variant == "additive_attention":
            return self.gates[k](f_rgb, f_evt)
        return fuse_elementwise(f_rgb, f_evt)

    def _two_streams(self, rgb: Tensor, evt: Tensor) -> Tensor:
        f_rgb = self.rgb_encoder.head(rgb)
        f_evt = self.evt_encoder.head(evt)
        fused = None
        placements = list(self.config.encoder.attention_stages)
        for s, (st_rgb, st_evt) in enumerate(zip(self.rgb_encoder.stages, self.evt_encoder.stages), start=1):
            f_rgb, f_evt = st_rgb(f_rgb), st_evt(f_evt)
            if s in placements:
                fused = self._fuse(placements.index(s), f_rgb, f_evt)
                f_rgb, f_evt = f_rgb + fused, f_evt + fused
        return fused

    def _decode(self, ladder: ConvLadder, hidden: Linear, features: Tensor, seed, tag: int) -> Tensor:
        return ops.relu(hidden(ladder(features, seed=(*seed, tag))))

    # --- public ------------------------------------------------------------------

    def check_inputs(self, rgb: Optional[Tensor], evt: Optional[Tensor]) -> int:
        cfg = self.config
        need_rgb = cfg.fusion_variant != "event_only"
        need_evt = cfg.fusion_variant != "rgb_only"
        n = None
        for name, x, channels, needed in (("rgb", rgb, RGB_CHANNELS, need_rgb),
                                          ("evt", evt, EVENT_CHANNELS, need_evt)):
            if x is None:
                if needed:
                    raise DimensionError(f"{cfg.fusion_variant} needs a {name} input")
                continue
            expected = (channels, cfg.input_height, cfg.input_width)
            if x.ndim != 4 or x.shape[1:] != expected:
                raise DimensionError(f"{name} input shape {x.shape} != [N, {expected[0]}, {expected[1]}, "
                                     f"{expected[2]}]")
            if n is not None and x.shape[0] != n:
                raise DimensionError(f"rgb and evt batch sizes differ (axis 0: {n} vs {x.shape[0]})")
            n = x.shape[0]
        return n

    def forward(self, rgb: Optional[Tensor], evt: Optional[Tensor], seed: int = 0) -> Tensor:
        """Predict steering ``[N, 1]``; ``seed`` drives dropout in training mode."""
        self.check_inputs(rgb, evt)
        variant = self.config.fusion_variant
        seed = (int(seed),)
        if variant == "late":
            a = self._decode(self.ladder_rgb, self.hidden_rgb, self._stream(self.rgb_encoder, rgb), seed, 0)
            b = self._decode(self.ladder_evt, self.hidden_evt, self._stream(self.evt_encoder, evt), seed, 1)
            return self.head(ops.concat_channels([a, b]))
        if variant == "early":
            features = self._stream(self.encoder, ops.concat_channels([rgb, evt]))
        elif variant == "rgb_only":
            features = self._stream(self.rgb_encoder, rgb)
        elif variant == "event_only":
            features = self._stream(self.evt_encoder, evt)
        else:
            features = self._two_streams(rgb, evt)
        return self.head(self._decode(self.ladder, self.hidden, features, seed, 0))


def build_model(config: ModelConfig, seed: int) -> DRFuser:
    """Deterministically initialised model: He fan-in normal weights,
    zero biases, unit batch-norm scales, small uniform position tables."""
    return DRFuser(config, np.random.default_rng(seed))


def desk_config(variant: str = "self_attention", **overrides) -> ModelConfig:
    cfg = ModelConfig(fusion_variant=resolve_variant(variant), **overrides)
    cfg.validate()
    return cfg


def parameter_counts() -> Dict[str, int]:
    """Desk-preset parameter count of every variant."""
    return {v: build_model(desk_config(v), 0).num_parameters() for v in VARIANTS}
