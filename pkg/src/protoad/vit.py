"""Tiny vision transformer encoder with multi-scale feature taps.

Images are cut into non-overlapping patches, linearly embedded with a
learned positional offset, and passed through a stack of pre-norm
self-attention blocks. The outputs of a configured subset of blocks form
the multi-scale feature set; their elementwise mean is the aggregate fed
to the prototype extractor.

There is no CLS token and no pretrained weights: the encoder is trained
from scratch (or frozen after a warmup, depending on the variant).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import layers as L
from .autodiff import Tensor
from .errors import ConfigError, NumericError
from .params import ema_update as _ema_params
from .rng import truncated_normal


@dataclass
class EncoderConfig:
    image_size: int = 64
    channels: int = 1
    patch: int = 8
    dim: int = 32
    depth: int = 4
    heads: int = 4
    ffn_mult: int = 4
    extract: tuple[int, ...] = (2, 3, 4)  # 1-based block indices
    # Positional embeddings get a larger init than the 0.02 weight std:
    # on low-contrast inputs the content part of a token is weak, and
    # without positional identity the patch features are too clustered
    # for prototypes to specialize on anything.
    pos_init_std: float = 0.1

    def validate(self) -> None:
        if self.image_size % self.patch:
            raise ConfigError(f"image size {self.image_size} not divisible by patch {self.patch}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if not self.extract:
            raise ConfigError("at least one extraction layer is required")
        if list(self.extract) != sorted(set(self.extract)):
            raise ConfigError(f"extraction indices must be strictly increasing, got {self.extract}")
        if self.extract[0] < 1 or self.extract[-1] > self.depth:
            raise ConfigError(f"extraction indices {self.extract} outside depth {self.depth}")

    @property
    def grid(self) -> tuple[int, int]:
        return (self.image_size // self.patch, self.image_size // self.patch)

    @property
    def n_tokens(self) -> int:
        nh, nw = self.grid
        return nh * nw

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels


@dataclass
class Encoder:
    cfg: EncoderConfig
    patch_proj: L.Linear
    pos: Tensor  # (N, C) learned positional embedding
    blocks: list = field(default_factory=list)


@dataclass
class FeatureStack:
    """Per-layer token features plus their elementwise mean."""

    layers: list  # of Tensor (B, N, C)
    aggregate: Tensor  # (B, N, C)
    grid: tuple[int, int]


def init_encoder(cfg: EncoderConfig, rng, dtype=np.float32) -> Encoder:
    cfg.validate()
    hidden = cfg.dim * cfg.ffn_mult
    return Encoder(
        cfg=cfg,
        patch_proj=L.init_linear(rng, cfg.patch_dim, cfg.dim, dtype),
        pos=ad.param(
            truncated_normal(rng, (cfg.n_tokens, cfg.dim), cfg.pos_init_std), dtype=dtype
        ),
        blocks=[init_block(rng, cfg, dtype) for _ in range(cfg.depth)],
    )


def init_block(rng, cfg: EncoderConfig, dtype) -> L.EncoderBlock:
    return L.init_encoder_block(rng, cfg.dim, cfg.heads, cfg.dim * cfg.ffn_mult, dtype)


def patchify(pixels: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, ch) -> (B, N, patch*patch*ch), row-major patch order."""
    b, h, w, ch = pixels.shape
    nh, nw = h // patch, w // patch
    x = pixels.reshape(b, nh, patch, nw, patch, ch)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(b, nh * nw, patch * patch * ch))


def patch_embed(enc: Encoder, pixels: np.ndarray) -> Tensor:
    """Embed a (B, H, W, ch) pixel batch into (B, N, C) tokens."""
    cfg = enc.cfg
    if pixels.ndim != 4 or pixels.shape[1:] != (cfg.image_size, cfg.image_size, cfg.channels):
        raise ConfigError(
            f"pixel batch shape {pixels.shape} does not match configured "
            f"({cfg.image_size}, {cfg.image_size}, {cfg.channels})"
        )
    patches = ad.tensor(patchify(pixels, cfg.patch), dtype=enc.pos.dtype)
    tokens = L.linear(patches, enc.patch_proj)
    return ad.add(tokens, ad.expand_batch(enc.pos, pixels.shape[0]))


def encode(enc: Encoder, pixels: np.ndarray) -> FeatureStack:
    """Run the block stack, collecting features at the extraction taps."""
    cfg = enc.cfg
    taps = set(cfg.extract)
    x = patch_embed(enc, pixels)
    collected = []
    for i, blk in enumerate(enc.blocks, start=1):
        x = L.encoder_block(x, blk)
        if not np.isfinite(x.data).all():
            raise NumericError(f"non-finite activations in encoder block {i}")
        if i in taps:
            collected.append(x)
    if len(collected) == 1:
        aggregate = collected[0]
    else:
        acc = collected[0]
        for t in collected[1:]:
            acc = ad.add(acc, t)
        aggregate = ad.mul_scalar(acc, 1.0 / len(collected))
    return FeatureStack(layers=collected, aggregate=aggregate, grid=cfg.grid)


def ema_update(online: Encoder, target: Encoder, beta: float) -> None:
    """Momentum update of the target encoder toward the online one."""
    _ema_params(online, target, beta)
