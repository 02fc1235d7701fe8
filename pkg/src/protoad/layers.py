"""Transformer building blocks: linear maps, attention, feed-forward.

All blocks are pre-norm with residual connections. Attention is
multi-head with per-head scaling; the same routine serves self-attention
(queries == keys/values) and cross-attention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .rng import truncated_normal

INIT_STD = 0.02


@dataclass
class Linear:
    w: Tensor  # (d_in, d_out)
    b: Tensor  # (d_out,)


@dataclass
class LayerNorm:
    gamma: Tensor
    beta: Tensor


@dataclass
class Attention:
    wq: Linear
    wk: Linear
    wv: Linear
    wo: Linear
    heads: int


@dataclass
class FeedForward:
    fc1: Linear
    fc2: Linear


@dataclass
class EncoderBlock:
    ln1: LayerNorm
    attn: Attention
    ln2: LayerNorm
    ffn: FeedForward


@dataclass
class CrossBlock:
    """One cross-attention layer plus one feed-forward, both residual."""

    ln_q: LayerNorm
    ln_kv: LayerNorm
    attn: Attention
    ln2: LayerNorm
    ffn: FeedForward


@dataclass
class DecoderBlock:
    """Self-attention, then cross-attention over external memory, then FFN."""

    ln1: LayerNorm
    self_attn: Attention
    ln_q: LayerNorm
    ln_kv: LayerNorm
    cross_attn: Attention
    ln2: LayerNorm
    ffn: FeedForward


# ---------------------------------------------------------------------------
# initialization


def init_linear(rng, d_in: int, d_out: int, dtype) -> Linear:
    return Linear(
        w=ad.param(truncated_normal(rng, (d_in, d_out), INIT_STD), dtype=dtype),
        b=ad.param(np.zeros(d_out), dtype=dtype),
    )


def init_layernorm(dim: int, dtype) -> LayerNorm:
    return LayerNorm(
        gamma=ad.param(np.ones(dim), dtype=dtype),
        beta=ad.param(np.zeros(dim), dtype=dtype),
    )


def init_attention(rng, dim: int, heads: int, dtype) -> Attention:
    if dim % heads:
        raise ConfigError(f"dim {dim} not divisible by heads {heads}")
    return Attention(
        wq=init_linear(rng, dim, dim, dtype),
        wk=init_linear(rng, dim, dim, dtype),
        wv=init_linear(rng, dim, dim, dtype),
        wo=init_linear(rng, dim, dim, dtype),
        heads=heads,
    )


def init_ffn(rng, dim: int, hidden: int, dtype) -> FeedForward:
    return FeedForward(
        fc1=init_linear(rng, dim, hidden, dtype),
        fc2=init_linear(rng, hidden, dim, dtype),
    )


def init_encoder_block(rng, dim: int, heads: int, hidden: int, dtype) -> EncoderBlock:
    return EncoderBlock(
        ln1=init_layernorm(dim, dtype),
        attn=init_attention(rng, dim, heads, dtype),
        ln2=init_layernorm(dim, dtype),
        ffn=init_ffn(rng, dim, hidden, dtype),
    )


def init_cross_block(rng, dim: int, heads: int, hidden: int, dtype) -> CrossBlock:
    return CrossBlock(
        ln_q=init_layernorm(dim, dtype),
        ln_kv=init_layernorm(dim, dtype),
        attn=init_attention(rng, dim, heads, dtype),
        ln2=init_layernorm(dim, dtype),
        ffn=init_ffn(rng, dim, hidden, dtype),
    )


def init_decoder_block(rng, dim: int, heads: int, hidden: int, dtype) -> DecoderBlock:
    return DecoderBlock(
        ln1=init_layernorm(dim, dtype),
        self_attn=init_attention(rng, dim, heads, dtype),
        ln_q=init_layernorm(dim, dtype),
        ln_kv=init_layernorm(dim, dtype),
        cross_attn=init_attention(rng, dim, heads, dtype),
        ln2=init_layernorm(dim, dtype),
        ffn=init_ffn(rng, dim, hidden, dtype),
    )


# ---------------------------------------------------------------------------
# forward passes


def linear(x: Tensor, p: Linear) -> Tensor:
    return ad.add_bias(ad.matmul(x, p.w), p.b)


def norm(x: Tensor, p: LayerNorm) -> Tensor:
    return ad.layernorm(x, p.gamma, p.beta)


def attention(p: Attention, q_in: Tensor, kv_in: Tensor) -> Tensor:
    """Multi-head attention: q_in (B, Nq, C) attends over kv_in (B, Nk, C)."""
    bsz, nq, dim = q_in.shape
    nk = kv_in.shape[1]
    dh = dim // p.heads

    def split(t: Tensor, n: int) -> Tensor:
        return ad.transpose(ad.reshape(t, (bsz, n, p.heads, dh)), (0, 2, 1, 3))

    # the 1/sqrt(dh) score scale is folded into q (cheaper than scaling N x N scores)
    q = split(ad.mul_scalar(linear(q_in, p.wq), dh**-0.5), nq)
    k = split(linear(kv_in, p.wk), nk)
    v = split(linear(kv_in, p.wv), nk)

    weights = ad.softmax(ad.matmul(q, ad.transpose_last2(k)), axis=-1)
    ctx = ad.matmul(weights, v)  # (B, H, Nq, dh)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (bsz, nq, dim))
    return linear(ctx, p.wo)


def feed_forward(x: Tensor, p: FeedForward) -> Tensor:
    return linear(ad.gelu(linear(x, p.fc1)), p.fc2)


def encoder_block(x: Tensor, p: EncoderBlock) -> Tensor:
    h = norm(x, p.ln1)
    x = ad.add(x, attention(p.attn, h, h))
    x = ad.add(x, feed_forward(norm(x, p.ln2), p.ffn))
    return x


def cross_block(queries: Tensor, memory: Tensor, p: CrossBlock) -> Tensor:
    x = ad.add(queries, attention(p.attn, norm(queries, p.ln_q), norm(memory, p.ln_kv)))
    x = ad.add(x, feed_forward(norm(x, p.ln2), p.ffn))
    return x


def decoder_block(x: Tensor, memory: Tensor, p: DecoderBlock) -> Tensor:
    h = norm(x, p.ln1)
    x = ad.add(x, attention(p.self_attn, h, h))
    x = ad.add(x, attention(p.cross_attn, norm(x, p.ln_q), norm(memory, p.ln_kv)))
    x = ad.add(x, feed_forward(norm(x, p.ln2), p.ffn))
    return x
