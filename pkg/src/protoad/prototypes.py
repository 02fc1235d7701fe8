"""Learnable normal-prototype bank and its losses.

A fixed number of learnable tokens cross-attend over the aggregated
encoder features of one image, producing per-image prototypes. Tokens
are image-independent; the prototypes are not.

Two training losses shape the prototypes:

* coherence: mean distance of every token feature to its nearest
  prototype. Cheap, but nothing stops one prototype from absorbing all
  tokens (assignment monopoly).
* balanced alignment ("daa"): tokens are first assigned to their nearest
  prototype; each non-empty group contributes the mean distance to its
  own prototype, and the sum is divided by the total prototype count.
  Every prototype therefore carries equal weight regardless of how many
  tokens it attracted, which counteracts the monopoly feedback loop.

Feature vectors are detached inside both losses: gradients flow to the
prototypes (extractor weights and tokens), never back into the encoder.
Assignments themselves are recomputed per step outside the graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import layers as L
from .autodiff import Tensor
from .errors import ConfigError
from .rng import truncated_normal

PROTO_LOSS_KINDS = ("coherence", "daa")

# Tokens need a larger init scale than the 0.02 used for weights: the
# prototype-specific signal rides on top of a shared cross-attention
# average, and below ~0.1 it drowns and every token feature latches onto
# one prototype regardless of the loss.
TOKEN_INIT_STD = 0.2


@dataclass
class PrototypeBank:
    tokens: Tensor  # (M, C), learnable
    extractor: L.CrossBlock


@dataclass
class AssignmentTable:
    """Nearest-prototype assignment for one image's token features."""

    owner: np.ndarray  # (N,) int, argmin over prototypes; ties -> lowest index
    distance: np.ndarray  # (N,) cosine distance to the owning prototype
    m: int

    def groups(self) -> list[list[int]]:
        """Token indices per prototype; the lists partition range(N)."""
        out: list[list[int]] = [[] for _ in range(self.m)]
        for i, j in enumerate(self.owner):
            out[int(j)].append(i)
        return out


def init_bank(rng, m: int, dim: int, heads: int, hidden: int, dtype) -> PrototypeBank:
    if m < 1:
        raise ConfigError(f"prototype count must be >= 1, got {m}")
    return PrototypeBank(
        tokens=ad.param(truncated_normal(rng, (m, dim), TOKEN_INIT_STD), dtype=dtype),
        extractor=L.init_cross_block(rng, dim, heads, hidden, dtype),
    )


def extract_prototypes(bank: PrototypeBank, features: Tensor) -> Tensor:
    """(B, N, C) aggregated features -> (B, M, C) per-image prototypes."""
    if features.ndim != 3:
        raise ConfigError(f"expected batched (B, N, C) features, got shape {features.shape}")
    if features.shape[-1] != bank.tokens.shape[-1]:
        raise ConfigError(
            f"feature dim {features.shape[-1]} does not match token dim {bank.tokens.shape[-1]}"
        )
    queries = ad.expand_batch(bank.tokens, features.shape[0])
    return L.cross_block(queries, features, bank.extractor)


def pairwise_cosine_distance(features: Tensor, protos: Tensor) -> Tensor:
    """(B, N, C) x (B, M, C) -> (B, N, M) distances in [0, 2]."""
    fn = ad.normalize_lastaxis(features)
    pn = ad.normalize_lastaxis(protos)
    sim = ad.matmul(fn, ad.transpose_last2(pn))
    return ad.add_scalar(ad.neg(sim), 1.0)


def _owners(features: np.ndarray, protos: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-prototype index and distance per token, outside any graph."""

    def unit(x):
        n = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
        return np.where(n < 1e-12, 0.0, x / np.where(n < 1e-12, 1.0, n))

    dist = 1.0 - unit(features) @ np.swapaxes(unit(protos), -1, -2)
    owner = np.argmin(dist, axis=-1)  # first (lowest) index wins ties
    picked = np.take_along_axis(dist, owner[..., None], axis=-1)[..., 0]
    return owner, picked


def assign(features: Tensor | np.ndarray, protos: Tensor | np.ndarray) -> AssignmentTable:
    """Exact nearest-prototype assignment for a single image (N, C) x (M, C)."""
    f = features.data if isinstance(features, Tensor) else np.asarray(features)
    p = protos.data if isinstance(protos, Tensor) else np.asarray(protos)
    owner, dist = _owners(f[None], p[None])
    return AssignmentTable(owner=owner[0], distance=dist[0], m=p.shape[0])


def _as_batched(t: Tensor) -> Tensor:
    return ad.reshape(t, (1,) + t.shape) if t.ndim == 2 else t


def prototype_loss(features: Tensor, protos: Tensor, kind: str) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Selected prototype loss plus the (owner, distance) arrays behind it.

    Both losses are weighted sums over the (B, N, M) distance matrix with
    assignment-derived constant weights, so gradients reach the
    prototypes only through the distances of assigned pairs.
    """
    if kind not in PROTO_LOSS_KINDS:
        raise ConfigError(f"unknown prototype loss kind {kind!r}")
    features = _as_batched(features)
    protos = _as_batched(protos)
    bsz, n, _ = features.shape
    m = protos.shape[1]

    dist = pairwise_cosine_distance(ad.stop_grad(features), protos)
    owner, picked = _owners(features.data, protos.data)
    onehot = owner[..., None] == np.arange(m)[None, None, :]  # (B, N, M)

    if kind == "coherence":
        weights = onehot / (bsz * n)
    else:
        counts = onehot.sum(axis=1)  # (B, M)
        denom = m * np.maximum(counts, 1)[:, None, :]
        weights = onehot / (bsz * denom)
    wt = ad.tensor(weights.astype(dist.dtype))
    loss = ad.sum_all(ad.mul(dist, wt))
    return loss, owner, picked


def coherence_loss(features: Tensor, protos: Tensor) -> Tensor:
    """Mean nearest-prototype distance over all tokens."""
    return prototype_loss(features, protos, "coherence")[0]


def daa_loss(features: Tensor, protos: Tensor) -> Tensor:
    """Per-prototype mean of assigned distances, averaged over all M slots.

    Empty groups contribute exactly zero; the division is always by M.
    """
    return prototype_loss(features, protos, "daa")[0]


def assignment_histogram(table: AssignmentTable, m: int | None = None) -> np.ndarray:
    """Token counts per prototype; sums to N."""
    m = table.m if m is None else m
    return np.bincount(table.owner, minlength=m)


def assignment_entropy(counts: np.ndarray) -> float:
    """Shannon entropy (nats) of the assignment share vector.

    0 for a monopoly, ln(M) for a perfectly balanced assignment.
    """
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise ValueError("assignment histogram is empty")
    p = counts / total
    nz = p > 0
    return float(-(p[nz] * np.log(p[nz])).sum())


def batch_assignment_stats(owner: np.ndarray, m: int) -> tuple[float, float]:
    """Mean per-image entropy and mean per-image max-prototype share."""
    bsz, n = owner.shape
    entropies = []
    shares = []
    for b in range(bsz):
        counts = np.bincount(owner[b], minlength=m)
        entropies.append(assignment_entropy(counts))
        shares.append(counts.max() / n)
    return float(np.mean(entropies)), float(np.mean(shares))
