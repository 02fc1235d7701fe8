"""Dual-branch feature reconstruction.

The trainable branch encodes an image, fuses the extracted feature
layers through a bottleneck and reconstructs them with a decoder whose
every layer cross-attends over the image's normal prototypes. The
reference branch supplies the reconstruction targets and is always
gradient-free; which encoder provides it depends on the training
variant:

========  ================  =============  ==========================
variant   encoder           dual encoder   reference features
========  ================  =============  ==========================
m0        frozen            no             own features, detached
m1        trainable         no             own features, detached
m2        trainable         yes            frozen start-of-training copy
m2plus    trainable         yes            momentum (EMA) copy
========  ================  =============  ==========================

The reconstruction objective is the per-token cosine distance between
reference and decoded features, averaged over layer groups, optionally
reweighted token-wise to emphasize hard tokens (soft mining). A
whole-batch flattened cosine form is available behind a flag for
fidelity comparisons.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import autodiff as ad
from . import layers as L
from . import vit
from .autodiff import Graph, Tensor
from .errors import ConfigError, NumericError, ShapeMismatchError, StateError
from .params import named_params
from .prototypes import (
    PROTO_LOSS_KINDS,
    PrototypeBank,
    batch_assignment_stats,
    extract_prototypes,
    init_bank,
    prototype_loss,
)


class Variant(str, Enum):
    """Progressive training variants; see the module table."""

    M0 = "m0"
    M1 = "m1"
    M2 = "m2"
    M2PLUS = "m2plus"

    @property
    def encoder_trainable(self) -> bool:
        return self is not Variant.M0

    @property
    def dual_encoder(self) -> bool:
        return self in (Variant.M2, Variant.M2PLUS)

    @property
    def momentum(self) -> bool:
        return self is Variant.M2PLUS

    def flags(self) -> tuple[bool, bool, bool]:
        return (self.encoder_trainable, self.dual_encoder, self.momentum)

    @classmethod
    def parse(cls, text: str) -> "Variant":
        try:
            return cls(text.lower())
        except ValueError:
            raise ConfigError(f"unknown variant {text!r}; choose from "
                              f"{[v.value for v in cls]}") from None


@dataclass
class ModelConfig:
    encoder: vit.EncoderConfig = field(default_factory=vit.EncoderConfig)
    decoder_depth: int = 4
    m: int = 6
    lam: float = 0.2
    beta: float = 0.9999
    proto_kind: str = "daa"
    mining: bool = True
    mining_gamma: float = 3.0
    mining_wmax: float = 5.0
    global_cosine: bool = False

    def validate(self) -> None:
        self.encoder.validate()
        if self.m < 1:
            raise ConfigError(f"prototype count must be >= 1, got {self.m}")
        if self.lam < 0:
            raise ConfigError(f"prototype loss weight must be >= 0, got {self.lam}")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"momentum beta must lie in [0, 1], got {self.beta}")
        if self.proto_kind not in PROTO_LOSS_KINDS:
            raise ConfigError(f"unknown prototype loss kind {self.proto_kind!r}")
        if self.decoder_depth < len(self.encoder.extract):
            raise ConfigError(
                f"decoder depth {self.decoder_depth} cannot supply "
                f"{len(self.encoder.extract)} output groups"
            )


@dataclass
class Bottleneck:
    """Channel-concat of the extracted layers, projected back to C with a
    residual two-layer MLP on top."""

    proj: L.Linear
    ln: L.LayerNorm
    ffn: L.FeedForward


@dataclass
class Decoder:
    blocks: list
    taps: tuple[int, ...]  # 1-based block indices whose outputs are compared


def init_bottleneck(rng, n_layers: int, dim: int, hidden: int, dtype) -> Bottleneck:
    return Bottleneck(
        proj=L.init_linear(rng, n_layers * dim, dim, dtype),
        ln=L.init_layernorm(dim, dtype),
        ffn=L.init_ffn(rng, dim, hidden, dtype),
    )


def init_decoder(rng, depth: int, n_taps: int, dim: int, heads: int, hidden: int, dtype) -> Decoder:
    taps = tuple(range(depth - n_taps + 1, depth + 1))
    return Decoder(
        blocks=[L.init_decoder_block(rng, dim, heads, hidden, dtype) for _ in range(depth)],
        taps=taps,
    )


def bottleneck(features: list[Tensor], p: Bottleneck) -> Tensor:
    """Fuse extracted feature layers into one (B, N, C) tensor."""
    if not features:
        raise ConfigError("bottleneck needs at least one feature layer")
    x = features[0] if len(features) == 1 else ad.concat_lastaxis(features)
    if x.shape[-1] != p.proj.w.shape[0]:
        raise ConfigError(
            f"bottleneck expects {p.proj.w.shape[0]} input channels, got {x.shape[-1]}"
        )
    h = L.linear(x, p.proj)
    return ad.add(h, L.feed_forward(L.norm(h, p.ln), p.ffn))


def decode(fused: Tensor, protos: Tensor, dec: Decoder) -> list[Tensor]:
    """Run the decoder stack; collect outputs at the tap layers."""
    if fused.shape[-1] != protos.shape[-1]:
        raise ConfigError(
            f"decoder input dim {fused.shape[-1]} does not match prototype dim {protos.shape[-1]}"
        )
    x = fused
    outs = []
    for i, blk in enumerate(dec.blocks, start=1):
        x = L.decoder_block(x, protos, blk)
        if not np.isfinite(x.data).all():
            raise NumericError(f"non-finite activations in decoder layer {i}")
        if i in dec.taps:
            outs.append(x)
    return outs


# ---------------------------------------------------------------------------
# reconstruction objective


def soft_mining_weights(dist: np.ndarray, gamma: float = 3.0, w_max: float = 5.0) -> np.ndarray:
    """Per-token weights emphasizing hard-to-reconstruct tokens.

    w_i = min((d_i / mean d)^gamma, w_max), renormalized per image to
    mean 1. All-zero distances give uniform weights. The result is a
    plain array: it enters the loss as a constant (stop-gradient).
    """
    d = np.asarray(dist)
    if (d < 0).any():
        raise ValueError("distances must be non-negative")
    batched = d.ndim == 2
    d2 = d if batched else d[None]
    m = d2.mean(axis=-1, keepdims=True)
    safe_m = np.where(m > 0, m, 1.0)
    w = np.minimum((d2 / safe_m) ** gamma, w_max)
    w = np.where(m > 0, w, 1.0)
    w = w / w.mean(axis=-1, keepdims=True)
    return w if batched else w[0]


def recon_token_distances(references: list[Tensor], decoded: list[Tensor]) -> list[Tensor]:
    """Per-group (B, N) cosine distances; references are detached here."""
    if len(references) != len(decoded):
        raise ShapeMismatchError(
            f"{len(references)} reference groups vs {len(decoded)} decoded groups"
        )
    out = []
    for ref, dec in zip(references, decoded):
        if ref.shape != dec.shape:
            raise ShapeMismatchError(f"group shapes differ: {ref.shape} vs {dec.shape}")
        rn = ad.normalize_lastaxis(ad.stop_grad(ref))
        dn = ad.normalize_lastaxis(dec)
        out.append(ad.add_scalar(ad.neg(ad.sum_lastaxis(ad.mul(rn, dn))), 1.0))
    return out


def _weighted_group_mean(dists: list[Tensor], weights: np.ndarray | None) -> Tensor:
    per_group = []
    for d in dists:
        if weights is None:
            per_group.append(ad.mean_all(d))
        else:
            wt = ad.tensor(np.asarray(weights, dtype=d.dtype))
            per_group.append(ad.mul_scalar(ad.sum_all(ad.mul(d, wt)), 1.0 / d.size))
    acc = per_group[0]
    for t in per_group[1:]:
        acc = ad.add(acc, t)
    return ad.mul_scalar(acc, 1.0 / len(per_group))


def reconstruction_loss(
    references: list[Tensor],
    decoded: list[Tensor],
    weights: np.ndarray | None = None,
    global_cosine: bool = False,
) -> Tensor:
    """Weighted mean cosine distance between reference and decoded groups.

    With `global_cosine` each group is flattened to a single vector and
    one cosine distance is taken per group (weights are ignored: the
    flattened form has no token granularity).
    """
    if global_cosine:
        per_group = []
        for ref, dec in zip(references, decoded):
            r = ad.reshape(ad.stop_grad(ref), (-1,))
            d = ad.reshape(dec, (-1,))
            per_group.append(ad.cosine_distance(r, d))
        acc = per_group[0]
        for t in per_group[1:]:
            acc = ad.add(acc, t)
        return ad.mul_scalar(acc, 1.0 / len(per_group))
    return _weighted_group_mean(recon_token_distances(references, decoded), weights)


def total_loss(recon: Tensor, proto: Tensor, lam: float) -> Tensor:
    if lam < 0:
        raise ConfigError(f"prototype loss weight must be >= 0, got {lam}")
    return ad.add(recon, ad.mul_scalar(proto, lam))


# ---------------------------------------------------------------------------
# model state and the full forward pass


@dataclass
class ModelState:
    mode: Variant
    config: ModelConfig
    encoder: vit.Encoder
    bank: PrototypeBank
    bottleneck: Bottleneck
    decoder: Decoder
    ref_encoder: vit.Encoder | None = None
    step: int = 0

    def trainable_named(self):
        """(name, tensor) pairs in the documented checkpoint order."""
        for prefix, part in (
            ("encoder", self.encoder),
            ("bank", self.bank),
            ("bottleneck", self.bottleneck),
            ("decoder", self.decoder),
        ):
            for name, t in named_params(part, prefix):
                yield name, t

    def ref_named(self):
        if self.ref_encoder is not None:
            yield from named_params(self.ref_encoder, "ref_encoder")

    def all_named(self):
        yield from self.trainable_named()
        yield from self.ref_named()


def build_model(mode: Variant, config: ModelConfig, rng, dtype=np.float32) -> ModelState:
    """Fresh model with all parts initialized from one stream, in order."""
    config.validate()
    enc_cfg = config.encoder
    hidden = enc_cfg.dim * enc_cfg.ffn_mult
    encoder = vit.init_encoder(enc_cfg, rng, dtype)
    bank = init_bank(rng, config.m, enc_cfg.dim, enc_cfg.heads, hidden, dtype)
    bn = init_bottleneck(rng, len(enc_cfg.extract), enc_cfg.dim, hidden, dtype)
    dec = init_decoder(
        rng, config.decoder_depth, len(enc_cfg.extract), enc_cfg.dim, enc_cfg.heads, hidden, dtype
    )
    return ModelState(mode=mode, config=config, encoder=encoder, bank=bank, bottleneck=bn, decoder=dec)


@dataclass
class StepOutput:
    """Everything one forward pass produces, for training and diagnostics."""

    graph: Graph | None
    total: Tensor
    recon: Tensor
    proto: Tensor
    owner: np.ndarray  # (B, N) nearest-prototype index per token
    proto_dist: np.ndarray  # (B, N) distance to the owning prototype
    weights: np.ndarray | None  # (B, N) soft-mining weights, or None
    token_dist: np.ndarray  # (B, N) recon distance averaged over groups
    references: list[Tensor]
    decoded: list[Tensor]
    fused: Tensor
    entropy: float  # mean per-image assignment entropy
    max_share: float  # mean per-image max-prototype share


def forward_step(pixels: np.ndarray, state: ModelState, record: bool = True) -> StepOutput:
    """Full dual-branch pass over one pixel batch (B, H, W, ch).

    With `record` a fresh graph is recorded and returned for backward;
    without it the same computation runs as plain values (inference).
    """
    if state.mode.dual_encoder and state.ref_encoder is None:
        raise StateError(f"variant {state.mode.value} requires a reference encoder")
    if not state.mode.dual_encoder and state.ref_encoder is not None:
        raise StateError(f"variant {state.mode.value} must not carry a reference encoder")
    cfg = state.config

    graph = Graph() if record else None
    if graph is not None:
        graph.__enter__()
    try:
        feats = vit.encode(state.encoder, pixels)
        if state.mode.dual_encoder:
            references = vit.encode(state.ref_encoder, pixels).layers
        else:
            references = [ad.stop_grad(t) for t in feats.layers]

        # The extractor consumes detached features: prototype shaping (and
        # decoder guidance through P) must not pull the encoder around.
        protos = extract_prototypes(state.bank, ad.stop_grad(feats.aggregate))
        proto_t, owner, pdist = prototype_loss(feats.aggregate, protos, cfg.proto_kind)

        fused = bottleneck(feats.layers, state.bottleneck)
        decoded = decode(fused, protos, state.decoder)

        dists = recon_token_distances(references, decoded)
        token_dist = np.mean([d.data for d in dists], axis=0)
        if cfg.global_cosine:
            weights = None
            recon_t = reconstruction_loss(references, decoded, global_cosine=True)
        elif cfg.mining:
            weights = soft_mining_weights(token_dist, cfg.mining_gamma, cfg.mining_wmax)
            recon_t = _weighted_group_mean(dists, weights)
        else:
            weights = None
            recon_t = _weighted_group_mean(dists, None)
        total_t = total_loss(recon_t, proto_t, cfg.lam)
    finally:
        if graph is not None:
            graph.__exit__(None, None, None)

    entropy, max_share = batch_assignment_stats(owner, cfg.m)
    return StepOutput(
        graph=graph,
        total=total_t,
        recon=recon_t,
        proto=proto_t,
        owner=owner,
        proto_dist=pdist,
        weights=weights,
        token_dist=token_dist,
        references=references,
        decoded=decoded,
        fused=fused,
        entropy=entropy,
        max_share=max_share,
    )
