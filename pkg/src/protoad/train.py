"""Training loop, optimizer and the collapse diagnostic experiment.

The optimizer is Adam with decoupled weight decay plus a per-parameter
RMS bound on the update direction (clip factor 1.0 by default), which
keeps early steps from blowing up small modules. Learning rates are per
module: one rate for decoder / bottleneck / prototype extractor, a lower
one for the encoder. Parameters whose gradient is exactly zero (or
absent) are left untouched for that step, weight decay included; only
the shared step counter advances.

Variant wiring:

* m0: the encoder trains for a short warmup (m1-style), is then frozen,
  and the remaining modules train against its detached features.
* m1: everything trains; references are the online features, detached.
* m2: a frozen copy taken at training start provides the references.
* m2plus: the reference encoder follows the online one by EMA with
  momentum beta, updated after every optimizer step.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import backend as B
from . import vit
from .errors import ConfigError, NumericError, StateError
from .params import clone, set_requires_grad
from .prototypes import assignment_entropy
from .recon import ModelConfig, ModelState, Variant, build_model, forward_step
from .rng import stream
from .scoring import auc as auc_metric
from .scoring import score_samples
from .synth import Dataset

LOG_CSV_HEADER = "step,recon,proto,total,entropy,max_share"


@dataclass
class TrainConfig:
    mode: Variant = Variant.M2PLUS
    iterations: int = 2000
    batch_size: int = 32
    lam: float = 0.2
    beta: float = 0.9999
    m: int = 6
    lr: float = 1e-4  # decoder, bottleneck, prototype extractor
    lr_encoder: float = 1e-5
    proto_kind: str = "daa"
    seed: int = 0
    log_interval: int = 10
    mining: bool = True
    mining_gamma: float = 3.0
    mining_wmax: float = 5.0
    global_cosine: bool = False
    # architecture
    image_size: int = 64
    channels: int = 1
    patch: int = 8
    dim: int = 32
    depth: int = 4
    heads: int = 4
    ffn_mult: int = 4
    extract: tuple[int, ...] = (2, 3, 4)
    decoder_depth: int = 4
    # schedule details
    m0_warmup: int = 200
    eval_interval: int = 0  # 0 disables periodic test-set AUC tracking
    dtype: str = "f32"

    def validate(self) -> None:
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.log_interval < 1:
            raise ConfigError(f"log interval must be >= 1, got {self.log_interval}")
        if self.lr <= 0 or self.lr_encoder <= 0:
            raise ConfigError("learning rates must be positive")
        if self.dtype not in ("f32", "f64"):
            raise ConfigError(f"dtype must be f32 or f64, got {self.dtype!r}")
        if self.m0_warmup < 0:
            raise ConfigError(f"warmup must be >= 0, got {self.m0_warmup}")
        self.model_config().validate()

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            encoder=vit.EncoderConfig(
                image_size=self.image_size,
                channels=self.channels,
                patch=self.patch,
                dim=self.dim,
                depth=self.depth,
                heads=self.heads,
                ffn_mult=self.ffn_mult,
                extract=tuple(self.extract),
            ),
            decoder_depth=self.decoder_depth,
            m=self.m,
            lam=self.lam,
            beta=self.beta,
            proto_kind=self.proto_kind,
            mining=self.mining,
            mining_gamma=self.mining_gamma,
            mining_wmax=self.mining_wmax,
            global_cosine=self.global_cosine,
        )

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64


@dataclass
class LossBreakdown:
    step: int
    recon: float
    proto: float
    total: float  # == recon + lam * proto, recomputed in float64
    entropy: float
    max_share: float

    def csv_row(self) -> str:
        return (
            f"{self.step},{self.recon:.8f},{self.proto:.8f},{self.total:.8f},"
            f"{self.entropy:.6f},{self.max_share:.6f}"
        )


@dataclass
class TrainResult:
    state: ModelState
    log: list[LossBreakdown] = field(default_factory=list)
    eval_history: list[tuple[int, float]] = field(default_factory=list)
    diverged_at: int | None = None
    wall_seconds: float = 0.0


class AdamW:
    """Decoupled-weight-decay Adam with RMS update clipping."""

    def __init__(self, groups, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 1e-4, clip: float = 1.0):
        # groups: iterable of (name, tensor, lr)
        self.entries = [(name, p, lr) for name, p, lr in groups]
        self.b1, self.b2, self.eps = b1, b2, eps
        self.weight_decay = weight_decay
        self.clip = clip
        self.t = 0
        self._m = [np.zeros(p.size, dtype=p.dtype) for _, p, _ in self.entries]
        self._v = [np.zeros(p.size, dtype=p.dtype) for _, p, _ in self.entries]

    def step(self) -> None:
        self.t += 1
        for idx, (name, p, lr) in enumerate(self.entries):
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient in parameter {name}")
            gflat = g.reshape(-1)
            if not gflat.any():
                continue  # exactly-zero gradient: no update, no decay
            B.adamw_update(
                p.data.reshape(-1), gflat, self._m[idx], self._v[idx], self.t,
                lr, self.b1, self.b2, self.eps, self.weight_decay, self.clip,
            )

    def zero_grad(self) -> None:
        for _, p, _ in self.entries:
            p.grad = None


def _optimizer_groups(state: ModelState, config: TrainConfig, encoder_trainable: bool):
    for name, p in state.trainable_named():
        if name.startswith("encoder"):
            if encoder_trainable:
                yield name, p, config.lr_encoder
        else:
            yield name, p, config.lr


def _batch_indices(n: int, batch_size: int, order_rng: np.random.Generator):
    """Yield fixed-size batches from an endless stream of shuffled epochs."""
    buf = np.empty(0, dtype=np.int64)
    while True:
        while len(buf) < batch_size:
            buf = np.concatenate([buf, order_rng.permutation(n)])
        yield buf[:batch_size]
        buf = buf[batch_size:]


def _stack_pixels(samples, indices, dtype) -> np.ndarray:
    return np.stack([samples[i].pixels for i in indices]).astype(dtype)


def _assert_frozen_contract(state: ModelState, encoder_trainable: bool) -> None:
    if not encoder_trainable:
        for name, p in state.trainable_named():
            if name.startswith("encoder") and p.grad is not None and p.grad.any():
                raise StateError(f"frozen encoder parameter {name} received gradient")


def train(config: TrainConfig, data: Dataset) -> TrainResult:
    """Run the configured variant's optimization loop over normal images."""
    config.validate()
    if not data.train:
        raise ConfigError("training split is empty")
    if any(s.label != "normal" for s in data.train):
        raise ConfigError("training split must contain normal images only")

    dtype = config.np_dtype
    init_rng = stream(config.seed, "model-init")
    state = build_model(config.mode, config.model_config(), init_rng, dtype=dtype)
    order_rng = stream(config.seed, "batch-order")
    batches = _batch_indices(len(data.train), config.batch_size, order_rng)

    result = TrainResult(state=state)
    t_start = time.perf_counter()

    # m0: brief end-to-end warmup (m1 semantics), then freeze the encoder.
    if config.mode is Variant.M0 and config.m0_warmup > 0:
        warm_state = replace(state, mode=Variant.M1)
        warm_opt = AdamW(_optimizer_groups(warm_state, config, encoder_trainable=True))
        for _ in range(config.m0_warmup):
            pixels = _stack_pixels(data.train, next(batches), dtype)
            out = forward_step(pixels, warm_state)
            out.graph.backward(out.total)
            warm_opt.step()
            warm_opt.zero_grad()
    if config.mode is Variant.M0:
        set_requires_grad(state.encoder, False)

    if config.mode.dual_encoder:
        state.ref_encoder = clone(state.encoder, requires_grad=False)

    opt = AdamW(_optimizer_groups(state, config, config.mode.encoder_trainable))
    last_good = clone_state(state)

    for it in range(1, config.iterations + 1):
        pixels = _stack_pixels(data.train, next(batches), dtype)
        out = forward_step(pixels, state)

        recon = out.recon.item()
        proto = out.proto.item()
        if not (np.isfinite(recon) and np.isfinite(proto)):
            result.state = last_good
            result.diverged_at = it
            break

        out.graph.backward(out.total)
        _assert_frozen_contract(state, config.mode.encoder_trainable)
        opt.step()
        opt.zero_grad()
        if config.mode.momentum:
            vit.ema_update(state.encoder, state.ref_encoder, config.beta)
        state.step += 1

        if it % config.log_interval == 0 or it == config.iterations:
            result.log.append(
                LossBreakdown(
                    step=it,
                    recon=recon,
                    proto=proto,
                    total=recon + config.lam * proto,
                    entropy=out.entropy,
                    max_share=out.max_share,
                )
            )
            last_good = clone_state(state)
        if config.eval_interval and (it % config.eval_interval == 0 or it == config.iterations):
            result.eval_history.append((it, _test_auc(state, data)))

    result.wall_seconds = time.perf_counter() - t_start
    return result


def clone_state(state: ModelState) -> ModelState:
    out = replace(
        state,
        encoder=clone(state.encoder),
        bank=clone(state.bank),
        bottleneck=clone(state.bottleneck),
        decoder=clone(state.decoder),
        ref_encoder=None if state.ref_encoder is None else clone(state.ref_encoder, requires_grad=False),
    )
    return out


def _test_auc(state: ModelState, data: Dataset) -> float:
    results = score_samples(state, data.test)
    scores = np.array([r.score for r in results])
    labels = np.array([s.label == "anomalous" for s in data.test])
    return auc_metric(scores, labels)


def trainset_assignment_entropy(state: ModelState, samples, batch_size: int = 64) -> tuple[float, np.ndarray]:
    """Mean per-image assignment entropy over `samples`, plus summed counts."""
    dtype = np.float32 if state.encoder.pos.dtype == np.float32 else np.float64
    entropies = []
    total_counts = np.zeros(state.config.m, dtype=np.int64)
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        pixels = np.stack([s.pixels for s in chunk]).astype(dtype)
        out = forward_step(pixels, state, record=False)
        for b in range(len(chunk)):
            counts = np.bincount(out.owner[b], minlength=state.config.m)
            entropies.append(assignment_entropy(counts))
            total_counts += counts
    return float(np.mean(entropies)), total_counts


@dataclass
class CollapseOutcome:
    daa: TrainResult
    coherence: TrainResult
    entropy_daa: float
    entropy_coherence: float
    counts_daa: np.ndarray
    counts_coherence: np.ndarray


def collapse_experiment(config: TrainConfig, data: Dataset) -> CollapseOutcome:
    """Train twice (balanced vs plain prototype loss), same seed, and
    compare end-of-training assignment entropy over the train split."""
    cfg_daa = replace(config, proto_kind="daa")
    cfg_coh = replace(config, proto_kind="coherence")
    res_daa = train(cfg_daa, data)
    res_coh = train(cfg_coh, data)
    ent_daa, counts_daa = trainset_assignment_entropy(res_daa.state, data.train)
    ent_coh, counts_coh = trainset_assignment_entropy(res_coh.state, data.train)
    return CollapseOutcome(
        daa=res_daa,
        coherence=res_coh,
        entropy_daa=ent_daa,
        entropy_coherence=ent_coh,
        counts_daa=counts_daa,
        counts_coherence=counts_coh,
    )
