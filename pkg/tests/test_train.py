"""Optimizer behavior and training-loop contracts (fast desk configs)."""

import numpy as np
import pytest

from protoad import autodiff as ad
from protoad.errors import ConfigError, NumericError
from protoad.recon import Variant
from protoad.synth import DatasetSpec, generate
from protoad.train import AdamW, TrainConfig, train
from protoad.params import named_params


def tiny_train_config(**kw):
    base = dict(
        mode=Variant.M1,
        iterations=5,
        batch_size=4,
        image_size=16,
        patch=8,
        dim=8,
        depth=2,
        heads=2,
        extract=(1, 2),
        decoder_depth=2,
        m=3,
        seed=11,
        log_interval=1,
        m0_warmup=3,
    )
    base.update(kw)
    return TrainConfig(**base)


def tiny_dataset(seed=11, train=12, size=16):
    return generate(
        DatasetSpec(seed=seed, image_size=size, train_count=train, test_normal=4,
                    test_anomalous=4, radius_range=(3.0, 6.0))
    )


# ---------------------------------------------------------------------------
# optimizer


def test_adamw_zero_gradient_leaves_parameter_untouched():
    p = ad.param(np.array([1.0, -2.0], dtype=np.float32))
    opt = AdamW([("p", p, 0.1)])
    p.grad = np.zeros(2, dtype=np.float32)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert opt.t == 1  # step counter still advances
    p.grad = None
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adamw_first_step_moves_by_learning_rate():
    # bias-corrected first Adam step against a constant gradient is
    # m_hat / (sqrt(v_hat) + eps) = 1, scaled by lr (decay is negligible)
    p = ad.param(np.array([0.0], dtype=np.float64))
    opt = AdamW([("p", p, 0.1)], weight_decay=0.0)
    p.grad = np.array([1.0])
    opt.step()
    assert p.data[0] == pytest.approx(-0.1, rel=1e-6)


def test_adamw_rms_clipping_bounds_update():
    p = ad.param(np.zeros(4, dtype=np.float64))
    opt = AdamW([("p", p, 0.01)], weight_decay=0.0, clip=1.0)
    p.grad = np.array([100.0, -100.0, 100.0, -100.0])
    opt.step()
    # update direction has rms 1 after clipping, so |delta| <= lr per coord
    assert np.abs(p.data).max() <= 0.01 + 1e-12


def test_adamw_nonfinite_gradient_aborts():
    p = ad.param(np.zeros(2, dtype=np.float64))
    opt = AdamW([("p", p, 0.1)])
    p.grad = np.array([1.0, np.nan])
    with pytest.raises(NumericError):
        opt.step()


# ---------------------------------------------------------------------------
# training loop


def test_zero_iterations_returns_initial_state():
    cfg = tiny_train_config(iterations=0)
    ds = tiny_dataset()
    res = train(cfg, ds)
    from protoad.recon import build_model
    from protoad.rng import stream

    fresh = build_model(cfg.mode, cfg.model_config(), stream(cfg.seed, "model-init"),
                        dtype=cfg.np_dtype)
    for (na, pa), (nb, pb) in zip(res.state.trainable_named(), fresh.trainable_named()):
        assert na == nb
        np.testing.assert_array_equal(pa.data, pb.data)
    assert res.log == [] and res.diverged_at is None


def test_training_is_bit_reproducible():
    ds = tiny_dataset()
    r1 = train(tiny_train_config(), ds)
    r2 = train(tiny_train_config(), ds)
    assert [vars(a) for a in r1.log] == [vars(b) for b in r2.log]
    for (_, pa), (_, pb) in zip(r1.state.trainable_named(), r2.state.trainable_named()):
        np.testing.assert_array_equal(pa.data, pb.data)


def test_loss_decomposition_identity_in_log():
    cfg = tiny_train_config(lam=0.2, iterations=6)
    res = train(cfg, tiny_dataset())
    for row in res.log:
        assert row.total == row.recon + cfg.lam * row.proto  # exact float64 identity


def test_momentum_beta_one_keeps_reference_frozen():
    cfg = tiny_train_config(mode=Variant.M2PLUS, beta=1.0, iterations=4)
    ds = tiny_dataset()
    res = train(cfg, ds)
    from protoad.recon import build_model
    from protoad.rng import stream

    fresh = build_model(cfg.mode, cfg.model_config(), stream(cfg.seed, "model-init"),
                        dtype=cfg.np_dtype)
    ref = dict(named_params(res.state.ref_encoder, "enc"))
    start = dict(named_params(fresh.encoder, "enc"))
    for name, p in ref.items():
        np.testing.assert_array_equal(p.data, start[name].data)


def test_m0_encoder_frozen_after_warmup():
    cfg = tiny_train_config(mode=Variant.M0, iterations=8, m0_warmup=2)
    ds = tiny_dataset()
    res = train(cfg, ds)
    # rerun with zero main iterations: encoder must equal the post-warmup state
    res_warm = train(tiny_train_config(mode=Variant.M0, iterations=0, m0_warmup=2), ds)
    enc_a = {n: p for n, p in res.state.trainable_named() if n.startswith("encoder")}
    enc_b = {n: p for n, p in res_warm.state.trainable_named() if n.startswith("encoder")}
    for name, p in enc_a.items():
        np.testing.assert_array_equal(p.data, enc_b[name].data)
    # while the decoder kept moving
    dec_a = {n: p for n, p in res.state.trainable_named() if n.startswith("decoder")}
    dec_b = {n: p for n, p in res_warm.state.trainable_named() if n.startswith("decoder")}
    assert any(not np.array_equal(dec_a[n].data, dec_b[n].data) for n in dec_a)


def test_train_rejects_bad_data():
    cfg = tiny_train_config()
    ds = tiny_dataset()
    ds.train[0].label = "anomalous"
    with pytest.raises(ConfigError):
        train(cfg, ds)
    ds2 = tiny_dataset()
    ds2.train = []
    with pytest.raises(ConfigError):
        train(cfg, ds2)


def test_log_interval_and_final_step_logged():
    cfg = tiny_train_config(iterations=7, log_interval=3)
    res = train(cfg, tiny_dataset())
    assert [row.step for row in res.log] == [3, 6, 7]


def test_eval_history_tracking():
    cfg = tiny_train_config(iterations=4, eval_interval=2)
    res = train(cfg, tiny_dataset())
    steps = [s for s, _ in res.eval_history]
    assert steps == [2, 4]
    assert all(0.0 <= a <= 1.0 for _, a in res.eval_history)


def test_documented_defaults():
    cfg = TrainConfig()
    assert cfg.batch_size == 32
    assert cfg.m == 6
    assert cfg.beta == 0.9999
    assert cfg.lam == 0.2
    assert cfg.lr == 1e-4
    assert cfg.lr_encoder == 1e-5
    assert cfg.proto_kind == "daa"
    assert cfg.mode is Variant.M2PLUS
    assert (cfg.dim, cfg.patch, cfg.depth, cfg.heads) == (32, 8, 4, 4)
    assert cfg.extract == (2, 3, 4)
    assert cfg.decoder_depth == 4


def test_smoothed_loss_decreases_over_short_run():
    cfg = tiny_train_config(mode=Variant.M2PLUS, iterations=120, log_interval=2,
                            batch_size=4)
    res = train(cfg, tiny_dataset(train=16))
    recon = np.array([row.recon for row in res.log])
    head = recon[:5].mean()
    tail = recon[-5:].mean()
    assert tail < head
