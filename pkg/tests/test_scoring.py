"""Anomaly maps and metrics, checked against brute-force oracles."""

import itertools

import numpy as np
import pytest

from protoad import scoring
from protoad.errors import MetricError
from protoad.rng import stream


# ---------------------------------------------------------------------------
# oracles


def auc_pair_counting(scores, labels):
    """Count correctly ordered positive-negative pairs; ties worth 0.5."""
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    total = 0.0
    for p, n in itertools.product(pos, neg):
        if p > n:
            total += 1.0
        elif p == n:
            total += 0.5
    return total / (len(pos) * len(neg))


def f1_exhaustive(scores, labels):
    best = (-1.0, None)
    for t in sorted(set(scores)):
        pred = [s >= t for s in scores]
        tp = sum(p and l for p, l in zip(pred, labels))
        fp = sum(p and not l for p, l in zip(pred, labels))
        fn = sum((not p) and l for p, l in zip(pred, labels))
        f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0
        if f1 > best[0]:
            best = (f1, t)
    return best


# ---------------------------------------------------------------------------
# maps


def test_anomaly_map_zero_when_equal():
    r = stream(0, "test-misc")
    feats = [r.normal(size=(2, 16, 8))]
    out = scoring.anomaly_map(feats, feats, (4, 4))
    assert out.shape == (2, 4, 4)
    np.testing.assert_allclose(out, 0.0, atol=1e-12)


def test_anomaly_map_single_token_locality():
    r = stream(1, "test-misc")
    ref = r.normal(size=(1, 16, 8))
    dec = ref.copy()
    dec[0, 5] = -ref[0, 5]  # flip one token -> distance 2 there
    out = scoring.anomaly_map([ref], [dec], (4, 4))
    flat = out[0].reshape(-1)
    assert flat[5] == pytest.approx(2.0, abs=1e-9)
    mask = np.ones(16, dtype=bool)
    mask[5] = False
    np.testing.assert_allclose(flat[mask], 0.0, atol=1e-9)


def test_anomaly_map_values_in_range():
    r = stream(2, "test-misc")
    refs = [r.normal(size=(3, 16, 8)) for _ in range(2)]
    decs = [r.normal(size=(3, 16, 8)) for _ in range(2)]
    out = scoring.anomaly_map(refs, decs, (4, 4))
    assert (out >= 0.0).all() and (out <= 2.0).all()


def test_upsample_constant_is_constant():
    up = scoring.upsample_smooth(np.full((4, 4), 0.37), 32, 32, sigma=2.0)
    np.testing.assert_allclose(up, 0.37, atol=1e-9)


def test_upsample_identity_when_same_grid_and_no_blur():
    r = stream(3, "test-misc")
    tok = r.uniform(size=(8, 8))
    out = scoring.upsample_smooth(tok, 8, 8, sigma=0.0)
    np.testing.assert_allclose(out, tok, atol=1e-12)


def test_bilinear_upsample_brackets_extremes():
    r = stream(4, "test-misc")
    for _ in range(5):
        tok = r.uniform(size=(5, 7))
        up = scoring.upsample_bilinear(tok, 40, 56)
        assert up.min() >= tok.min() - 1e-12
        assert up.max() <= tok.max() + 1e-12


def test_gaussian_blur_preserves_mean():
    r = stream(5, "test-misc")
    img = r.uniform(size=(48, 48))
    for sigma in (0.7, 2.0, 4.0):
        blurred = scoring.gaussian_blur(img, sigma)
        assert blurred.mean() == pytest.approx(img.mean(), abs=1e-6)


def test_image_score_constant_and_single_pixel():
    assert scoring.image_score(np.full((10, 10), 0.3)) == pytest.approx(0.3)
    m = np.zeros((10, 10))
    m[3, 4] = 1.0
    assert scoring.image_score(m) == pytest.approx(1.0)  # top 1% of 100 px = 1 px


def test_image_score_monotone_under_increase():
    r = stream(6, "test-misc")
    m = r.uniform(size=(20, 20))
    base = scoring.image_score(m)
    for _ in range(20):
        bumped = m.copy()
        i, j = r.integers(0, 20, size=2)
        bumped[i, j] += r.uniform(0.0, 1.0)
        assert scoring.image_score(bumped) >= base - 1e-12


def test_image_score_methods():
    m = np.linspace(0.0, 1.0, 64).reshape(8, 8)
    assert scoring.image_score(m, "max") == pytest.approx(1.0)
    assert scoring.image_score(m, "mean") == pytest.approx(m.mean())


# ---------------------------------------------------------------------------
# metrics


def test_auc_perfect_and_inverted():
    labels = np.array([0, 0, 1, 1])
    assert scoring.auc([0.1, 0.2, 0.8, 0.9], labels) == 1.0
    assert scoring.auc([0.9, 0.8, 0.2, 0.1], labels) == 0.0


def test_auc_hand_example():
    assert scoring.auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75)


def test_auc_matches_pair_counting_oracle():
    r = stream(7, "test-misc")
    for trial in range(30):
        n = int(r.integers(4, 60))
        labels = np.zeros(n, dtype=bool)
        labels[: max(1, n // 3)] = True
        r.shuffle(labels)
        if labels.all() or (~labels).all():
            continue
        scores = np.round(r.uniform(size=n), 2)  # coarse grid forces ties
        assert scoring.auc(scores, labels) == pytest.approx(
            auc_pair_counting(scores, labels), abs=1e-12
        )


def test_auc_invariant_under_monotone_transform():
    r = stream(8, "test-misc")
    scores = r.uniform(size=40)
    labels = r.uniform(size=40) > 0.6
    labels[:2] = [True, False]
    base = scoring.auc(scores, labels)
    assert scoring.auc(np.exp(3 * scores), labels) == pytest.approx(base, abs=1e-12)
    assert scoring.auc(scores**3 + 7, labels) == pytest.approx(base, abs=1e-12)


def test_auc_single_class_rejected():
    with pytest.raises(MetricError):
        scoring.auc([0.1, 0.2], [1, 1])


def test_thresholded_metrics_perfect_separation():
    rep = scoring.thresholded_metrics([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])
    assert rep.f1 == rep.acc == rep.sen == rep.spe == 1.0


def test_thresholded_metrics_all_equal_scores():
    rep = scoring.thresholded_metrics([0.5, 0.5, 0.5, 0.5], [0, 0, 1, 1])
    assert rep.sen == 1.0 and rep.spe == 0.0


def test_thresholded_metrics_hand_example():
    rep = scoring.thresholded_metrics([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    f1_best, t_best = f1_exhaustive([0.1, 0.4, 0.35, 0.8], [False, False, True, True])
    assert rep.f1 == pytest.approx(f1_best)
    assert rep.threshold == pytest.approx(0.35)


def test_thresholded_metrics_matches_exhaustive_oracle():
    r = stream(9, "test-misc")
    for trial in range(25):
        n = int(r.integers(6, 80))
        labels = r.uniform(size=n) > 0.5
        if labels.all() or (~labels).all():
            labels[0] = True
            labels[1] = False
        scores = np.round(r.uniform(size=n), 2)
        rep = scoring.thresholded_metrics(scores, labels)
        f1_best, t_best = f1_exhaustive(scores.tolist(), labels.tolist())
        assert rep.f1 == pytest.approx(f1_best, abs=1e-12)
        assert rep.threshold == pytest.approx(t_best, abs=1e-12)


def test_metric_report_csv_shape():
    rep = scoring.thresholded_metrics([0.1, 0.9], [0, 1])
    assert rep.CSV_HEADER == "auc,f1,acc,sen,spe,threshold"
    assert len(rep.csv_row().split(",")) == 6
