"""Prototype bank: extraction, assignment oracles, losses, diagnostics."""

import math

import numpy as np
import pytest

from protoad import autodiff as ad
from protoad import prototypes as pb
from protoad.errors import ConfigError
from protoad.params import named_params
from protoad.rng import stream


def make_bank(seed=0, m=4, dim=8, heads=2, dtype=np.float64):
    return pb.init_bank(stream(seed, "model-init"), m, dim, heads, 2 * dim, dtype)


def brute_force_assign(features: np.ndarray, protos: np.ndarray):
    """O(N*M) loop with explicit cosine distances; ties keep the lowest index."""

    def cosdist(u, v):
        nu = np.linalg.norm(u)
        nv = np.linalg.norm(v)
        if nu < 1e-12 or nv < 1e-12:
            return 1.0
        return 1.0 - float(u @ v) / (nu * nv)

    owners = []
    dists = []
    for i in range(features.shape[0]):
        best_j, best_d = 0, math.inf
        for j in range(protos.shape[0]):
            d = cosdist(features[i], protos[j])
            if d < best_d:
                best_j, best_d = j, d
        owners.append(best_j)
        dists.append(best_d)
    return np.array(owners), np.array(dists)


# ---------------------------------------------------------------------------
# extraction


def test_extract_prototypes_shape_and_single_key_attention():
    bank = make_bank()
    feats = ad.tensor(stream(1, "test-misc").normal(size=(2, 1, 8)))  # N = 1
    protos = pb.extract_prototypes(bank, feats)
    assert protos.shape == (2, 4, 8)
    # with one key, attention is a convex sum over a single value: every
    # prototype must see the same attention payload per image, so the
    # differences between prototypes come from the token residuals alone
    assert np.isfinite(protos.data).all()


def test_single_key_attention_rows_sum_to_one():
    x = ad.tensor(stream(2, "test-misc").normal(size=(3, 5, 1)))
    w = ad.softmax(x, axis=-1)
    np.testing.assert_allclose(w.data, 1.0)


def test_extract_dim_mismatch_rejected():
    bank = make_bank(dim=8)
    feats = ad.tensor(np.zeros((1, 4, 16)))
    with pytest.raises(ConfigError):
        pb.extract_prototypes(bank, feats)


def test_extractor_grad_check():
    bank = make_bank(seed=3)
    r = stream(4, "test-misc")
    feats = ad.tensor(r.normal(size=(1, 5, 8)))
    w = ad.tensor(r.normal(size=(1, 4, 8)))

    def f(t):
        bank.tokens = t
        return ad.sum_all(ad.mul(pb.extract_prototypes(bank, feats), w))

    assert ad.grad_check(f, bank.tokens) < 1e-4


# ---------------------------------------------------------------------------
# assignment


def test_assign_orthogonal_axes_example():
    e1 = [1.0, 0.0, 0.0]
    e2 = [0.0, 1.0, 0.0]
    feats = np.array([e1, e1, e2])
    protos = np.array([e1, e2])
    table = pb.assign(feats, protos)
    assert table.owner.tolist() == [0, 0, 1]
    assert table.groups() == [[0, 1], [2]]
    np.testing.assert_allclose(table.distance, 0.0, atol=1e-12)


def test_assign_single_prototype_takes_all():
    feats = stream(5, "test-misc").normal(size=(7, 4))
    table = pb.assign(feats, feats[:1] * 0 + 1.0)
    assert set(table.owner.tolist()) == {0}
    assert table.groups()[0] == list(range(7))


def test_assign_matches_brute_force_on_random_instances():
    r = stream(6, "test-misc")
    for trial in range(20):
        feats = r.normal(size=(50, 6))
        protos = r.normal(size=(6, 6))
        table = pb.assign(feats, protos)
        owners, dists = brute_force_assign(feats, protos)
        np.testing.assert_array_equal(table.owner, owners)
        np.testing.assert_allclose(table.distance, dists, atol=1e-12)


def test_assignment_partition_property():
    r = stream(7, "test-misc")
    feats = r.normal(size=(40, 5))
    protos = r.normal(size=(4, 5))
    groups = pb.assign(feats, protos).groups()
    flat = sorted(i for grp in groups for i in grp)
    assert flat == list(range(40))


# ---------------------------------------------------------------------------
# losses


def proto_tensor(arr):
    return ad.tensor(np.asarray(arr, dtype=np.float64))


def test_coherence_zero_when_tokens_equal_prototypes():
    protos = stream(8, "test-misc").normal(size=(3, 4))
    feats = protos[[0, 1, 2, 0, 1]]
    loss = pb.coherence_loss(proto_tensor(feats), proto_tensor(protos))
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_coherence_is_mean_of_nearest_distances():
    # unit tokens built with exact cosine distances d to their nearest
    # prototype; d < 1 - 1/sqrt(2) keeps the intended prototype nearest
    protos = np.array([[1.0, 0.0], [0.0, 1.0]])
    d1, d2 = 0.2, 0.25
    t1 = np.array([1 - d1, math.sqrt(1 - (1 - d1) ** 2)])
    t2 = np.array([math.sqrt(1 - (1 - d2) ** 2), 1 - d2])
    feats = np.stack([t1, t2])
    table = pb.assign(feats, protos)
    assert table.owner.tolist() == [0, 1]
    loss = pb.coherence_loss(proto_tensor(feats), proto_tensor(protos))
    assert loss.item() == pytest.approx((d1 + d2) / 2, abs=1e-9)


def test_daa_empty_group_contributes_zero():
    # both tokens sit at distance 0.5 from prototype 0; prototype 1 unused
    p0 = np.array([1.0, 0.0])
    tok = np.array([0.5, math.sqrt(0.75)])  # cos = 0.5 -> distance 0.5
    feats = np.stack([tok, tok])
    protos = np.stack([p0, -p0 * 0.9])
    loss = pb.daa_loss(proto_tensor(feats), proto_tensor(protos))
    assert loss.item() == pytest.approx(0.5 / 2, abs=1e-9)


def test_daa_all_zero_distances():
    protos = stream(9, "test-misc").normal(size=(4, 6))
    feats = protos[[0, 1, 2, 3, 0, 2]]
    loss = pb.daa_loss(proto_tensor(feats), proto_tensor(protos))
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def balanced_instance(rng, n_per_group, m, dim):
    """Features assigned in equal-sized groups to m separated prototypes."""
    protos = np.eye(m, dim) * 3.0
    feats = []
    for j in range(m):
        for _ in range(n_per_group):
            noise = rng.normal(size=dim) * 0.05
            feats.append(protos[j] + noise)
    return np.array(feats), protos


def test_balanced_assignment_identity():
    r = stream(10, "test-misc")
    for trial in range(20):
        feats, protos = balanced_instance(r, n_per_group=5, m=4, dim=6)
        table = pb.assign(feats, protos)
        counts = pb.assignment_histogram(table)
        assert (counts == 5).all()  # construction sanity
        c = pb.coherence_loss(proto_tensor(feats), proto_tensor(protos)).item()
        d = pb.daa_loss(proto_tensor(feats), proto_tensor(protos)).item()
        assert abs(c - d) < 1e-10


def test_daa_invariant_under_prototype_permutation():
    r = stream(11, "test-misc")
    feats = r.normal(size=(30, 5))
    protos = r.normal(size=(4, 5))
    base = pb.daa_loss(proto_tensor(feats), proto_tensor(protos)).item()
    for trial in range(5):
        perm = r.permutation(4)
        permuted = pb.daa_loss(proto_tensor(feats), proto_tensor(protos[perm])).item()
        assert permuted == pytest.approx(base, abs=1e-12)


def test_loss_bounds():
    r = stream(12, "test-misc")
    for trial in range(10):
        feats = proto_tensor(r.normal(size=(20, 4)))
        protos = proto_tensor(r.normal(size=(3, 4)))
        for fn in (pb.coherence_loss, pb.daa_loss):
            v = fn(feats, protos).item()
            assert 0.0 <= v <= 2.0


def test_gradients_reach_extractor_not_features():
    # production wiring: the extractor sees detached features, and the
    # loss detaches its own feature argument, so nothing reaches them
    bank = make_bank(seed=13)
    feats = ad.param(stream(14, "test-misc").normal(size=(2, 10, 8)))
    with ad.Graph() as g:
        protos = pb.extract_prototypes(bank, ad.stop_grad(feats))
        loss = pb.daa_loss(feats, protos)
    g.backward(loss)
    assert feats.grad is None
    grads = [p.grad for _, p in named_params(bank)]
    assert any(gr is not None and np.abs(gr).sum() > 0 for gr in grads)
    assert bank.tokens.grad is not None


# ---------------------------------------------------------------------------
# diagnostics


def test_histogram_sums_to_token_count():
    r = stream(15, "test-misc")
    feats = r.normal(size=(33, 4))
    protos = r.normal(size=(5, 4))
    counts = pb.assignment_histogram(pb.assign(feats, protos))
    assert counts.sum() == 33


def test_histogram_of_handbuilt_example():
    e1 = [1.0, 0.0]
    e2 = [0.0, 1.0]
    table = pb.assign(np.array([e1, e1, e2]), np.array([e1, e2]))
    np.testing.assert_array_equal(pb.assignment_histogram(table), [2, 1])


def test_entropy_monopoly_uniform_and_example():
    assert pb.assignment_entropy(np.array([10, 0, 0, 0])) == 0.0
    m = 6
    assert pb.assignment_entropy(np.full(m, 7)) == pytest.approx(math.log(m), abs=1e-12)
    expected = -(0.75 * math.log(0.75) + 0.25 * math.log(0.25))
    assert pb.assignment_entropy(np.array([3, 1])) == pytest.approx(expected, abs=1e-9)
    assert expected == pytest.approx(0.5623, abs=5e-5)


def test_entropy_rejects_empty_histogram():
    with pytest.raises(ValueError):
        pb.assignment_entropy(np.zeros(4))


def test_collapsed_histogram_shape():
    table = pb.assign(np.ones((12, 3)), np.array([[1.0, 1.0, 1.0], [-1.0, 0.0, 0.0]]))
    counts = pb.assignment_histogram(table)
    assert counts[0] == 12 and counts[1] == 0
