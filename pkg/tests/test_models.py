import numpy as np
import pytest
from hypothesis import given, strategies as st

from querywatch import models
from querywatch import numerics as nx
from querywatch.models import Dataset


def _separable(rng, n=400, dim=10):
    x = rng.uniform(0, 1, (n, dim))
    y = (x[:, 0] + x[:, 1] > 1.0).astype(np.int64)
    # push points off the boundary so the classes are cleanly separable
    x[:, 0] += np.where(y == 1, 0.15, -0.15)
    return Dataset(np.clip(x, 0, 1), y, 2, (1, 1, dim))


def test_separable_two_class_set_is_learned(rng):
    train, test = _separable(rng), _separable(rng)
    cfg = models.ClassifierConfig(hidden=(16,), optim=nx.OptimConfig(0.05, 0.9, 32, 60))
    net = models.train_classifier(train, cfg, rng)
    assert models.accuracy(net, test) >= 0.99


def test_zero_epochs_is_near_chance(rng):
    data = _separable(rng, 2000)
    cfg = models.ClassifierConfig(hidden=(16,), optim=nx.OptimConfig(0.05, 0.9, 32, 0))
    acc = models.accuracy(models.train_classifier(data, cfg, rng), data)
    assert 0.2 <= acc <= 0.8


def test_single_class_rejected(rng):
    x = rng.uniform(0, 1, (10, 4))
    with pytest.raises(ValueError):
        models.train_classifier(Dataset(x, np.zeros(10, dtype=np.int64), 2, (1, 1, 4)))


def test_desk_classifier_accuracy(desk):
    assert models.accuracy(desk.classifier, desk.test) >= 0.85


@given(st.integers(0, 2**31 - 1))
def test_label_is_argmax_of_soft(seed):
    rng = np.random.default_rng(seed)
    net = nx.init_model([6, 5, 4], ["relu", "softmax"], rng)
    x = rng.uniform(0, 1, (20, 6))
    p = models.classify_soft_batch(net, x)
    assert np.array_equal(models.classify_batch(net, x), p.argmax(axis=1))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(p, nx.softmax(nx.predict(net, x)), atol=0)


def test_uniform_logits_break_ties_low():
    net = nx.NetModel((nx.Layer(3, 4, "softmax"),), [(np.zeros((3, 4)), np.zeros(4))])
    assert models.classify(net, np.zeros(3)) == 0


def test_blinder_rejects_raw_classifier(desk):
    with pytest.raises(TypeError):
        models.train_blinder(desk.train.images[:10], desk.classifier)


def test_blinder_noise_term_unused_when_c_is_zero(rng):
    dim = 4
    blinder = nx.init_model([dim + 2, 3, dim], ["relu", "identity"], rng)
    surrogate = nx.init_model([dim, 3], ["softmax"], rng)
    x = rng.uniform(0.3, 0.7, (5, dim))
    noise = (rng.uniform(0, 1, (5, 2)), rng.uniform(0, 1, (5, 2)))
    l_small = nx.loss_value(blinder, x, kind="blinder", surrogate=surrogate, noise=noise, c=0.0, d=0.1)
    l_big = nx.loss_value(blinder, x, kind="blinder", surrogate=surrogate, noise=noise, c=0.0, d=100.0)
    assert l_small == l_big


def test_desk_blinder_properties(desk):
    b = desk.blinder
    x = desk.test.images[:300]
    a1 = models.blind_batch(b, x, np.random.default_rng(0))
    a2 = models.blind_batch(b, x, np.random.default_rng(1))
    assert a1.min() >= 0 and a1.max() <= 1
    assert np.linalg.norm(a1 - a2, axis=1).mean() >= 0.6 * b.d_b
    f = desk.surrogate.net
    agree = np.mean(models.classify_batch(f, a1) == models.classify_batch(f, x))
    assert agree >= 0.7


def test_blind_is_seed_deterministic(desk):
    x = desk.test.images[0]
    a = models.blind(desk.blinder, x, np.random.default_rng(5))
    assert np.array_equal(a, models.blind(desk.blinder, x, np.random.default_rng(5)))
    assert not np.array_equal(a, models.blind(desk.blinder, x, np.random.default_rng(6)))


def test_blinder_model_round_trip(desk):
    back = models.Blinder.from_model(nx.loads_model(nx.dumps_model(desk.blinder.to_model())))
    assert (back.noise_dim, back.d_b, back.c_b) == (desk.blinder.noise_dim, desk.blinder.d_b, desk.blinder.c_b)


def test_default_blinder_distance_scales_with_dimension():
    assert models.default_blinder_distance(3072) == pytest.approx(10.0)
    assert models.default_blinder_distance(768) == pytest.approx(5.0)


def test_surrogate_split_is_disjoint_fraction(desk):
    idx = desk.surrogate.train_indices
    assert len(idx) == int(round(0.1 * len(desk.train))) and len(np.unique(idx)) == len(idx)
