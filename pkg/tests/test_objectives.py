import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdanet import model as md
from cdanet import numerics as nx
from cdanet import objectives as ob
from cdanet.features import ConfigError
from conftest import numeric_grad, random_batch, rel_err


def _sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def _orthogonal(rng, d):
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


@pytest.mark.parametrize("fn", [ob.loss_vanilla, ob.loss_cross])
def test_bce_loss_examples(fn):
    assert abs(fn(np.zeros((3, 1)), np.ones((3, 1)))[0] - math.log(2)) < 1e-12
    # probabilities are clamped to [1e-7, 1 - 1e-7], which bounds the floor
    assert fn(np.array([[40.0], [-40.0]]), np.array([[1.0], [0.0]]))[0] <= 1.01 * nx.PROB_CLAMP
    expected = -0.5 * (math.log(_sig(1.0)) + math.log(1 - _sig(-1.0)))
    v = fn(np.array([[1.0], [-1.0]]), np.array([[1.0], [0.0]]))[0]
    assert abs(v - expected) < 1e-12
    assert abs(v - 0.313262) < 1e-6


@pytest.mark.parametrize("fn", [ob.loss_vanilla, ob.loss_cross])
def test_bce_loss_errors(fn):
    with pytest.raises(nx.EmptyBatchError):
        fn(np.zeros((0, 1)), np.zeros((0, 1)))
    with pytest.raises(nx.LabelError):
        fn(np.zeros((1, 1)), np.array([[0.5]]))


def test_logit_gradient_is_p_minus_y_over_n():
    logit = np.array([[0.3], [-1.2], [2.0]])
    y = np.array([[1.0], [0.0], [0.0]])
    _, g = ob.loss_vanilla(logit, y)
    p = 1 / (1 + np.exp(-logit))
    np.testing.assert_allclose(g, (p - y) / 3, rtol=1e-12)


def test_cross_loss_with_zero_translator_is_constant_bce(toy_schemas, toy_cfg):
    m = md.TranslationModel(*toy_schemas, toy_cfg)
    m.W_tran["target"].value[...] = 0.0
    rng = np.random.default_rng(0)
    bs, bt = random_batch(toy_schemas[0], 4, rng), random_batch(toy_schemas[1], 6, rng)
    out = m.forward(bs, bt)
    c = m.towers["source"].forward(np.zeros((1, toy_cfg.d)))[0][0, 0]
    p = _sig(c)
    y = bt.labels[:, 0]
    expected = -np.mean(y * math.log(p) + (1 - y) * math.log(1 - p))
    assert abs(ob.loss_cross(out.logit_t_cross, bt.labels)[0] - expected) < 1e-12


def test_cross_loss_matches_hand_composition(toy_schemas, toy_cfg):
    m = md.TranslationModel(*toy_schemas, toy_cfg)
    rng = np.random.default_rng(1)
    bs, bt = random_batch(toy_schemas[0], 4, rng), random_batch(toy_schemas[1], 4, rng)
    out = m.forward(bs, bt)
    # recompose: translate with an explicit matvec, then the source tower layer by layer
    W = m.W_tran["target"].value
    zp = np.array([W @ row for row in out.z_t])
    x = zp
    layers = m.towers["source"].mlp.layers
    for i, layer in enumerate(layers):
        x = x @ layer.W.value + layer.b.value
        if i < len(layers) - 1:
            x = np.maximum(x, 0)
    p = 1 / (1 + np.exp(-x[:, 0]))
    y = bt.labels[:, 0]
    expected = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert abs(ob.loss_cross(out.logit_t_cross, bt.labels)[0] - expected) < 1e-12


def test_orth_examples():
    rng = np.random.default_rng(2)
    z = rng.standard_normal((5, 3))
    assert ob.loss_orth(np.eye(3), np.eye(3), z, z)[0] == 0.0
    a = math.pi / 6
    R = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    z2 = rng.standard_normal((4, 2))
    assert ob.loss_orth(R, R, z2, z2)[0] < 1e-12
    z1 = np.array([[0.6, 0.8]])
    v, _, _ = ob.orth_term(2 * np.eye(2), z1)
    assert abs(v - 9.0) < 1e-12


def test_orth_normalization_modes():
    rng = np.random.default_rng(3)
    W, z = rng.standard_normal((3, 3)), rng.standard_normal((6, 3))
    vb = ob.orth_term(W, z, "batch")[0]
    vn = ob.orth_term(W, z, "none")[0]
    assert abs(vn - 6 * vb) < 1e-10
    # the unnormalized value is the literal row-wise sum
    brute = sum(np.sum((W.T @ W @ row - row) ** 2) for row in z)
    assert abs(vn - brute) < 1e-10


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 6), st.integers(1, 8))
def test_orth_zero_for_orthogonal_translators(seed, d, n):
    rng = np.random.default_rng(seed)
    Ws, Wt = _orthogonal(rng, d), _orthogonal(rng, d)
    z_s, z_t = 10 * rng.standard_normal((n, d)), rng.standard_normal((n + 1, d))
    v, _ = ob.loss_orth(Ws, Wt, z_s, z_t)
    assert 0.0 <= v < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000))
def test_orth_nonnegative(seed):
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((4, 4))
    assert ob.orth_term(W, rng.standard_normal((3, 4)))[0] >= 0


@pytest.mark.parametrize("norm", ["batch", "none"])
def test_orth_gradients(norm):
    rng = np.random.default_rng(4)
    W, z = rng.standard_normal((4, 4)), rng.standard_normal((3, 4))
    _, dW, dz = ob.orth_term(W, z, norm)
    loss = lambda: ob.orth_term(W, z, norm)[0]
    for arr, g in ((W, dW), (z, dz)):
        for idx in np.ndindex(arr.shape):
            assert rel_err(numeric_grad(loss, arr, idx), g[idx]) < 1e-6


def _parts(rng):
    return {k: float(rng.uniform(0, 3)) for k in ("vani_s", "vani_t", "cross_s", "cross_t", "orth")}


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000), st.floats(0, 5), st.floats(0, 5))
def test_breakdown_identity(seed, alpha, beta):
    p = _parts(np.random.default_rng(seed))
    b = ob.loss_translation_total(p, ob.LossWeights(alpha, beta))
    expected = p["vani_s"] + p["vani_t"] + alpha * (p["cross_s"] + p["cross_t"]) + beta * p["orth"]
    assert abs(b.total - expected) < 1e-10
    assert b.as_dict()["vani_t"] == p["vani_t"]


def test_total_zero_weights_and_linearity():
    p = _parts(np.random.default_rng(5))
    b0 = ob.loss_translation_total(p, ob.LossWeights(0.0, 0.0))
    assert b0.total == p["vani_s"] + p["vani_t"]
    b1 = ob.loss_translation_total(p, ob.LossWeights(0.01, 0.1))
    b2 = ob.loss_translation_total(p, ob.LossWeights(0.02, 0.1))
    base = ob.loss_translation_total(p, ob.LossWeights(0.0, 0.1)).total
    assert abs((b2.total - base) - 2 * (b1.total - base)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000), st.floats(0, 2), st.floats(0, 2), st.floats(0, 2))
def test_total_monotone_in_weights(seed, a, b, delta):
    p = _parts(np.random.default_rng(seed))
    t = ob.loss_translation_total(p, ob.LossWeights(a, b)).total
    assert ob.loss_translation_total(p, ob.LossWeights(a + delta, b)).total >= t
    assert ob.loss_translation_total(p, ob.LossWeights(a, b + delta)).total >= t


def test_loss_weights_reject_negative():
    with pytest.raises(ConfigError):
        ob.LossWeights(-0.1, 0.1)
    with pytest.raises(ConfigError):
        ob.LossWeights(0.1, -1.0)


def test_augmentation_loss_cases():
    rng = np.random.default_rng(6)
    logit = rng.standard_normal((5, 1))
    y = rng.integers(0, 2, (5, 1)).astype(float)
    W, z = rng.standard_normal((3, 3)), rng.standard_normal((5, 3))
    bce = ob.loss_vanilla(logit, y)[0]
    v, g = ob.loss_augmentation(logit, y, W, z, ob.LossWeights(0.5, 0.0))
    assert v == bce and g["W_t"] is None
    v, _ = ob.loss_augmentation(logit, y, _orthogonal(rng, 3), z, ob.LossWeights(0.5, 0.7))
    assert abs(v - bce) < 1e-12
    v, _ = ob.loss_augmentation(logit, y, W, z, ob.LossWeights(0.5, 0.7), "none")
    brute = bce + 0.7 * sum(np.sum((W.T @ (W @ row) - row) ** 2) for row in z)
    assert abs(v - brute) < 1e-12
    with pytest.raises(nx.EmptyBatchError):
        ob.loss_augmentation(np.zeros((0, 1)), np.zeros((0, 1)), W, np.zeros((0, 3)),
                             ob.LossWeights())


def test_objective_breakdown_matches_recomputation(toy_schemas, toy_cfg):
    m = md.TranslationModel(*toy_schemas, toy_cfg)
    rng = np.random.default_rng(7)
    bs, bt = random_batch(toy_schemas[0], 4, rng), random_batch(toy_schemas[1], 4, rng)
    w = ob.LossWeights(0.2, 0.4)
    b = ob.translation_objective(m, bs, bt, w)
    out = m.forward(bs, bt)
    assert b.vani_s == ob.loss_vanilla(out.logit_s, bs.labels)[0]
    assert b.cross_t == ob.loss_cross(out.logit_t_cross, bt.labels)[0]
    assert abs(b.total - (b.vani_s + b.vani_t + 0.2 * (b.cross_s + b.cross_t) + 0.4 * b.orth)) < 1e-10
    assert any(np.any(p.grad != 0) for p in m.store)


def test_zero_alpha_leaves_no_cross_gradient(toy_schemas, toy_cfg):
    # with alpha = beta = 0 the translators receive no gradient at all
    m = md.TranslationModel(*toy_schemas, toy_cfg)
    rng = np.random.default_rng(8)
    bs, bt = random_batch(toy_schemas[0], 4, rng), random_batch(toy_schemas[1], 4, rng)
    m.store.zero_grad()
    ob.translation_objective(m, bs, bt, ob.LossWeights(0.0, 0.0))
    assert not m.W_tran["source"].grad.any() and not m.W_tran["target"].grad.any()
