import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swrisk.errors import DomainError, FormatError, ShapeError, TrainingError
from swrisk.nn import (AdamState, DenseLayer, LayerNormParams, MixupConfig, adam_step,
                       dense_backward, dense_forward, grad_check, layer_norm,
                       layer_norm_backward, load_checkpoint, make_rng, mixup_batch, one_hot,
                       save_checkpoint, sgd_step, softmax, softmax_xent)


def numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f()
        flat[i] = orig - eps
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8))


# -- rng -----------------------------------------------------------------------

def test_rng_streams():
    a = make_rng(3, 0).standard_normal(4)
    np.testing.assert_array_equal(a, make_rng(3, 0).standard_normal(4))
    assert not np.array_equal(a, make_rng(3, 1).standard_normal(4))
    assert not np.array_equal(a, make_rng(4, 0).standard_normal(4))
    with pytest.raises(DomainError):
        make_rng(-1)


# -- dense ---------------------------------------------------------------------

def test_dense_examples():
    x = np.array([0.5, -2.0, 3.0])
    np.testing.assert_array_equal(dense_forward(DenseLayer(np.eye(3), np.zeros(3)), x), x)
    layer = DenseLayer(np.array([[1.0, 2.0]]), np.array([3.0]))
    np.testing.assert_array_equal(dense_forward(layer, np.array([4.0, 5.0])), [17.0])
    with pytest.raises(ShapeError):
        dense_forward(layer, np.ones(3))


def test_dense_backward_matches_finite_differences(rng):
    layer = DenseLayer(rng.standard_normal((4, 5)), rng.standard_normal(4))
    x = rng.standard_normal((3, 5))
    up = rng.standard_normal((3, 4))

    def loss():
        return float(np.sum(up * dense_forward(layer, x)))

    gx, gW, gb = dense_backward(layer, x, up)
    assert rel_err(gx, numeric_grad(loss, x)) <= 1e-6
    assert rel_err(gW, numeric_grad(loss, layer.W)) <= 1e-6
    assert rel_err(gb, numeric_grad(loss, layer.b)) <= 1e-6


# -- layer norm ----------------------------------------------------------------

def test_layer_norm_examples():
    p = LayerNormParams(np.ones(4), np.zeros(4))
    y, _ = layer_norm(np.full(4, 3.7), p)
    np.testing.assert_array_equal(y, 0.0)
    y, _ = layer_norm(np.array([-1.0, 1.0]), LayerNormParams(np.ones(2), np.zeros(2), eps=1e-12))
    np.testing.assert_allclose(y, [-1.0, 1.0], atol=1e-9)
    with pytest.raises(ShapeError):
        layer_norm(np.ones(1), LayerNormParams(np.ones(1), np.zeros(1)))
    with pytest.raises(DomainError):
        LayerNormParams(np.ones(2), np.zeros(2), eps=0.0)


def test_layer_norm_backward_matches_finite_differences(rng):
    p = LayerNormParams(rng.standard_normal(6), rng.standard_normal(6))
    x = rng.standard_normal((4, 6))
    up = rng.standard_normal((4, 6))

    def loss():
        return float(np.sum(up * layer_norm(x, p)[0]))

    _, cache = layer_norm(x, p)
    gx, gg, gb = layer_norm_backward(cache, up, p)
    assert rel_err(gx, numeric_grad(loss, x)) <= 1e-6
    assert rel_err(gg, numeric_grad(loss, p.gamma)) <= 1e-6
    assert rel_err(gb, numeric_grad(loss, p.beta)) <= 1e-6


# -- softmax / cross-entropy ----------------------------------------------------

def test_xent_examples():
    loss, _ = softmax_xent(np.array([0.0, 0.0]), np.array([1.0, 0.0]))
    assert math.isclose(loss, math.log(2), rel_tol=1e-12)
    loss, grad = softmax_xent(np.array([1000.0, 0.0]), np.array([1.0, 0.0]))
    assert math.isfinite(loss) and loss < 1e-12
    assert np.all(np.isfinite(grad))


def test_xent_rejects_non_distribution():
    with pytest.raises(DomainError):
        softmax_xent(np.zeros(2), np.array([0.7, 0.7]))
    with pytest.raises(DomainError):
        softmax_xent(np.zeros(2), np.array([1.5, -0.5]))


def test_xent_batch_gradient(rng):
    logits = rng.standard_normal((5, 2))
    target = one_hot(rng.integers(0, 2, 5))
    _, g = softmax_xent(logits, target)
    assert rel_err(g, numeric_grad(lambda: softmax_xent(logits, target)[0], logits)) <= 1e-6


@settings(max_examples=200)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8))
def test_softmax_is_positive_distribution(z):
    p = softmax(np.array(z))
    assert abs(p.sum() - 1.0) <= 1e-12
    assert np.all(p > 0)


@settings(max_examples=200)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0))
def test_xent_is_linear_in_target(seed, lam):
    r = np.random.default_rng(seed)
    logits = r.standard_normal(2) * 5
    t1, t2 = r.dirichlet([1, 1]), r.dirichlet([1, 1])
    mixed = softmax_xent(logits, lam * t1 + (1 - lam) * t2)[0]
    split = lam * softmax_xent(logits, t1)[0] + (1 - lam) * softmax_xent(logits, t2)[0]
    assert abs(mixed - split) <= 1e-12


# -- mixup ------------------------------------------------------------------------

def test_mixup_lambda_one_is_identity(rng):
    X, Y = rng.standard_normal((6, 3)), one_hot([0, 1, 0, 1, 1, 0])
    Xm, Ym, lam, _ = mixup_batch(X, Y, MixupConfig(fixed_lambda=1.0), rng)
    assert lam == 1.0
    assert Xm.tobytes() == X.tobytes() and Ym.tobytes() == Y.tobytes()


def test_mixup_midpoint():
    X = np.array([[0.0, 2.0], [2.0, 0.0]])
    Y = one_hot([0, 1])
    # seed 3 pairs row 0 with row 1
    Xm, Ym, _, perm = mixup_batch(X, Y, MixupConfig(fixed_lambda=0.5), make_rng(3))
    np.testing.assert_array_equal(perm, [1, 0])
    np.testing.assert_array_equal(Xm, [[1.0, 1.0], [1.0, 1.0]])
    np.testing.assert_array_equal(Ym, [[0.5, 0.5], [0.5, 0.5]])


def test_mixup_skips_single_row_and_disabled(rng):
    X, Y = np.ones((1, 3)), one_hot([1])
    assert mixup_batch(X, Y, MixupConfig(), rng)[0] is X
    X2 = rng.standard_normal((4, 3))
    assert mixup_batch(X2, one_hot([0, 1, 0, 1]), MixupConfig(enabled=False), rng)[0] is X2


def test_mixup_mixes_modalities_together(rng):
    a, b = rng.standard_normal((5, 2)), rng.standard_normal((5, 3))
    (am, bm), _, lam, perm = mixup_batch((a, b), one_hot([0, 1, 1, 0, 1]), MixupConfig(), rng)
    np.testing.assert_allclose(am, lam * a + (1 - lam) * a[perm], rtol=1e-15)
    np.testing.assert_allclose(bm, lam * b + (1 - lam) * b[perm], rtol=1e-15)


def test_beta_lambda_mean():
    draws = make_rng(0, 2).beta(0.2, 0.2, 100_000)
    assert abs(draws.mean() - 0.5) <= 0.01


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1), st.integers(2, 40))
def test_mixup_preserves_label_mass(seed, n):
    r = np.random.default_rng(seed)
    Y = one_hot(r.integers(0, 2, n))
    _, Ym, lam, _ = mixup_batch(r.standard_normal((n, 3)), Y, MixupConfig(), r)
    assert 0.0 <= lam <= 1.0
    np.testing.assert_allclose(Ym.sum(axis=1), 1.0, atol=1e-12)


# -- optimizers -------------------------------------------------------------------

def test_adam_zero_gradient():
    p = {"w": np.array([1.0, -2.0])}
    state = AdamState()
    adam_step(p, {"w": np.array([0.4, 0.4])}, state)
    m0, v0 = state.m["w"].copy(), state.v["w"].copy()
    for _ in range(10):
        adam_step(p, {"w": np.zeros(2)}, state)
    assert np.all(np.abs(state.m["w"]) < np.abs(m0)) and np.all(state.v["w"] < v0)
    p2 = {"w": np.array([1.0, -2.0])}
    adam_step(p2, {"w": np.zeros(2)}, AdamState())
    np.testing.assert_array_equal(p2["w"], [1.0, -2.0])


def test_adam_first_step():
    p = {"w": np.array([0.0])}
    adam_step(p, {"w": np.array([1.0])}, AdamState(lr=1e-3))
    # m_hat = 1, v_hat = 1 -> delta = -lr * 1 / (1 + 1e-8)
    assert math.isclose(p["w"][0], -1e-3 / (1 + 1e-8), rel_tol=1e-12)


def test_adam_constant_gradient_limit():
    p = {"w": np.array([0.0, 0.0])}
    g = {"w": np.array([3.0, -0.01])}
    state = AdamState(lr=1e-3)
    for _ in range(499):
        adam_step(p, g, state)
    before = p["w"].copy()
    adam_step(p, g, state)
    np.testing.assert_allclose(np.abs(p["w"] - before), 1e-3, rtol=0.1)


def test_non_finite_gradient_names_parameter():
    with pytest.raises(TrainingError, match="hidden.W"):
        adam_step({"hidden.W": np.zeros(2)}, {"hidden.W": np.array([np.nan, 0])}, AdamState())
    with pytest.raises(TrainingError, match="out.b"):
        sgd_step({"out.b": np.zeros(1)}, {"out.b": np.array([np.inf])}, 0.1)


def test_sgd_step():
    p = {"w": np.array([1.0, 2.0])}
    sgd_step(p, {"w": np.array([10.0, -10.0])}, 0.1)
    np.testing.assert_allclose(p["w"], [0.0, 3.0])


# -- gradient checking ------------------------------------------------------------

def _quadratic(params):
    loss = 0.5 * sum(float(np.sum(v * v)) for v in params.values())
    return loss, {k: v.copy() for k, v in params.items()}


def test_grad_check_quadratic(rng):
    # central differences are exact on a quadratic; keep the loss O(1) so
    # cancellation in (up - down) stays far below the tolerance
    params = {"a": rng.uniform(0.5, 2.0, (4, 3)), "b": rng.uniform(-2.0, -0.5, 5)}
    before = {k: v.copy() for k, v in params.items()}
    assert grad_check(_quadratic, params) <= 1e-8
    for k in params:
        np.testing.assert_array_equal(params[k], before[k])


def test_grad_check_detects_corruption(rng):
    params = {"w": rng.uniform(0.5, 1.5, 50)}

    def corrupted(p):
        loss, g = _quadratic(p)
        g["w"][7] *= 1.1
        return loss, g

    assert grad_check(corrupted, params, max_coords=200) >= 0.05


# -- checkpoints ----------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, rng):
    blocks = {"w": rng.standard_normal((3, 4)), "b": rng.standard_normal(4)}
    save_checkpoint(tmp_path / "c.ckpt", {"architecture": "x", "seed": 5}, blocks)
    env, back = load_checkpoint(tmp_path / "c.ckpt")
    assert env["seed"] == 5 and env["format_version"] == 1
    assert back["b"].shape == (4,)
    for k in blocks:
        np.testing.assert_array_equal(back[k], blocks[k].astype(np.float32).astype(np.float64))


def test_checkpoint_truncated(tmp_path):
    save_checkpoint(tmp_path / "c.ckpt", {}, {"w": np.ones((2, 2))})
    raw = (tmp_path / "c.ckpt").read_bytes()
    (tmp_path / "c.ckpt").write_bytes(raw[:-3])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "c.ckpt")
