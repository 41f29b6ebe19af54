import numpy as np
import pytest
from helpers import check_op_gradients, max_rel_error

from dtmerge import autodiff as ad
from dtmerge.autodiff import (
    AdamConfig,
    GraphConsumed,
    MissingGradient,
    NonFiniteValue,
    OptimizerState,
    ShapeMismatch,
    Tensor,
    backward,
    optimizer_step,
)

F32 = np.float32


def _w(rng, *shape):
    return rng.normal(0.0, 1.0, size=shape).astype(F32)


def _weighted_sum(out: Tensor, rng) -> Tensor:
    # weights scaled by 1/size keep |loss| ~ 0.3 so float32 quantization of
    # the loss stays far below the h=1e-3 finite-difference quotient
    w = Tensor(_w(rng, *out.shape) / out.size)
    return ad.sum_(ad.mul(out, w))


# one FD case per differentiable op; each returns (input arrays, graph builder)

def case_add(rng):
    a, b = _w(rng, 3, 4), _w(rng, 4)
    return {"a": a, "b": b}, lambda t: _weighted_sum(ad.add(t["a"], t["b"]), np.random.default_rng(0))


def case_sub(rng):
    a, b = _w(rng, 3, 4), _w(rng, 3, 4)
    return {"a": a, "b": b}, lambda t: _weighted_sum(ad.sub(t["a"], t["b"]), np.random.default_rng(1))


def case_mul(rng):
    a, b = _w(rng, 3, 4), _w(rng, 1, 4)
    return {"a": a, "b": b}, lambda t: ad.mean(ad.mul(t["a"], t["b"]))


def case_div(rng):
    a = _w(rng, 3, 4)
    b = (rng.uniform(0.5, 2.0, size=(3, 4)) * np.sign(rng.normal(size=(3, 4)))).astype(F32)
    return {"a": a, "b": b}, lambda t: ad.mean(ad.div(t["a"], t["b"]))


def case_scale(rng):
    a = _w(rng, 4, 4)
    return {"a": a}, lambda t: ad.mean(ad.scale(t["a"], 0.37))


def case_sqrt(rng):
    a = rng.uniform(0.3, 3.0, size=(3, 4)).astype(F32)
    return {"a": a}, lambda t: ad.mean(ad.sqrt(t["a"]))


def case_matmul(rng):
    a, b = _w(rng, 4, 3), _w(rng, 3, 5)
    return {"a": a, "b": b}, lambda t: _weighted_sum(ad.matmul(t["a"], t["b"]), np.random.default_rng(2))


def case_matmul_batched(rng):
    a, b = _w(rng, 2, 4, 3), _w(rng, 2, 3, 4)
    return {"a": a, "b": b}, lambda t: _weighted_sum(ad.matmul(t["a"], t["b"]), np.random.default_rng(3))


def case_matmul_broadcast(rng):
    a, b = _w(rng, 2, 4, 3), _w(rng, 3, 5)
    return {"a": a, "b": b}, lambda t: _weighted_sum(ad.matmul(t["a"], t["b"]), np.random.default_rng(4))


def case_relu(rng):
    a = _w(rng, 4, 4)
    a[np.abs(a) < 0.05] += 0.1  # keep away from the kink
    return {"a": a}, lambda t: _weighted_sum(ad.relu(t["a"]), np.random.default_rng(5))


def case_gelu(rng):
    a = _w(rng, 4, 4)
    return {"a": a}, lambda t: _weighted_sum(ad.gelu(t["a"]), np.random.default_rng(6))


def case_tanh(rng):
    a = _w(rng, 4, 4)
    return {"a": a}, lambda t: _weighted_sum(ad.tanh(t["a"]), np.random.default_rng(7))


def case_softmax(rng):
    a = _w(rng, 3, 5)
    return {"a": a}, lambda t: _weighted_sum(ad.softmax(t["a"]), np.random.default_rng(8))


def case_layer_norm(rng):
    x = _w(rng, 3, 6)
    g = rng.uniform(0.5, 1.5, size=6).astype(F32)
    b = _w(rng, 6)
    return {"x": x, "g": g, "b": b}, lambda t: _weighted_sum(
        ad.layer_norm(t["x"], t["g"], t["b"]), np.random.default_rng(9)
    )


def case_dropout(rng):
    a = _w(rng, 4, 4)
    return {"a": a}, lambda t: _weighted_sum(ad.dropout(t["a"], 0.3, 1234), np.random.default_rng(10))


def case_embedding(rng):
    table = _w(rng, 7, 4)
    ids = np.array([[0, 3, 6], [2, 2, 5]])
    return {"table": table}, lambda t: _weighted_sum(
        ad.embedding_lookup(t["table"], ids), np.random.default_rng(11)
    )


def case_mse(rng):
    p, y = _w(rng, 3, 4), _w(rng, 3, 4)
    return {"p": p, "y": y}, lambda t: ad.mse_loss(t["p"], t["y"])


def case_mse_masked(rng):
    p, y = _w(rng, 3, 4), _w(rng, 3, 4)
    mask = np.array([[1.0], [0.0], [1.0]], dtype=F32)
    return {"p": p, "y": y}, lambda t: ad.mse_loss(t["p"], t["y"], mask)


def case_cross_entropy(rng):
    logits = _w(rng, 4, 6)
    targets = rng.integers(0, 6, size=4)
    return {"logits": logits}, lambda t: ad.cross_entropy_loss(t["logits"], targets)


def case_cross_entropy_masked(rng):
    logits = _w(rng, 2, 3, 5)
    targets = rng.integers(0, 5, size=(2, 3))
    mask = np.array([[1, 1, 0], [0, 1, 1]], dtype=F32)
    return {"logits": logits}, lambda t: ad.cross_entropy_loss(t["logits"], targets, mask)


def case_reshape_transpose(rng):
    a = _w(rng, 2, 3, 4)
    return {"a": a}, lambda t: _weighted_sum(
        ad.transpose(ad.reshape(t["a"], (2, 4, 3)), (1, 0, 2)), np.random.default_rng(12)
    )


def case_concat_slice(rng):
    a, b = _w(rng, 2, 3), _w(rng, 2, 4)
    return {"a": a, "b": b}, lambda t: _weighted_sum(
        ad.concat([t["a"], t["b"]], axis=1)[:, 1:6:2], np.random.default_rng(13)
    )


def case_sum_mean_max(rng):
    a = _w(rng, 3, 5)
    # keep a clear winner per row so the FD step cannot flip the argmax
    a[np.arange(3), a.argmax(axis=1)] += 0.1
    return {"a": a}, lambda t: ad.add(
        ad.mean(ad.sum_(t["a"], axis=1)), ad.mean(ad.max_(t["a"], axis=1))
    )


OP_CASES = {
    "add": case_add,
    "sub": case_sub,
    "mul": case_mul,
    "div": case_div,
    "scale": case_scale,
    "sqrt": case_sqrt,
    "matmul": case_matmul,
    "matmul_batched": case_matmul_batched,
    "matmul_broadcast": case_matmul_broadcast,
    "relu": case_relu,
    "gelu": case_gelu,
    "tanh": case_tanh,
    "softmax": case_softmax,
    "layer_norm": case_layer_norm,
    "dropout": case_dropout,
    "embedding_lookup": case_embedding,
    "mse_loss": case_mse,
    "mse_loss_masked": case_mse_masked,
    "cross_entropy_loss": case_cross_entropy,
    "cross_entropy_loss_masked": case_cross_entropy_masked,
    "reshape_transpose": case_reshape_transpose,
    "concat_slice": case_concat_slice,
    "sum_mean_max": case_sum_mean_max,
}


@pytest.mark.parametrize("op", sorted(OP_CASES))
def test_gradients_match_finite_differences(op):
    for seed in range(100):
        check_op_gradients(OP_CASES[op], seed)


def test_softmax_rows_sum_to_one():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        out = ad.softmax(Tensor(rng.normal(0, 5, size=(4, 7)).astype(F32)))
        assert (out.data >= 0).all()
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)


def test_softmax_symmetry():
    out = ad.softmax(Tensor(np.array([0.0, 0.0], dtype=F32)))
    np.testing.assert_array_equal(out.data, np.array([0.5, 0.5], dtype=F32))


def test_layer_norm_constant_input_maps_to_beta():
    x = Tensor(np.full((2, 5), 3.7, dtype=F32))
    g = Tensor(np.ones(5, dtype=F32))
    b = Tensor(np.zeros(5, dtype=F32))
    out = ad.layer_norm(x, g, b)
    np.testing.assert_allclose(out.data, 0.0, atol=1e-6)
    b2 = Tensor(np.arange(5, dtype=F32))
    np.testing.assert_allclose(ad.layer_norm(x, g, b2).data, np.tile(np.arange(5, dtype=F32), (2, 1)), atol=1e-6)


def test_mse_identity_is_zero():
    p = Tensor(np.random.default_rng(0).normal(size=(3, 3)).astype(F32), requires_grad=True)
    loss = ad.mse_loss(p, Tensor(p.data.copy()))
    assert loss.item() == 0.0
    grads = backward(loss, {"p": p})
    np.testing.assert_array_equal(grads["p"], np.zeros((3, 3), dtype=F32))


def test_linear_loss_gradient_outer_product_structure():
    rng = np.random.default_rng(4)
    W = Tensor(_w(rng, 3, 4), requires_grad=True)
    x = Tensor(_w(rng, 4, 1))
    loss = ad.sum_(ad.matmul(W, x))
    grads = backward(loss, {"W": W})
    # d/dW sum(Wx) = ones(3,1) @ x^T: every row equals x
    np.testing.assert_allclose(grads["W"], np.tile(x.data.T, (3, 1)), rtol=1e-6)


def test_backward_zero_for_unreached_params():
    a = Tensor(np.ones((2, 2), dtype=F32), requires_grad=True)
    unused = Tensor(np.ones((3,), dtype=F32), requires_grad=True)
    loss = ad.sum_(a)
    grads = backward(loss, {"a": a, "unused": unused})
    np.testing.assert_array_equal(grads["unused"], np.zeros(3, dtype=F32))
    np.testing.assert_array_equal(grads["a"], np.ones((2, 2), dtype=F32))


def test_backward_twice_raises():
    a = Tensor(np.ones((2,), dtype=F32), requires_grad=True)
    loss = ad.sum_(a)
    backward(loss, {"a": a})
    with pytest.raises(GraphConsumed):
        backward(loss, {"a": a})


def test_backward_requires_scalar():
    a = Tensor(np.ones((2,), dtype=F32), requires_grad=True)
    with pytest.raises(ValueError):
        backward(ad.scale(a, 2.0), {"a": a})


def test_shape_mismatch_reports_both_shapes():
    with pytest.raises(ShapeMismatch) as exc:
        ad.matmul(Tensor(np.ones((2, 3), dtype=F32)), Tensor(np.ones((4, 2), dtype=F32)))
    assert "(2, 3)" in str(exc.value) and "(4, 2)" in str(exc.value)
    assert exc.value.shapes == ((2, 3), (4, 2))


def test_non_finite_rejected():
    with pytest.raises(NonFiniteValue):
        Tensor(np.array([1.0, np.nan], dtype=F32))
    with pytest.raises(NonFiniteValue):
        ad.sqrt(Tensor(np.array([-1.0], dtype=F32)))


def test_finite_checks_toggle():
    with ad.finite_checks(False):
        t = Tensor(np.array([np.inf], dtype=F32))
        assert np.isinf(t.data).any()
    assert ad.finite_checks_enabled()


def test_dropout_deterministic_and_scaled():
    x = Tensor(np.ones((8, 8), dtype=F32))
    a = ad.dropout(x, 0.4, (7, 1, 2))
    b = ad.dropout(x, 0.4, (7, 1, 2))
    np.testing.assert_array_equal(a.data, b.data)
    c = ad.dropout(x, 0.4, (7, 1, 3))
    assert not np.array_equal(a.data, c.data)
    kept = a.data[a.data != 0]
    np.testing.assert_allclose(kept, 1.0 / 0.6, rtol=1e-6)


def test_dropout_rate_validation():
    x = Tensor(np.ones((2, 2), dtype=F32))
    with pytest.raises(ValueError):
        ad.dropout(x, 1.0, 0)
    assert ad.dropout(x, 0.0, 0) is x


def test_determinism_bitwise():
    def run():
        rng = np.random.default_rng(99)
        x = Tensor(rng.normal(size=(4, 6)).astype(F32), requires_grad=True)
        y = ad.softmax(ad.gelu(ad.matmul(x, Tensor(rng.normal(size=(6, 6)).astype(F32)))))
        y = ad.dropout(y, 0.2, (123, 0, 0))
        loss = ad.mse_loss(y, Tensor(np.zeros((4, 6), dtype=F32)))
        g = backward(loss, {"x": x})
        return loss.data.tobytes(), g["x"].tobytes()

    assert run() == run()


# --- optimizer -------------------------------------------------------------

def _params(rng, names_shapes):
    return {n: Tensor(_w(rng, *s), requires_grad=True, name=n) for n, s in names_shapes}


def test_optimizer_zero_grad_zero_decay_is_identity():
    rng = np.random.default_rng(0)
    params = _params(rng, [("w", (3, 3)), ("b", (3,))])
    state = OptimizerState(AdamConfig(weight_decay=0.0))
    grads = {n: np.zeros(p.shape, dtype=F32) for n, p in params.items()}
    out = optimizer_step(params, grads, state)
    for n in params:
        np.testing.assert_array_equal(out[n].data, params[n].data)


def test_optimizer_all_frozen_is_identity():
    rng = np.random.default_rng(1)
    params = _params(rng, [("w", (2, 2)), ("b", (2,))])
    state = OptimizerState(AdamConfig())
    grads = {n: _w(rng, *p.shape) for n, p in params.items()}
    out = optimizer_step(params, grads, state, frozen=frozenset(params))
    for n in params:
        assert out[n] is params[n]
        assert out[n].data.tobytes() == params[n].data.tobytes()


def test_optimizer_missing_gradient_raises():
    rng = np.random.default_rng(2)
    params = _params(rng, [("w", (2, 2))])
    state = OptimizerState(AdamConfig())
    with pytest.raises(MissingGradient):
        optimizer_step(params, {}, state)


def test_optimizer_matches_hand_rolled_two_step_adam():
    # scalar parameter, constant gradient 1.0, no warmup to keep arithmetic plain
    cfg = AdamConfig(lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0, warmup_steps=0)
    p0 = 0.5
    params = {"w": Tensor(np.array(p0, dtype=F32), requires_grad=True)}
    state = OptimizerState(cfg)
    g = {"w": np.array(1.0, dtype=F32)}

    # hand arithmetic, step 1
    m1 = 0.1 * 1.0
    v1 = 0.001 * 1.0
    mhat1 = m1 / (1 - 0.9)
    vhat1 = v1 / (1 - 0.999)
    p1 = p0 - 0.1 * mhat1 / (np.sqrt(vhat1) + 1e-8)
    params = optimizer_step(params, g, state)
    np.testing.assert_allclose(params["w"].data, p1, rtol=1e-6)

    # step 2
    m2 = 0.9 * m1 + 0.1 * 1.0
    v2 = 0.999 * v1 + 0.001 * 1.0
    mhat2 = m2 / (1 - 0.9**2)
    vhat2 = v2 / (1 - 0.999**2)
    p2 = p1 - 0.1 * mhat2 / (np.sqrt(vhat2) + 1e-8)
    params = optimizer_step(params, g, state)
    np.testing.assert_allclose(params["w"].data, p2, rtol=1e-6)


def test_optimizer_warmup_scales_first_steps():
    cfg = AdamConfig(lr=0.1, weight_decay=0.0, warmup_steps=10)
    params = {"w": Tensor(np.array(1.0, dtype=F32), requires_grad=True)}
    state = OptimizerState(cfg)
    out = optimizer_step(params, {"w": np.array(1.0, dtype=F32)}, state)
    # step 1 of 10: effective lr = 0.01; Adam update of a fresh moment = ~1
    np.testing.assert_allclose(out["w"].data, 1.0 - 0.01 * 1.0, rtol=1e-4)


def test_frozen_bytes_invariant_over_many_steps():
    rng = np.random.default_rng(3)
    params = _params(rng, [("frozen.w", (4, 4)), ("live.w", (4, 4))])
    before = params["frozen.w"].data.tobytes()
    state = OptimizerState(AdamConfig(lr=1e-2))
    for _ in range(50):
        grads = {"live.w": _w(rng, 4, 4)}
        params = optimizer_step(params, grads, state, frozen=frozenset({"frozen.w"}))
    assert params["frozen.w"].data.tobytes() == before
    assert not np.array_equal(params["live.w"].data, _params(np.random.default_rng(3), [("live.w", (4, 4))])["live.w"].data)
