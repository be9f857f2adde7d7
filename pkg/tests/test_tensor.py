"""Tensor kernel: shapes, gradients vs finite differences, Adam, determinism."""

import numpy as np
import pytest

from hybridforge import tensor as T
from hybridforge.errors import ShapeError, TrainingError
from hybridforge.optim import Adam, AdamState, adam_update
from hybridforge.rng import SeededRng
from hybridforge.tensor import Parameter, Tensor, backward

from oracles import check_grads, matmul_triple_loop, max_rel_err


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def test_matmul_identity():
    rng = SeededRng(0)
    b = Tensor(rng.normal((3, 3), dtype=np.float64))
    eye = Tensor(np.eye(3))
    out = T.matmul(eye, b)
    np.testing.assert_array_equal(out.data, b.data)


def test_matmul_zeros():
    rng = SeededRng(1)
    a = Tensor(np.zeros((2, 4)))
    b = Tensor(rng.normal((4, 2), dtype=np.float64))
    assert np.all(T.matmul(a, b).data == 0.0)
    assert T.matmul(a, b).shape == (2, 2)


def test_matmul_vs_triple_loop():
    rng = SeededRng(2)
    a = rng.normal((5, 7), dtype=np.float64)
    b = rng.normal((7, 3), dtype=np.float64)
    got = T.matmul(Tensor(a), Tensor(b)).data
    want = matmul_triple_loop(a, b)
    assert max_rel_err(got, want) <= 1e-12


def test_matmul_shape_mismatch():
    a = Tensor(np.zeros((2, 3)))
    b = Tensor(np.zeros((4, 2)))
    with pytest.raises(ShapeError, match=r"2, 3.*4, 2"):
        T.matmul(a, b)


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------

def test_softmax_uniform_row():
    out = T.softmax_rows(Tensor(np.zeros((1, 3), dtype=np.float64)))
    np.testing.assert_allclose(out.data, np.full((1, 3), 1.0 / 3.0), atol=1e-15)


def test_softmax_large_values_stable():
    out = T.softmax_rows(Tensor(np.array([[1000.0, 0.0]], dtype=np.float64)))
    assert np.all(np.isfinite(out.data))
    np.testing.assert_allclose(out.data[0, 0], 1.0, atol=1e-12)
    assert out.data[0, 1] == 0.0  # underflows cleanly


def test_softmax_causal_mask():
    rng = SeededRng(3)
    x = Tensor(rng.normal((4, 4), dtype=np.float64))
    y = T.softmax_rows(x, causal=True).data
    for i in range(4):
        assert np.count_nonzero(y[i]) == i + 1
        assert abs(y[i].sum() - 1.0) < 1e-6
        assert np.all(y[i, i + 1:] == 0.0)


def test_softmax_rows_sum_batched():
    rng = SeededRng(4)
    x = Tensor(rng.normal((2, 3, 5, 5), dtype=np.float64))
    y = T.softmax_rows(x, causal=True).data
    sums = y.sum(axis=-1)
    np.testing.assert_allclose(sums, np.ones_like(sums), atol=1e-6)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def test_backward_linear_case():
    # loss = sum(W @ x) => dW = broadcast of x along rows
    rng = SeededRng(5)
    w = Parameter(rng.normal((3, 4), dtype=np.float64), "w")
    x = Tensor(rng.normal((4, 1), dtype=np.float64))
    loss = T.matmul(w, x).sum()
    backward(loss)
    np.testing.assert_allclose(w.grad, np.tile(x.data.T, (3, 1)), atol=1e-12)


def test_backward_requires_scalar():
    w = Parameter(np.ones((2, 2)), "w")
    with pytest.raises(ShapeError, match="scalar"):
        backward(T.mul(w, 2.0))


def test_backward_unused_param_grad_zero():
    w = Parameter(np.ones((2, 2), dtype=np.float64), "w")
    u = Parameter(np.ones((2, 2), dtype=np.float64), "unused")
    loss = T.mul(w, 3.0).sum()
    backward(loss)
    assert np.all(u.grad == 0.0)


def test_backward_param_reuse_accumulates():
    w = Parameter(np.full((2,), 2.0, dtype=np.float64).reshape(1, 2), "w")
    y = T.add(T.mul(w, 3.0), T.mul(w, 5.0))
    backward(y.sum())
    np.testing.assert_allclose(w.grad, np.full((1, 2), 8.0))


def test_shared_grad_no_aliasing():
    # a + b hands the same upstream grad to both parents; later accumulation
    # into one must not corrupt the other.
    a = Parameter(np.ones(3, dtype=np.float64), "a")
    b = Parameter(np.ones(3, dtype=np.float64), "b")
    y = T.add(a, b)
    z = T.add(y, T.mul(a, 1.0))  # second use of a
    backward(z.sum())
    np.testing.assert_allclose(a.grad, np.full(3, 2.0))
    np.testing.assert_allclose(b.grad, np.full(3, 1.0))


OPS = {
    "add": lambda a, b: T.add(a, b),
    "sub": lambda a, b: T.sub(a, b),
    "mul": lambda a, b: T.mul(a, b),
    "div": lambda a, b: T.div(a, T.add(T.mul(b, b), 0.5)),
    "matmul": lambda a, b: T.matmul(a, T.transpose(b)),
    "exp": lambda a, b: T.exp(a),
    "log": lambda a, b: T.log(T.add(T.mul(a, a), 0.5)),
    "sqrt": lambda a, b: T.sqrt(T.add(T.mul(a, a), 0.5)),
    "power": lambda a, b: T.power(T.add(T.mul(a, a), 0.5), 1.7),
    "sigmoid": lambda a, b: T.sigmoid(a),
    "silu": lambda a, b: T.silu(a),
    "elu1p": lambda a, b: T.elu1p(a),
    "maximum": lambda a, b: T.maximum(a, 0.1),
    "softmax": lambda a, b: T.softmax_rows(a),
    "softmax_causal": lambda a, b: T.softmax_rows(a[:, :3], causal=True),
    "reshape": lambda a, b: T.reshape(T.mul(a, b), 12),
    "transpose": lambda a, b: T.matmul(T.transpose(a), b),
    "getitem": lambda a, b: T.mul(a[1:, :2], b[:2, 1:3]),
    "concat": lambda a, b: T.concat([a, b], axis=0),
    "sum_axis": lambda a, b: T.tsum(a, axis=0),
    "mean": lambda a, b: T.tmean(a, axis=1),
    "rms_norm": lambda a, b: T.rms_norm(a, T.tsum(b, axis=0)),
}


@pytest.mark.parametrize("name", sorted(OPS))
@pytest.mark.parametrize("seed", range(3))
def test_op_gradients_finite_difference(name, seed):
    rng = SeededRng(100 + seed)
    a = Parameter(rng.normal((3, 4), dtype=np.float64), "a")
    b = Parameter(rng.normal((3, 4), dtype=np.float64), "b")
    w = rng.normal(1, dtype=np.float64)  # random loss direction via fixed weights

    weights = rng.normal((32,), dtype=np.float64)

    def make_loss():
        out = OPS[name](a, b)
        flat = T.reshape(out, out.size)
        return T.mul(flat, Tensor(weights[: out.size] + w)).sum()

    check_grads(make_loss, [a, b], tol=1e-4)


def test_cross_entropy_gradient():
    rng = SeededRng(42)
    logits = Parameter(rng.normal((6, 5), dtype=np.float64), "logits")
    targets = rng.integers(0, 5, size=6)
    weights = np.array([1.0, 0.0, 1.0, 1.0, 0.0, 2.0])

    def make_loss():
        return T.cross_entropy(logits, targets, weights)

    check_grads(make_loss, [logits], tol=1e-4)


def test_cross_entropy_matches_log_softmax():
    rng = SeededRng(43)
    z = rng.normal((4, 7), dtype=np.float64)
    t = rng.integers(0, 7, size=4)
    loss = T.cross_entropy(Tensor(z), t).item()
    p = np.exp(z - z.max(-1, keepdims=True))
    p /= p.sum(-1, keepdims=True)
    want = -np.mean(np.log(p[np.arange(4), t]))
    assert abs(loss - want) < 1e-12


def test_embedding_gradient_scatters():
    table = Parameter(np.arange(12, dtype=np.float64).reshape(4, 3), "emb")
    ids = np.array([[0, 2], [2, 1]])
    out = T.embedding(table, ids)
    assert out.shape == (2, 2, 3)
    backward(out.sum())
    np.testing.assert_allclose(table.grad, np.array([[1.0] * 3, [1.0] * 3, [2.0] * 3, [0.0] * 3]))


def test_mixed_dtype_rejected():
    a = Tensor(np.zeros((2, 2), dtype=np.float32))
    b = Tensor(np.zeros((2, 2), dtype=np.float64))
    with pytest.raises(ShapeError, match="mixed"):
        T.add(a, b)


def test_no_grad_skips_tape():
    w = Parameter(np.ones((2, 2)), "w")
    with T.no_grad():
        y = T.mul(w, 2.0)
    assert y._vjp is None and not y.requires_grad


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def test_adam_zero_grad_no_move():
    p = Parameter(np.full((3,), 1.5, dtype=np.float64), "p")
    st = AdamState(np.zeros(3), np.zeros(3))
    p.zero_grad()
    adam_update(p, st)
    np.testing.assert_array_equal(p.data, np.full((3,), 1.5))


def test_adam_first_step_is_lr_times_sign():
    p = Parameter(np.array([0.0], dtype=np.float64), "p")
    st = AdamState(np.zeros(1), np.zeros(1), hyper=(0.1, 0.9, 0.999, 1e-8))
    p.grad = np.array([1.0])
    adam_update(p, st)
    assert abs(p.data[0] + 0.1) < 1e-6  # decreases by ~lr on step 1


def test_adam_nonfinite_grad_names_param():
    p = Parameter(np.zeros(2), "layers.3.attn.wq")
    p.grad = np.array([np.nan, 0.0], dtype=np.float32)
    st = AdamState(np.zeros(2, np.float32), np.zeros(2, np.float32))
    with pytest.raises(TrainingError, match="layers.3.attn.wq"):
        adam_update(p, st)


def test_adam_deterministic_100_steps():
    def run():
        rng = SeededRng(7)
        p = Parameter(rng.normal((4, 4), dtype=np.float64), "p")
        opt = Adam([p], lr=1e-2)
        x = Tensor(rng.normal((4, 4), dtype=np.float64))
        for _ in range(100):
            opt.zero_grad()
            d = T.sub(p, x)
            backward(T.mul(d, d).sum())
            opt.step()
        return p.data.copy()

    a, b = run(), run()
    np.testing.assert_array_equal(a, b)  # bit-identical


# ---------------------------------------------------------------------------
# rng
# ---------------------------------------------------------------------------

def test_rng_same_seed_same_stream():
    a = SeededRng(123).normal((5, 5))
    b = SeededRng(123).normal((5, 5))
    np.testing.assert_array_equal(a, b)


def test_rng_split_independent_of_order():
    root = SeededRng(9)
    c3 = root.split(3).normal((4,))
    c1 = root.split(1).normal((4,))
    root2 = SeededRng(9)
    c1b = root2.split(1).normal((4,))
    c3b = root2.split(3).normal((4,))
    np.testing.assert_array_equal(c1, c1b)
    np.testing.assert_array_equal(c3, c3b)
    assert not np.array_equal(c1, c3)
