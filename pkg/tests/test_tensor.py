import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqpar import tensor as T
from seqpar.tensor import BackwardError, ShapeError, Tensor, backward, numerical_grad


def fd_check(fn, shapes, seed=0, tol=1e-6, h=1e-5):
    """Analytic vs central-difference gradient of sum(fn(*xs) * cot)."""
    rng = np.random.default_rng(seed)
    xs = [rng.uniform(-2, 2, size=s) for s in shapes]
    out0 = fn(*[Tensor(x) for x in xs])
    cot = rng.normal(size=out0.shape)
    ts = [Tensor(x.copy(), requires_grad=True) for x in xs]
    backward((fn(*ts) * Tensor(cot)).sum())
    for t, x in zip(ts, xs):
        def f():
            return float(np.sum(fn(*[Tensor(a) for a in xs]).data * cot))
        num = numerical_grad(f, x, h)
        for i, n in num.items():
            a = t.grad.reshape(-1)[i]
            assert abs(a - n) <= tol * max(1.0, abs(a), abs(n)), (i, a, n)


OPS = {
    "add": (lambda a, b: a + b, [(3, 4), (4,)]),
    "sub": (lambda a, b: a - b, [(3, 4), (3, 1)]),
    "mul": (lambda a, b: a * b, [(2, 3), (2, 3)]),
    "div": (lambda a, b: a / (b * b + 1.0), [(2, 3), (2, 3)]),
    "exp": (lambda a: T.exp(a), [(5,)]),
    "log": (lambda a: T.log(a * a + 0.5), [(5,)]),
    "sigmoid": (lambda a: T.sigmoid(a), [(6,)]),
    "softplus": (lambda a: T.softplus(a), [(6,)]),
    "silu": (lambda a: T.silu(a), [(6,)]),
    "power": (lambda a: T.power(a * a + 1.0, -0.5), [(4,)]),
    "matmul": (lambda a, b: a @ b, [(2, 3, 4), (4, 5)]),
    "reshape_transpose": (lambda a: a.reshape(3, 4).transpose(1, 0), [(2, 6)]),
    "getitem": (lambda a: a[1:, ::2], [(3, 4)]),
    "take": (lambda a: T.take(a, np.array([0, 2, 2]), axis=1), [(2, 3)]),
    "concat": (lambda a, b: T.concat([a, b], axis=0), [(2, 3), (1, 3)]),
    "pad_axis": (lambda a: T.pad_axis(a, 1, 2), [(2, 3)]),
    "mean": (lambda a: a.mean(axis=0), [(3, 4)]),
    "softmax": (lambda a: T.softmax(a), [(3, 5)]),
    "log_softmax": (lambda a: T.log_softmax_lastdim(a), [(3, 5)]),
    "rope": (lambda a: T.rope_apply(a, np.array([0, 3, 7])), [(1, 3, 2, 4)]),
    "rms_norm": (lambda a, w: T.rms_norm(a, w, 1e-6), [(3, 4), (4,)]),
    "exact_sum": (lambda a: T.exact_sum(a), [(7,)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradient_matches_finite_differences(name):
    fn, shapes = OPS[name]
    fd_check(fn, shapes)


def test_matmul_examples():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal((a @ Tensor(np.eye(2))).data, a.data)
    assert np.array_equal((a @ Tensor([[5.0], [6.0]])).data, [[17.0], [39.0]])
    z = T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.random.default_rng(0).normal(size=(3, 4))))
    assert np.array_equal(z.data, np.zeros((2, 4)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_softmax_examples():
    assert np.allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5], atol=0)
    out = T.softmax(Tensor([1000.0, 1000.0 + math.log(2)])).data
    assert np.max(np.abs(out - [1 / 3, 2 / 3])) < 1e-12
    out = T.softmax(Tensor([5.0, 0.0]), mask=np.array([0.0, -np.inf])).data
    assert np.array_equal(out, [1.0, 0.0])


def test_fully_masked_row_is_zero_and_flagged():
    x = Tensor(np.ones((2, 3)))
    mask = np.array([[0.0, -np.inf, 0.0], [-np.inf, -np.inf, -np.inf]])
    out, dead = T.stable_softmax_lastdim(x, mask, return_masked_rows=True)
    assert np.array_equal(out.data[1], np.zeros(3))
    assert not np.any(np.isnan(out.data))
    assert dead.tolist() == [False, True]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(-50, 50))
def test_softmax_shift_invariance(seed, c):
    x = np.random.default_rng(seed).normal(size=(3, 6))
    a = T.softmax(Tensor(x)).data
    b = T.softmax(Tensor(x + c)).data
    assert np.max(np.abs(a - b)) < 1e-12


def test_rope_examples():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 8))
    assert np.array_equal(T.rope_apply(Tensor(x[:1]), [0]).data, x[:1])
    pos = np.arange(5) * 7
    y = T.rope_apply(Tensor(x), pos).data
    assert np.max(np.abs(np.linalg.norm(y, axis=-1) - np.linalg.norm(x, axis=-1))) < 1e-12
    back = T.rope_apply(Tensor(y), -pos).data
    assert np.max(np.abs(back - x)) < 1e-12


@pytest.mark.parametrize("c", [1, 5])
def test_rope_relative_position(c):
    rng = np.random.default_rng(c)
    q, k = rng.normal(size=(1, 8)), rng.normal(size=(1, 8))
    for m, n in [(0, 3), (4, 1), (10, 10)]:
        a = T.rope_apply(Tensor(q), [m]).data @ T.rope_apply(Tensor(k), [n]).data.T
        b = T.rope_apply(Tensor(q), [m + c]).data @ T.rope_apply(Tensor(k), [n + c]).data.T
        assert abs(a - b).max() < 1e-10


def test_rope_odd_dim_rejected():
    with pytest.raises(ShapeError):
        T.rope_apply(Tensor(np.zeros((2, 3))), [0, 1])


def test_backward_examples():
    w = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    x = np.array([4.0, -1.0, 0.5])
    backward((w * Tensor(x)).sum())
    assert np.array_equal(w.grad, x)

    w0 = Tensor([1.0], requires_grad=True)
    backward((w0 * 5.0 * 2.0 - 1.0).sum())
    assert w0.grad[0] == 10.0


def test_tiny_mlp_against_finite_differences():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 2))
    w1, w2 = rng.normal(size=(2, 2)), rng.normal(size=(2, 1))

    def loss(a, b):
        return (T.silu(Tensor(x) @ a) @ b).sum()

    ta, tb = Tensor(w1.copy(), requires_grad=True), Tensor(w2.copy(), requires_grad=True)
    backward(loss(ta, tb))
    for t, arr in ((ta, w1), (tb, w2)):
        num = numerical_grad(lambda: loss(Tensor(w1), Tensor(w2)).item(), arr)
        for i, n in num.items():
            a = t.grad.reshape(-1)[i]
            assert abs(a - n) / max(abs(a), abs(n), 1e-12) < 1e-6


def test_second_backward_is_an_error():
    w = Tensor([1.0, 2.0], requires_grad=True)
    loss = (w * w).sum()
    backward(loss)
    with pytest.raises(BackwardError):
        backward(loss)


def test_non_scalar_loss_rejected():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(BackwardError):
        backward(w * 2.0)


def test_gradients_reach_every_leaf_and_accumulate():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([3.0, 4.0], requires_grad=True)
    c = a * b
    backward((c + a).sum())
    assert np.array_equal(a.grad, [4.0, 5.0])
    assert np.array_equal(b.grad, [1.0, 2.0])
    assert c.grad.shape == c.shape
    backward((a * 2.0).sum())
    assert np.array_equal(a.grad, [6.0, 7.0])


def test_tape_replays_each_op_once_in_reverse_order():
    a = Tensor([1.0], requires_grad=True)
    b = T.exp(a)
    c = b * 3.0
    d = c.sum()
    visited = T.GradTape(d).replay(np.ones(()))
    assert visited == ["sum", "mul", "exp"]


def test_exact_sum_is_partition_invariant():
    rng = np.random.default_rng(0)
    x = rng.normal(size=101) * 10.0 ** rng.integers(-8, 8, size=101)
    whole = T.exact_sum(Tensor(x))
    parts = [T.exact_sum(Tensor(x[:37])), T.exact_sum(Tensor(x[37:]))]
    assert whole.exact == parts[0].exact + parts[1].exact
    assert whole.item() == float(parts[0].exact + parts[1].exact)


def test_float32_mode_round_trip():
    T.set_default_dtype(np.float32)
    try:
        assert Tensor([1.0]).data.dtype == np.float32
    finally:
        T.set_default_dtype(np.float64)
    assert Tensor([1.0]).data.dtype == np.float64


def test_exact_sum_non_finite_has_no_exact_value():
    out = T.exact_sum(np.array([1.0, np.inf]))
    assert out.item() == np.inf and out.exact is None
