import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plora import core
from plora.core import (GradTape, NonFiniteError, OracleError, ShapeError, Tensor,
                        finite_diff_grad, max_rel_error)


def T(x, grad=False):
    return Tensor(np.array(x, dtype=float), requires_grad=grad)


# ---------------------------------------------------------------- matmul

def test_matmul_identity():
    out = core.matmul(T(np.eye(2)), T([[1, 2], [3, 4]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_dot_product():
    assert core.matmul(T([[1, 1]]), T([[2], [3]])).data.tolist() == [[5.0]]


def test_matmul_backward_matches_finite_difference():
    A, B = T(np.eye(2), True), T([[2, 3], [4, 5]], True)
    with GradTape() as tape:
        C = core.matmul(A, B)
        out = core.total(C)  # dC = ones
    tape.backward(out, [A, B])
    np.testing.assert_array_equal(A.grad, [[5, 9], [5, 9]])

    def f(a):
        return (a.reshape(2, 2) @ B.data).sum()

    fd = finite_diff_grad(f, np.eye(2).reshape(-1)).reshape(2, 2)
    np.testing.assert_allclose(fd, [[5, 9], [5, 9]], atol=1e-8)
    np.testing.assert_allclose(B.grad, A.data.T @ np.ones((2, 2)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\[2, 3\].*\[2, 2\]"):
        core.matmul(T(np.ones((2, 3))), T(np.ones((2, 2))))


def test_matmul_associativity():
    rng = np.random.default_rng(0)
    for _ in range(50):
        A, B, C = (T(rng.uniform(-1, 1, (4, 4))) for _ in range(3))
        left = core.matmul(core.matmul(A, B), C).data
        right = core.matmul(A, core.matmul(B, C)).data
        assert np.max(np.abs(left - right)) < 1e-10


# ---------------------------------------------------------------- softmax

@pytest.mark.parametrize("row, expected", [
    ([0.0, 0.0], [0.5, 0.5]),
    ([1000.0, 1000.0], [0.5, 0.5]),
    ([0.0, math.log(3)], [0.25, 0.75]),
])
def test_softmax_examples(row, expected):
    np.testing.assert_allclose(core.softmax_rows(T([row])).data[0], expected, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_softmax_rows_sum_to_one(m, n, seed):
    x = np.random.default_rng(seed).uniform(-1e4, 1e4, (m, n))
    p = core.softmax_rows(T(x)).data
    assert np.all(np.abs(p.sum(axis=1) - 1.0) <= 1e-12)


def test_causal_softmax_zeroes_future():
    p = core.softmax_rows(T(np.zeros((3, 3))), causal=True).data
    np.testing.assert_allclose(p, [[1, 0, 0], [0.5, 0.5, 0], [1 / 3, 1 / 3, 1 / 3]])


# ---------------------------------------------------------------- rms_norm

def test_rms_norm_unit():
    out = core.rms_norm(T([1, 1, 1, 1]), T(np.ones(4)), eps=1e-300).data
    np.testing.assert_allclose(out, [1, 1, 1, 1], rtol=1e-15)


def test_rms_norm_closed_form():
    out = core.rms_norm(T([3, 4]), T(np.ones(2)), eps=1e-300).data
    np.testing.assert_allclose(out, [3 / math.sqrt(12.5), 4 / math.sqrt(12.5)], rtol=1e-14)
    np.testing.assert_allclose(out, [0.8485, 1.1314], atol=1e-4)


def test_rms_norm_zero_input():
    assert np.all(core.rms_norm(T(np.zeros(5)), T(np.ones(5)), eps=1e-6).data == 0.0)


# ---------------------------------------------------------------- cross entropy

def test_cross_entropy_uniform():
    value, empty = core.cross_entropy(T(np.zeros((1, 4))), [2])
    assert not empty
    assert value.item() == pytest.approx(math.log(4), abs=1e-15)


def test_cross_entropy_confident():
    value, _ = core.cross_entropy(T([[10.0, -10.0]]), [0])
    assert value.item() == pytest.approx(math.log1p(math.exp(-20)), rel=1e-9)
    assert value.item() == pytest.approx(2.06e-9, rel=1e-2)


def test_cross_entropy_empty_mask():
    value, empty = core.cross_entropy(T(np.ones((3, 4))), [0, 1, 2], [False] * 3)
    assert empty and value.item() == 0.0


def test_cross_entropy_out_of_range_target():
    with pytest.raises(IndexError):
        core.cross_entropy(T(np.zeros((2, 4))), [0, 4])


def test_cross_entropy_ignores_unscored_bad_target():
    value, _ = core.cross_entropy(T(np.zeros((2, 4))), [0, 99], [True, False])
    assert value.item() == pytest.approx(math.log(4))


# ---------------------------------------------------------------- finite differences

def test_finite_diff_quadratic():
    g = finite_diff_grad(lambda th: th[0] ** 2, [3.0], 1e-5)
    assert abs(g[0] - 6.0) < 1e-8


def test_finite_diff_constant():
    assert np.all(finite_diff_grad(lambda th: 4.2, np.ones(5)) == 0.0)


def test_finite_diff_reports_nonfinite():
    with pytest.raises(OracleError):
        finite_diff_grad(lambda th: math.inf, [1.0])


def test_finite_diff_one_layer_model_cross_entropy():
    rng = np.random.default_rng(3)
    x = rng.uniform(-1, 1, (5, 3))
    W = T(rng.uniform(-1, 1, (4, 3)), True)
    b = T(rng.uniform(-1, 1, 4), True)
    tgt = rng.integers(0, 4, 5)
    with GradTape() as tape:
        value, _ = core.cross_entropy(core.linear(T(x), W, b), tgt)
    tape.backward(value, [W, b])

    def f(theta):
        logits = x @ theta[:12].reshape(4, 3).T + theta[12:]
        return core.cross_entropy(T(logits), tgt)[0].item()

    fd = finite_diff_grad(f, np.concatenate([W.data.ravel(), b.data]))
    assert max_rel_error(np.concatenate([W.grad.ravel(), b.grad]), fd) < 1e-5


# ---------------------------------------------------------------- primitive gradient checks

def _check(build, shapes, seed=0, tol=1e-5):
    """Tape gradient vs central differences for a scalar function of tensors in [-1, 1]."""
    rng = np.random.default_rng(seed)
    arrays = [rng.uniform(-1, 1, s) for s in shapes]
    ts = [T(a, True) for a in arrays]
    probe = rng.uniform(-1, 1, np.shape(build(*[T(a) for a in arrays]).data))
    with GradTape() as tape:
        out = core.total(core.mul(build(*ts), T(probe)))
    tape.backward(out, ts)
    for i, a in enumerate(arrays):
        def f(flat, i=i):
            args = [T(x) for x in arrays]
            args[i] = T(flat.reshape(a.shape))
            return float((build(*args).data * probe).sum())

        fd = finite_diff_grad(f, a.reshape(-1), 1e-5)
        err = max_rel_error(ts[i].grad.reshape(-1), fd)
        assert err < tol, (i, err)


PRIMITIVES = {
    "add": (lambda a, b: core.add(a, b), [(3, 4), (4,)]),
    "sub": (lambda a, b: core.sub(a, b), [(3, 4), (3, 4)]),
    "mul": (lambda a, b: core.mul(a, b), [(2, 3, 4), (1, 4)]),
    "scale": (lambda a: core.scale(a, -2.5), [(3, 3)]),
    "gelu": (lambda a: core.gelu(a), [(4, 5)]),
    "matmul": (lambda a, b: core.matmul(a, b), [(3, 4), (4, 2)]),
    "matmul_batched": (lambda a, b: core.matmul(a, b), [(2, 3, 4), (2, 4, 5)]),
    "linear": (lambda x, w, b: core.linear(x, w, b), [(2, 3, 4), (5, 4), (5,)]),
    "transpose": (lambda a: core.transpose(a), [(2, 3, 4)]),
    "permute": (lambda a: core.permute(a, (2, 0, 1)), [(2, 3, 4)]),
    "reshape": (lambda a: core.reshape(a, (4, 6)), [(2, 3, 4)]),
    "rms_norm": (lambda x, g: core.rms_norm(x, g, 1e-6), [(3, 5), (5,)]),
    "softmax": (lambda a: core.softmax_rows(a), [(3, 4)]),
    "softmax_causal": (lambda a: core.softmax_rows(a, causal=True), [(2, 4, 4)]),
    "log_softmax": (lambda a: core.log_softmax_rows(a), [(3, 4)]),
    "embedding": (lambda t: core.embedding(t, [[0, 2, 2], [1, 0, 3]]), [(4, 3)]),
    "gather_rows": (lambda x: core.gather_rows(x, np.array([[True, False, True]])), [(1, 3, 4)]),
    "add_rows": (lambda x, d: core.add_rows(x, np.array([False, True, True]), d), [(3, 4), (2, 4)]),
    "place_rows": (lambda x, r: core.place_rows(x, np.array([True, False, True]), r), [(3, 4), (2, 4)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_primitive_gradients(name, seed):
    build, shapes = PRIMITIVES[name]
    _check(build, shapes, seed)


def test_cross_entropy_gradient():
    rng = np.random.default_rng(9)
    logits = rng.uniform(-1, 1, (2, 3, 5))
    tgt = rng.integers(0, 5, (2, 3))
    mask = np.array([[True, False, True], [True, True, False]])
    t = T(logits, True)
    with GradTape() as tape:
        value, _ = core.cross_entropy(t, tgt, mask)
    tape.backward(value, [t])
    fd = finite_diff_grad(lambda th: core.cross_entropy(T(th.reshape(logits.shape)), tgt, mask)[0].item(),
                          logits.reshape(-1))
    assert max_rel_error(t.grad.reshape(-1), fd) < 1e-5


# ---------------------------------------------------------------- tape semantics

def test_tape_replays_in_reverse_order():
    a = T([1.0, 2.0], True)
    tape = GradTape(visit_log=[])
    with tape:
        b = core.scale(a, 2.0)
        c = core.mul(b, b)
        d = core.total(c)
    tape.backward(d, [a])
    assert tape.visit_log == [2, 1, 0]
    assert [r.op for r in tape.records] == ["scale", "mul", "sum"]
    np.testing.assert_allclose(a.grad, 8 * a.data)


def test_unused_parameter_gets_exact_zero():
    a, unused = T([1.0, 2.0], True), T([[3.0]], True)
    with GradTape() as tape:
        out = core.total(core.mul(a, a))
    tape.backward(out, [a, unused])
    assert unused.grad.shape == (1, 1) and np.all(unused.grad == 0.0)


def test_no_recording_without_tape_or_grad():
    a = T([1.0])
    with GradTape() as tape:
        core.scale(a, 2.0)
    assert tape.records == []


def test_nonfinite_is_hard_error():
    with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
        core.scale(T([1e308]), 10.0)
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])


def test_shape_invariant():
    t = Tensor(np.zeros((2, 3)))
    assert int(np.prod(t.shape)) == t.data.size


def test_seeded_replay_is_bit_identical():
    def run():
        rng = np.random.default_rng(42)
        x = T(rng.uniform(-1, 1, (4, 6)), True)
        w = T(rng.uniform(-1, 1, (3, 6)), True)
        with GradTape() as tape:
            y = core.softmax_rows(core.gelu(core.linear(x, w)))
            out = core.total(core.mul(y, y))
        tape.backward(out, [x, w])
        return y.data.tobytes() + x.grad.tobytes() + w.grad.tobytes()

    assert run() == run()
