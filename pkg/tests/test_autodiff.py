import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nodeonet.autodiff import PRIMITIVES, Eager, Tape, backward, record_op, relu_subgradient_convention
from nodeonet.errors import NonFiniteError, NonScalarLossError, ShapeError


def central_difference(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Oracle: independent of the tape, evaluates ``fn`` on perturbed copies."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[i] += h
        down[i] -= h
        g[i] = (fn(up) - fn(down)) / (2 * h)
    return g


def test_primitive_vocabulary():
    assert set(PRIMITIVES) >= {
        "add", "sub", "hadamard", "matvec", "scale", "relu", "tanh",
        "sum", "mean", "square", "abs", "concat", "slice", "axpy",
    }


def test_forward_examples():
    ops = Eager()
    assert np.array_equal(ops.hadamard(np.array([1.0, 2, 3]), np.array([4.0, 5, 6])), [4, 10, 18])
    assert np.array_equal(ops.relu(np.array([-1.0, 0, 2])), [0, 0, 2])
    assert np.array_equal(ops.matvec(np.eye(2), np.array([3.0, 7])), [3, 7])


def test_tape_forward_matches_eager():
    tape = Tape()
    out = tape.hadamard(tape.constant([1.0, 2, 3]), tape.constant([4.0, 5, 6]))
    assert np.array_equal(out.value, [4, 10, 18])


def test_shape_mismatch():
    tape = Tape()
    with pytest.raises(ShapeError):
        tape.add(tape.constant([1.0, 2]), tape.constant([1.0, 2, 3]))
    with pytest.raises(ShapeError):
        tape.matvec(tape.constant(np.eye(3)), tape.constant([1.0, 2]))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_rejected():
    tape = Tape()
    with pytest.raises(NonFiniteError):
        tape.scale(tape.constant([1e308]), 1e10)


def test_backward_linear_form():
    tape = Tape()
    w = tape.param("w", [1.0, 2.0])
    loss = tape.sum(tape.hadamard(w, tape.constant([3.0, 4.0])))
    assert np.array_equal(tape.backward(loss)["w"], [3, 4])


def test_backward_quadratic():
    tape = Tape()
    w = tape.param("w", [2.0, -2.0])
    loss = tape.mean(tape.square(w))
    assert np.array_equal(backward(tape, loss)["w"], [2, -2])


def test_non_scalar_loss():
    tape = Tape()
    w = tape.param("w", [1.0, 2.0])
    with pytest.raises(NonScalarLossError):
        tape.backward(tape.square(w))


def test_relu_convention():
    assert relu_subgradient_convention() == 0.0
    for x0, expected in ((0.0, 0.0), (1e-12, 1.0), (-1e-12, 0.0)):
        tape = Tape()
        x = tape.param("x", [x0])
        assert tape.backward(tape.sum(tape.relu(x)))["x"][0] == expected


def test_abs_gradient_at_zero_is_zero():
    tape = Tape()
    x = tape.param("x", [0.0, -2.0, 3.0])
    assert np.array_equal(tape.backward(tape.sum(tape.abs(x)))["x"], [0, -1, 1])


def test_record_op_alias():
    tape = Tape()
    a = tape.param("a", [1.0, -1.0])
    out = record_op(tape, "relu", [a])
    assert np.array_equal(out.value, [1, 0])


# -- random composite graphs vs the finite-difference oracle ------------------


def _composite(ops, w, m, x):
    """Depth-6 chain mixing every primitive; the same code runs eagerly and on a tape."""
    h = ops.tanh(ops.matvec(m, w))                       # 1
    h = ops.add(ops.hadamard(h, x), ops.scale(w, 0.5))    # 2
    h = ops.axpy(0.3, ops.relu(h), ops.square(h))         # 3
    cat = ops.concat([h, ops.abs(ops.sub(w, x))], axis=0)  # 4
    h = ops.slice(cat, slice(2, 6))                       # 5
    return ops.add(ops.mean(ops.square(h)), ops.sum(ops.tanh(h)))  # 6


def _loss_fn(m, x):
    return lambda w: float(_composite(Eager(), w, m, x))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_random_graph_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    d = 4
    m = rng.uniform(-1, 1, (d, d))
    x = rng.uniform(-1, 1, d)
    w = rng.uniform(-1, 1, d)
    tape = Tape(track_relu_margin=True)
    loss = _composite(tape, tape.param("w", w), tape.constant(m), tape.constant(x))
    if tape.relu_margin < 1e-4 or np.abs(w - x).min() < 1e-4:
        return  # too close to a kink for central differences
    g = tape.backward(loss)["w"]
    fd = central_difference(_loss_fn(m, x), w)
    assert np.linalg.norm(g - fd) <= 1e-6 * max(np.linalg.norm(fd), 1e-12)


@settings(max_examples=30, deadline=None)
@given(
    arrays(np.float64, 5, elements=st.floats(-2, 2)),
    st.floats(-3, 3),
    st.floats(-3, 3),
)
def test_backward_is_linear(w, a, b):
    def grads(alpha, beta):
        tape = Tape()
        p = tape.param("w", w)
        f = tape.sum(tape.tanh(p))
        g = tape.mean(tape.square(p))
        return tape.backward(tape.add(tape.scale(f, alpha), tape.scale(g, beta)))["w"]

    np.testing.assert_allclose(grads(a, b), a * grads(1, 0) + b * grads(0, 1), rtol=1e-12, atol=1e-12)


def test_rerun_is_bitwise_deterministic():
    rng = np.random.default_rng(0)
    m, x, w = rng.normal(size=(4, 4)), rng.normal(size=4), rng.normal(size=4)
    runs = []
    for _ in range(2):
        tape = Tape()
        loss = _composite(tape, tape.param("w", w), tape.constant(m), tape.constant(x))
        runs.append((loss.value.copy(), tape.backward(loss)["w"]))
    assert np.array_equal(runs[0][0], runs[1][0])
    assert np.array_equal(runs[0][1], runs[1][1])


def test_broadcast_batched_matvec_gradient():
    # matvec of a (P, d) matrix against a batch (N, 1, d), as used by the NODE terms
    rng = np.random.default_rng(1)
    m = rng.normal(size=(3, 4))
    x = rng.normal(size=(5, 1, 4))
    tape = Tape()
    loss = tape.sum(tape.square(tape.matvec(tape.param("m", m), tape.constant(x))))
    g = tape.backward(loss)["m"]
    fd = central_difference(lambda mm: float(np.sum((x @ mm.T) ** 2)), m)
    np.testing.assert_allclose(g, fd, rtol=1e-7, atol=1e-8)
