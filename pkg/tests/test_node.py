import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nodeonet import node as node_mod
from nodeonet.encoders import FourierDecoder, LearnedBasis, SensorEncoder
from nodeonet.errors import DivergedError, MissingInputError, ShapeError, TimeNotOnGridError
from nodeonet.grids import uniform_grid
from nodeonet.node import (
    InputTrajectory,
    NodeModel,
    NodeVariant,
    decode_states,
    euler_times,
    extend_horizon,
    forward,
    integrate_euler,
    poly_time_term,
    predict,
    rhs,
)
from nodeonet.autodiff import Eager


def random_params(variant, rng, scale=1.0):
    return {k: scale * rng.uniform(-1, 1, s) for k, s in variant.param_shapes().items()}


def zero_params(variant):
    return {k: np.zeros(s) for k, s in variant.param_shapes().items()}


def scalar_source():
    v = NodeVariant("source", P=1, d_U=1, d_V=1)
    p = {"W": np.ones((1, 1)), "A": np.ones((1, 1)), "a1": np.zeros((1, 1)), "B": np.zeros((1, 1)),
         "P_f": np.zeros((1, 1))}
    return v, p


# -- rhs -------------------------------------------------------------------------


def test_rhs_scalar_hand_value():
    v, p = scalar_source()
    assert rhs(v, p, np.array([1.0]), 0.0, {"f": np.array([0.7])}) == pytest.approx([1.0])


def test_rhs_formula_source_independent_oracle():
    rng = np.random.default_rng(0)
    v = NodeVariant("source", P=3, d_U=4, d_V=5)
    p = random_params(v, rng)
    psi, f, t = rng.normal(size=4), rng.normal(size=5), 0.3
    expected = sum(p["W"][i] * np.maximum(p["A"][i] * psi + p["a1"][i] * t + p["B"][i], 0) for i in range(3))
    expected = expected + p["P_f"] @ f
    np.testing.assert_allclose(rhs(v, p, psi, t, {"f": f}), expected, rtol=1e-14, atol=1e-14)


def test_rhs_formula_ns_independent_oracle():
    rng = np.random.default_rng(1)
    v = NodeVariant("ns", P=2, d_U=3, d_V=4, n=2, poly_constant=True, activation="tanh")
    p = random_params(v, rng)
    psi, f, t = rng.normal(size=3), rng.normal(size=4), 0.7
    out = np.zeros(3)
    for i in range(2):
        poly = p["a2"][i] * t**2 + p["a1"][i] * t + p["a0"][i]
        out += p["W"][i] * np.tanh(p["A"][i] * psi + (p["C"][i] * psi) * (p["D"][i] * psi) + poly + p["B"][i])
    out += p["P_f"] @ f
    got = rhs(v, p, psi, t, {"f": f, "u0": np.zeros(4)})
    np.testing.assert_allclose(got, out, rtol=1e-13, atol=1e-14)


def test_rhs_ns_zero_params():
    v = NodeVariant("ns", P=3, d_U=4, d_V=2)
    psi = np.random.default_rng(2).normal(size=4)
    assert np.array_equal(rhs(v, zero_params(v), psi, 0.4, {"f": np.ones(2), "u0": np.ones(2)}), np.zeros(4))


def test_full_reduces_to_diffusion():
    rng = np.random.default_rng(3)
    full = NodeVariant("full", P=4, d_U=5, d_V=6)
    diff = NodeVariant("diffusion", P=4, d_U=5, d_V=6)
    pd = random_params(diff, rng)
    pf = dict(pd, V=pd["W"].copy(), P_r=np.zeros((5, 6)), P_u=rng.normal(size=(5, 6)))
    psi, D, f = rng.normal(size=5), rng.random(6), rng.normal(size=6)
    a = rhs(diff, pd, psi, 0.25, {"D": D, "f": f})
    b = rhs(full, pf, psi, 0.25, {"D": D, "f": f, "R": np.zeros(6), "u0": np.zeros(6)})
    assert np.abs(a - b).max() <= 1e-15


def test_full_variant_time_dependent_inputs():
    rng = np.random.default_rng(4)
    v = NodeVariant("full", P=2, d_U=3, d_V=2)
    p = random_params(v, rng)
    times = [0.0, 1.0]
    D = InputTrajectory(times, rng.random((1, 2, 2)))
    R = InputTrajectory(times, rng.normal(size=(1, 2, 2)))
    f = InputTrajectory(times, rng.normal(size=(1, 2, 2)))
    psi = rng.normal(size=(1, 1, 3))
    mid = {k: 0.5 * (x.values[:, 0] + x.values[:, 1]) for k, x in {"D": D, "R": R, "f": f}.items()}
    u0 = np.zeros((1, 2))
    got = rhs(v, p, psi, 0.5, {"D": D, "R": R, "f": f, "u0": u0})
    want = rhs(v, p, psi, 0.5, {**mid, "u0": u0})
    np.testing.assert_allclose(got, want, rtol=1e-13, atol=1e-14)


def test_rhs_input_validation():
    v = NodeVariant("multi", P=1, d_U=2, d_V=3)
    p = zero_params(v)
    with pytest.raises(MissingInputError):
        rhs(v, p, np.zeros(2), 0.0, {"f": np.zeros(3)})
    with pytest.raises(ShapeError):
        rhs(v, p, np.zeros(2), 0.0, {"f": np.zeros(3), "D": np.zeros(4)})


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.floats(0, 1e3))
def test_source_additive(seed, scale):
    rng = np.random.default_rng(seed)
    v = NodeVariant("source", P=3, d_U=4, d_V=5)
    p = random_params(v, rng)
    psi, f1, f2 = rng.normal(size=4), rng.normal(size=5), scale * rng.normal(size=5)
    diff = rhs(v, p, psi, 0.2, {"f": f1 + f2}) - rhs(v, p, psi, 0.2, {"f": f1})
    np.testing.assert_allclose(diff, p["P_f"] @ f2, rtol=1e-10, atol=1e-12 * (1 + scale))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.floats(0, 100))
def test_relu_rhs_positively_homogeneous(seed, s):
    rng = np.random.default_rng(seed)
    v = NodeVariant("source", P=3, d_U=4, d_V=2)
    p = random_params(v, rng)
    p["B"][:] = 0.0
    p["P_f"][:] = 0.0
    psi = rng.normal(size=4)
    zero = {"f": np.zeros(2)}
    np.testing.assert_allclose(rhs(v, p, s * psi, 0.0, zero), s * rhs(v, p, psi, 0.0, zero), rtol=1e-12, atol=1e-12)


# -- time polynomial ----------------------------------------------------------------


def test_poly_examples():
    v = NodeVariant("source", P=1, d_U=1, d_V=1, n=1, poly_constant=True)
    p = {"a1": np.array([[2.0]]), "a0": np.array([[3.0]])}
    assert poly_time_term(p, 0, 0.5, v) == pytest.approx([4.0])
    assert poly_time_term(p, 0, 0.0, v) == pytest.approx([3.0])
    v0 = NodeVariant("source", P=2, d_U=2, d_V=1, n=0)
    p0 = {"a0": np.array([[1.0, -1.0], [5.0, 6.0]])}
    for t in (0.0, 0.3, 7.0):
        assert np.array_equal(poly_time_term(p0, 1, t, v0), [5.0, 6.0])


def test_poly_default_has_no_constant():
    v = NodeVariant("source", P=2, d_U=3, d_V=1)
    assert "a0" not in v.param_shapes()
    p = {"a1": np.full((2, 3), 2.0)}
    assert np.array_equal(poly_time_term(p, 0, 0.0, v), np.zeros(3))


# -- Euler integration ------------------------------------------------------------


def test_one_euler_step():
    v, p = scalar_source()
    traj = integrate_euler(v, p, {"f": np.zeros((1, 1))}, T=0.5, N_t=1, psi0=np.ones((1, 1, 1)))
    assert traj.states[1][0, 0, 0] == pytest.approx(1.5)


def test_zero_dynamics_keep_state():
    v = NodeVariant("multi", P=2, d_U=3, d_V=2)
    psi0 = np.full((2, 1, 3), 0.7)
    traj = integrate_euler(v, zero_params(v), {"D": np.ones((2, 2)), "f": np.ones((2, 2))}, 1.0, 8, psi0=psi0)
    assert all(np.array_equal(s, psi0) for s in traj.states)


def test_geometric_recurrence():
    # W = -1, A = 1, B = 10 keeps relu on its linear branch; P_f f = 10 cancels B
    v = NodeVariant("source", P=1, d_U=1, d_V=1)
    p = {"W": -np.ones((1, 1)), "A": np.ones((1, 1)), "B": np.full((1, 1), 10.0), "a1": np.zeros((1, 1)),
         "P_f": np.ones((1, 1))}
    N_t, psi0 = 20, 0.8
    traj = integrate_euler(v, p, {"f": np.full((1, 1), 10.0)}, 1.0, N_t, psi0=np.full((1, 1, 1), psi0))
    dt = 1.0 / N_t
    got = np.array([s[0, 0, 0] for s in traj.states])
    assert np.abs(got - psi0 * (1 - dt) ** np.arange(N_t + 1)).max() <= 1e-12


def test_zero_initial_state_and_projected_initial_state():
    rng = np.random.default_rng(5)
    src = NodeVariant("source", P=1, d_U=2, d_V=3)
    traj = integrate_euler(src, random_params(src, rng), {"f": rng.normal(size=(2, 3))}, 1.0, 2)
    assert np.array_equal(traj.states[0], np.zeros((2, 1, 2)))
    ns = NodeVariant("ns", P=1, d_U=2, d_V=3)
    p = random_params(ns, rng)
    u0 = rng.normal(size=(2, 3))
    traj = integrate_euler(ns, p, {"f": np.zeros((2, 3)), "u0": u0}, 1.0, 2)
    np.testing.assert_allclose(traj.states[0][:, 0], u0 @ p["P_u"].T, rtol=1e-15)


def test_euler_first_order_convergence():
    rng = np.random.default_rng(6)
    v = NodeVariant("source", P=3, d_U=2, d_V=2, activation="tanh")
    p = random_params(v, rng)
    inputs = {"f": rng.normal(size=(1, 2))}
    ref = integrate_euler(v, p, inputs, 1.0, 2**15).states[-1]
    errs = [np.abs(integrate_euler(v, p, inputs, 1.0, n).states[-1] - ref).max() for n in (64, 128, 256)]
    orders = np.log2(np.array(errs[:-1]) / errs[1:])
    assert orders.min() >= 0.95


def test_divergence_reports_step():
    v = NodeVariant("source", P=1, d_U=1, d_V=1)
    p = {"W": np.full((1, 1), 1e200), "A": np.ones((1, 1)), "B": np.ones((1, 1)), "a1": np.zeros((1, 1)),
         "P_f": np.zeros((1, 1))}
    with pytest.raises(DivergedError) as info:
        with np.errstate(over="ignore"):
            integrate_euler(v, p, {"f": np.zeros((1, 1))}, 1.0, 10, psi0=np.ones((1, 1, 1)))
    assert info.value.step >= 1


# -- forward map ------------------------------------------------------------------


def small_model(seed=7, decoder=None, kind="source"):
    rng = np.random.default_rng(seed)
    v = NodeVariant(kind, P=3, d_U=4, d_V=5)
    decoder = decoder or LearnedBasis(4, hidden=(6,))
    params = random_params(v, rng) | decoder.init_params(rng)
    return NodeModel(v, decoder, params, SensorEncoder.uniform(5), T=1.0, N_t=4), rng


def test_forward_constant_basis_returns_latent():
    v = NodeVariant("source", P=2, d_U=1, d_V=2)
    rng = np.random.default_rng(8)
    model = NodeModel(v, FourierDecoder(1), random_params(v, rng), SensorEncoder.uniform(2), 1.0, 5)
    inputs = {"f": rng.normal(size=(3, 2))}
    x = np.linspace(0, 1, 7)
    pred = forward(model, inputs, euler_times(1.0, 5)[1:], x)
    latent = integrate_euler(v, model.params, inputs, 1.0, 5).stacked()[:, 1:, 0]
    assert np.array_equal(pred, np.repeat(latent[:, :, None], 7, axis=2))


def test_forward_zero_params():
    model, rng = small_model()
    model.params = {k: np.zeros_like(a) for k, a in model.params.items()}
    pred = forward(model, {"f": rng.normal(size=(2, 5))}, [0.5, 1.0], uniform_grid(9))
    assert np.array_equal(pred, np.zeros((2, 2, 9)))


def test_forward_matches_dot_product_oracle():
    model, rng = small_model()
    inputs = {"f": rng.normal(size=(2, 5))}
    x = rng.random(6)
    pred = forward(model, inputs, [0.25, 0.75], x)
    states = integrate_euler(model.variant, model.params, inputs, 1.0, 4).stacked()
    alpha = model.decoder.basis_values(x, model.params)
    for n in range(2):
        for a, k in enumerate((1, 3)):
            for j in range(6):
                assert abs(pred[n, a, j] - np.dot(alpha[j], states[n, k])) <= 1e-14


def test_forward_rejects_off_grid_time():
    model, rng = small_model()
    with pytest.raises(TimeNotOnGridError):
        forward(model, {"f": rng.normal(size=(1, 5))}, [0.3], uniform_grid(3))


def test_latent_computed_once_per_batch(monkeypatch):
    model, rng = small_model()
    counts = {"rhs": 0, "basis": 0}
    real_call = node_mod.Dynamics.__call__
    real_basis = model.decoder.basis

    def counting_call(self, psi, t):
        counts["rhs"] += 1
        return real_call(self, psi, t)

    def counting_basis(ops, params, x):
        counts["basis"] += 1
        return real_basis(ops, params, x)

    monkeypatch.setattr(node_mod.Dynamics, "__call__", counting_call)
    monkeypatch.setattr(model.decoder, "basis", counting_basis)
    inputs = {"f": rng.normal(size=(8, 5))}
    forward(model, inputs, euler_times(1.0, 4)[1:], uniform_grid(5))
    assert counts == {"rhs": 4, "basis": 1}  # one batched step per Euler step, independent of samples
    forward(model, inputs, euler_times(1.0, 4)[1:], uniform_grid(500))
    assert counts == {"rhs": 8, "basis": 2}  # more points: same latent work
    # reusing a trajectory at new points only touches the decoder
    traj = integrate_euler(model.variant, model.params, inputs, 1.0, 4)
    before = counts["rhs"]
    ops = Eager()
    for x in (uniform_grid(3), uniform_grid(30)):
        decode_states(ops, model.decoder, model.params, traj.stacked(), x)
    assert counts["rhs"] == before and counts["basis"] == 4


def test_extend_horizon_degenerate_is_bitwise():
    model, rng = small_model()
    inputs = {"f": rng.normal(size=(3, 5))}
    x = uniform_grid(11)
    a = predict(model, inputs, 1.0, 4, x)
    b = extend_horizon(model, inputs, 1.0, 4, x)
    assert np.array_equal(a, b)


def test_extend_horizon_prefix_is_bitwise():
    model, rng = small_model()
    inputs = {"f": rng.normal(size=(3, 5))}
    x = uniform_grid(11)
    short = integrate_euler(model.variant, model.params, inputs, 1.0, 4).stacked()
    long = integrate_euler(model.variant, model.params, inputs, 2.0, 8).stacked()
    assert np.array_equal(short, long[:, :5])


def test_extend_horizon_zero_dynamics():
    model, rng = small_model(kind="ns", decoder=LearnedBasis(4, hidden=(3,), dim=2))
    for k in model.node_param_names:
        if k != "P_u":
            model.params[k] = np.zeros_like(model.params[k])
    model.encoder = SensorEncoder(rng.random((5, 2)), periodic=True)
    x = rng.random((7, 2))
    inputs = {"f": rng.normal(size=(2, 5)), "u0": rng.normal(size=(2, 5))}
    pred = extend_horizon(model, inputs, 2.0, 8, x, include_initial=True)
    assert np.array_equal(pred, np.repeat(pred[:, :1], 9, axis=1))
    with pytest.raises(ValueError):
        extend_horizon(model, inputs, 0.5, 2, x)
