import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sloppy_reduce.bench import TOY_TRUTH, toy_conditions
from sloppy_reduce.errors import ConfigError, ShapeError
from sloppy_reduce.models import (
    ExpSumModel,
    LinearLogModel,
    ToyPolypModel,
    model_from_config,
    steady_state,
)
from sloppy_reduce.params import ParameterSpace, ParameterSpec

from conftest import make_space


def linear_model(n):
    return LinearLogModel(make_space(n))


def exp_model():
    specs = tuple(ParameterSpec(n, 0.0, 10.0) for n in ("a1", "r1", "a2", "r2"))
    specs += (ParameterSpec("sigma", 0.0, 1.0, "noise"),)
    return ExpSumModel(ParameterSpace(specs, {"slow": ["a1", "r1"], "fast": ["a2", "r2"]}))


def toy_at(**changes):
    theta = dict(TOY_TRUTH)
    theta.update(changes)
    return np.array([theta[n] for n in ToyPolypModel.parameter_names])


# -- model A -----------------------------------------------------------------


def test_linear_log_examples():
    e = math.e
    assert np.allclose(linear_model(2).predict([1.0, 1.0], np.eye(2)).predictions, [0.0, 0.0])
    assert linear_model(2).predict([e, e], [[1.0, 1.0]]).predictions == pytest.approx([2.0])
    assert linear_model(2).predict([e, e], [[2.0, 0.0], [0.0, 3.0]]).predictions == pytest.approx([2.0, 3.0])


def test_linear_log_dimension_mismatch():
    with pytest.raises(ShapeError):
        linear_model(2).predict([1.0, 1.0, 1.0, 0.1], np.eye(2))
    with pytest.raises(ShapeError):
        linear_model(2).predict([1.0, 1.0], np.ones((2, 3)))


@given(st.lists(st.floats(1e-3, 1e3), min_size=3, max_size=3))
def test_linear_log_identity(theta):
    A = np.array([[1.0, -0.5, 2.0], [0.3, 0.0, 1.0]])
    out = linear_model(3).predict(theta, A)
    assert out.converged
    assert np.allclose(out.predictions, A @ np.log(theta), rtol=1e-14, atol=1e-13)


# -- model B -----------------------------------------------------------------


def test_exp_sum_examples():
    m = exp_model()
    assert m.predict([1, 1, 1, 1], [[0.0]]).predictions[0] == pytest.approx(2.0)
    assert m.predict([1, 1, 1, 1], [[800.0]]).predictions[0] == pytest.approx(0.0, abs=1e-300)
    # 2 exp(-0.5) + exp(-3) = 1.262848 (a value of 1.2631 quoted elsewhere is a rounding slip)
    expected = 2.0 * math.exp(-0.5) + math.exp(-3.0)
    assert expected == pytest.approx(1.262848, abs=1e-6)
    assert m.predict([2, 0.5, 1, 3], [[1.0]]).predictions[0] == pytest.approx(expected, rel=1e-15)


def test_exp_sum_label_swap_symmetry():
    m = exp_model()
    t = np.linspace(0, 3, 13)[:, None]
    a = m.predict([2, 0.5, 1, 3], t).predictions
    b = m.predict([1, 3, 2, 0.5], t).predictions
    assert np.allclose(a, b, rtol=1e-15)


# -- steady state ------------------------------------------------------------


def test_steady_state_linear_decay():
    res = steady_state(lambda x: -x, [0.7])
    assert res.converged.all()
    assert abs(res.state[0]) <= 1e-10


def test_steady_state_quadratic_root():
    res = steady_state(lambda x: 1.0 - x**2, [2.0])
    assert res.converged.all()
    assert res.state[0] == pytest.approx(1.0, abs=1e-10)


def test_steady_state_reports_failure_without_raising():
    res = steady_state(lambda x: x**2 + 1.0, [0.5], max_iter=200)
    assert not res.converged.any()


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=20))
def test_steady_state_residual_bound_on_converged_systems(targets):
    c = np.array(targets)[:, None] * np.array([1.0, -0.5])

    def flux(x):
        return np.stack([np.tanh(c[:, 0] - x[:, 0]) + 0.1 * (x[:, 1] - c[:, 1]) * 0,
                         c[:, 1] - x[:, 1] - 0.1 * np.sin(x[:, 0])], axis=-1)

    res = steady_state(flux, np.zeros_like(c))
    f = flux(res.state)
    for k in np.flatnonzero(res.converged):
        assert np.max(np.abs(f[k])) <= 1e-10 * (1.0 + np.max(np.abs(res.state[k])))


def test_steady_state_deterministic():
    def flux(x):
        return np.stack([1.0 - x[..., 0] ** 3, x[..., 0] - x[..., 1]], axis=-1)

    a = steady_state(flux, [[3.0, -1.0]])
    b = steady_state(flux, [[3.0, -1.0]])
    assert np.array_equal(a.state, b.state)


# -- model C -----------------------------------------------------------------


def test_toy_no_pumps_at_E0_gives_zero(toy):
    m = toy.model
    theta = toy_at(Vmax1=0.0, Vmax2=0.0)
    out = m.predict(theta, [[1.0, 2.0, 1.0]])
    assert out.converged
    assert out.predictions[0] == pytest.approx(0.0, abs=1e-12)


def test_toy_channel_sum_symmetry(toy):
    m = toy.model
    X = toy_conditions()
    a = m.predict(toy_at(k_pp=0.02, k_co2=0.01), X).predictions
    b = m.predict(toy_at(k_pp=0.01, k_co2=0.02), X).predictions
    assert np.allclose(a, b, rtol=1e-12, atol=1e-14)


@given(kpp=st.floats(1e-3, 0.6), kco2=st.floats(1e-4, 0.03))
def test_toy_invariant_under_exchanging_channels(kpp, kco2):
    from sloppy_reduce.bench import load_fixture

    m = load_fixture("toy-polyp").model
    X = toy_conditions()[::3]
    a = m.predict(toy_at(k_pp=kpp, k_co2=kco2), X)
    b = m.predict(toy_at(k_pp=kco2, k_co2=kpp), X)
    assert a.converged and b.converged
    assert np.allclose(a.predictions, b.predictions, rtol=1e-9, atol=1e-12)


def test_toy_steady_state_residual_at_truth(toy):
    m = toy.model
    X = toy_conditions()
    P = toy_at()[None]
    ss = m.solve(P, X)
    assert ss.converged.all()
    flux, _, _ = m._fluxes(P, X)
    state = ss.state.reshape(-1, 2)
    resid = flux(state, np.arange(state.shape[0]))
    assert np.max(np.abs(resid)) < 1e-10


def test_toy_reproduces_clean_fixture_values(toy):
    out = toy.model.predict(toy.theta_full(), toy.dataset.conditions)
    assert np.allclose(out.predictions, toy.oracle["clean_predictions"], rtol=1e-12)


def test_toy_parameter_order_is_checked(toy):
    doc = dict(toy.config)
    doc["parameters"] = list(reversed(doc["parameters"][:-1])) + doc["parameters"][-1:]
    with pytest.raises(ConfigError):
        model_from_config(doc)


def test_toy_condition_shape_checked(toy):
    with pytest.raises(ShapeError):
        toy.model.predict(toy.theta_full(), [[1.0, 2.0]])


@pytest.mark.parametrize("drop", [{"pump2"}, {"kco2-channel"}, {"pump1"}, {"pump2", "kco2-channel"}])
def test_reduce_equals_zero_flux_substitution(toy, drop):
    full = toy.model
    red = full.reduce(drop)
    assert red.space.names == [n for n in full.space.names
                               if all(n not in full.space.mechanisms[m] for m in drop)]
    g = np.random.default_rng(11)
    thetas = g.uniform(red.space.lower, red.space.upper, size=(100, red.space.n_params))
    X = toy_conditions()
    got = red.predict_batch(thetas, X)
    full_thetas = np.empty((100, full.space.n_params))
    for j, name in enumerate(full.space.names):
        if name in red.space.names:
            full_thetas[:, j] = thetas[:, red.space.index(name)]
        else:
            full_thetas[:, j] = full.zero_flux[name]
    want = full.predict_batch(full_thetas, X)
    assert np.array_equal(got.converged, want.converged)
    ok = got.converged
    assert np.array_equal(got.predictions[ok], want.predictions[ok])


def test_reduce_nested_and_empty(toy):
    m = toy.model
    assert m.reduce(set()) is m
    twice = m.reduce({"pump2"}).reduce({"kco2-channel"})
    assert twice.dropped == {"pump2", "kco2-channel"}
    assert twice.space.names == m.reduce({"pump2", "kco2-channel"}).space.names


def test_batch_matches_single(toy):
    m = toy.model
    g = np.random.default_rng(2)
    thetas = g.uniform(m.space.lower, m.space.upper, size=(7, m.space.n_params))
    X = toy_conditions()
    batch = m.predict_batch(thetas, X)
    for k in range(7):
        single = m.predict(thetas[k], X)
        assert single.converged == batch.converged[k]
        if single.converged:
            assert np.allclose(single.predictions, batch.predictions[k], rtol=1e-12, atol=1e-14)
