import numpy as np
import pytest

from imode_lab import autodiff as ad
from imode_lab.autodiff import ParamStore
from imode_lab.nn import (
    GruCell,
    Mlp,
    ParamSpec,
    RmspropState,
    clip_grad_norm,
    gru_specs,
    gru_step,
    init_params,
    mlp_forward,
    mlp_specs,
    rmsprop_step,
)


def zero_mlp(n_in, n_out, hidden=4):
    store = init_params(mlp_specs("m", n_in, n_out, hidden), 0)
    for name, p in store.items():
        p.value = np.zeros_like(p.value)
    return store, Mlp.from_store(store, "m")


def zero_gru(n_in, n):
    store = init_params(gru_specs("g", n_in, n), 0)
    for _, p in store.items():
        p.value = np.zeros_like(p.value)
    return store, GruCell.from_store(store, "g")


# --------------------------------------------------------------------- MLP


def test_mlp_zero_map():
    _, m = zero_mlp(3, 2)
    np.testing.assert_array_equal(mlp_forward(m, ad.tensor([1.0, -2.0, 3.0])).value, [0.0, 0.0])


def test_mlp_hand_evaluation():
    m = Mlp(ad.tensor(np.eye(2)), ad.tensor([0.0, 0.0]), ad.tensor(np.eye(2)), ad.tensor([1.0, 1.0]))
    np.testing.assert_array_equal(mlp_forward(m, ad.tensor([2.0, 3.0])).value, [3.0, 4.0])


def test_mlp_gradient_matches_finite_differences():
    store = init_params(mlp_specs("m", 3, 2, 6), 7)
    rng = np.random.default_rng(1)
    for name, p in store.items():
        p.value = p.value + 0.1 * rng.standard_normal(p.shape)
    m = Mlp.from_store(store, "m")
    x = ad.tensor(rng.uniform(-2, 2, (4, 3)))
    assert ad.grad_check(lambda: ad.sum_squares(m(x)), store, eps=1e-6) < 1e-5


def test_mlp_width_mismatch():
    _, m = zero_mlp(3, 2)
    with pytest.raises(ValueError):
        m(ad.tensor([1.0, 2.0]))


def test_mlp_positive_homogeneity():
    m = Mlp(ad.tensor(np.eye(2)), ad.tensor([0.0, 0.0]), ad.tensor([[1.0, 2.0]]), ad.tensor([0.0]))
    x = np.array([0.5, 1.5])
    y1 = m(ad.tensor(x)).value
    y3 = m(ad.tensor(3.0 * x)).value
    np.testing.assert_allclose(y3, 3.0 * y1, rtol=1e-15)


def test_mlp_specs_reject_zero_hidden():
    with pytest.raises(ValueError):
        mlp_specs("m", 2, 2, 0)


# --------------------------------------------------------------------- GRU


def test_gru_zero_params_halves_state():
    _, cell = zero_gru(3, 4)
    h = np.array([[1.0, -2.0, 0.5, 8.0]])
    out = gru_step(cell, ad.tensor(h), ad.tensor(np.ones((1, 3))))
    np.testing.assert_array_equal(out.value, 0.5 * h)


def test_gru_zero_fixed_point():
    _, cell = zero_gru(2, 3)
    np.testing.assert_array_equal(gru_step(cell, ad.tensor(np.zeros(3)), ad.tensor(np.zeros(2))).value, 0.0)


def test_gru_gradient_matches_finite_differences():
    store = init_params(gru_specs("g", 3, 5), 11)
    rng = np.random.default_rng(2)
    for name, p in store.items():
        p.value = p.value + 0.1 * rng.standard_normal(p.shape)
    cell = GruCell.from_store(store, "g")
    h, x = ad.tensor(rng.uniform(-1, 1, (2, 5))), ad.tensor(rng.uniform(-2, 2, (2, 3)))
    f = lambda: ad.sum_squares(gru_step(cell, gru_step(cell, h, x), x))  # noqa: E731
    assert ad.grad_check(f, store, eps=1e-6) < 1e-4


def test_gru_dim_mismatch():
    _, cell = zero_gru(2, 3)
    with pytest.raises(ValueError):
        gru_step(cell, ad.tensor(np.zeros(4)), ad.tensor(np.zeros(2)))


def test_gru_output_stays_between_state_and_candidate():
    store = init_params(gru_specs("g", 2, 3), 5)
    cell = GruCell.from_store(store, "g")
    h = ad.tensor(np.full(3, 10.0))
    out = gru_step(cell, h, ad.tensor([1.0, -1.0])).value
    # candidate lies in (-1, 1), the update gate in (0, 1)
    assert np.all(out < 10.0) and np.all(out > -1.0)


# ------------------------------------------------------------------- init


def test_init_is_deterministic():
    specs = mlp_specs("m", 5, 3)
    a, b = init_params(specs, 42), init_params(specs, 42)
    for name in a.names():
        np.testing.assert_array_equal(a[name].value, b[name].value)


def test_init_fan_in_bound_and_zero_biases():
    store = init_params([ParamSpec("W", (50, 100)), ParamSpec("b", (50,))], 0)
    assert np.all(np.abs(store["W"].value) <= 0.1)
    assert np.abs(store["W"].value).max() > 0.09
    np.testing.assert_array_equal(store["b"].value, 0.0)


# ---------------------------------------------------------------- RMSprop


def single_param(value):
    store = ParamStore()
    store.add("p", np.array(value, dtype=float))
    return store


def test_rmsprop_zero_gradient_is_bit_identical():
    store = single_param([1.25, -3.5])
    before = store["p"].value.copy()
    rmsprop_step(RmspropState(), store, {"p": np.zeros(2)})
    assert store["p"].value.tobytes() == before.tobytes()


def test_rmsprop_hand_arithmetic():
    store = single_param([1.0])
    state = RmspropState(lr=0.001, rho=0.99, eps=1e-8)
    rmsprop_step(state, store, {"p": np.array([1.0])})
    assert state.sq_avg["p"][0] == pytest.approx(0.01, abs=1e-15)
    assert store["p"].value[0] == pytest.approx(1.0 - 0.001 / (0.1 + 1e-8), abs=1e-15)
    assert store["p"].value[0] == pytest.approx(0.99, abs=1e-6)


def test_rmsprop_monotone_for_constant_positive_gradient():
    store = single_param([1.0])
    state = RmspropState()
    values = [1.0]
    for _ in range(2):
        rmsprop_step(state, store, {"p": np.array([0.3])})
        values.append(store["p"].value[0])
    assert values[0] > values[1] > values[2]


def test_rmsprop_missing_gradient():
    with pytest.raises(KeyError):
        rmsprop_step(RmspropState(), single_param([1.0]), {})


def test_rmsprop_rejects_non_positive_lr():
    with pytest.raises(ValueError):
        RmspropState(lr=0.0)


def test_clip_grad_norm():
    grads = {"a": np.array([3.0, 0.0]), "b": np.array([4.0])}
    norm = clip_grad_norm(grads, 1.0)
    assert norm == 5.0
    total = np.sqrt(sum(np.sum(g * g) for g in grads.values()))
    assert total == pytest.approx(1.0, rel=1e-9)
    small = {"a": np.array([0.1])}
    clip_grad_norm(small, 5.0)
    assert small["a"][0] == 0.1
