import json

import numpy as np
import pytest

from imode_lab import autodiff as ad
from imode_lab.episodes import Episode
from imode_lab.imode import (
    Dims,
    ImodeModel,
    ImodeVariant,
    as_batch,
    build_variant,
    default_dims,
    encode_prefix,
    encode_prefix_traced,
    reconstruction_loss,
    rollout,
)

N_X, N_A = 2, 2


def episode(k=6, interventions=((2.0, [0.5, -1.0]),), seed=0):
    rng = np.random.default_rng(seed)
    return Episode(np.arange(k, dtype=float), rng.uniform(0, 1, (k, N_X)), [(t, np.array(a)) for t, a in interventions])


def model(variant, seed=0, hidden=8, latent=6):
    return build_variant(variant, default_dims(variant, N_X, N_A, latent), seed, hidden)


def zero_params(m):
    for _, p in m.params.items():
        p.value = np.zeros_like(p.value)


# ------------------------------------------------------------ build_variant


def test_switch_dims_and_exact_zero_flows():
    m = model("switch")
    assert (m.dims.n_h, m.dims.n_zx, m.dims.n_za) == (2, 2, 2)
    spec = m.flow_spec()
    assert spec.f_x is None and spec.f_a is None
    assert "f_x.W1" not in m.params and "f_h.W1" not in m.params
    _, trace = encode_prefix_traced(m, episode(k=5), 5, 0.25)
    # z values only move at the unit-time events
    zx, za, t = np.array(trace.norm_zx), np.array(trace.norm_za), np.array(trace.t)
    for k in range(4):
        inside = (t >= k) & (t < k + 1)
        assert np.ptp(zx[inside]) == 0.0 and np.ptp(za[inside]) == 0.0


def test_decay_alpha_starts_at_one_and_flow_is_linear():
    m = model("decay")
    assert m.alpha == 1.0
    z = ad.tensor([0.3, -2.0, 1.0, 0.0, 4.0, 5.0])
    np.testing.assert_array_equal(m.flow_spec().f_a(z).value, -z.value)
    m.params["log_alpha"].value = np.array([np.log(0.25)])
    np.testing.assert_allclose(m.flow_spec().f_a(z).value, -0.25 * z.value, rtol=1e-15)


def test_general_components_are_mlps_of_width_40():
    m = build_variant("general", default_dims("general", N_X, N_A), 0)
    assert m.dims == Dims(2, 2, 40, 40, 40)
    for name in ("f_h", "f_x", "f_a", "g_x", "g_a", "decoder"):
        assert m.params[f"{name}.W1"].shape[0] == 40
    assert m.params["embed.W"].shape == (40, 2)


def test_parameter_groups():
    m = model("general")
    groups = {m.params.group(n) for n in m.params.names()}
    assert groups == {"psi", "theta", "phi", "omega"}
    assert m.params.group("g_a.W1") == "phi" and m.params.group("g_x.W1") == "theta"


@pytest.mark.parametrize(
    "variant, dims",
    [("switch", Dims(2, 2, 2, 3, 2)), ("decay", Dims(2, 2, 4, 40, 40)), ("general", Dims(2, 2, 0, 4, 4))],
)
def test_dimension_constraints(variant, dims):
    with pytest.raises(ValueError):
        build_variant(variant, dims, 0)


def test_unknown_variant():
    with pytest.raises(ValueError):
        ImodeVariant("bogus")


# ------------------------------------------------------------ encode_prefix


def test_single_observation_prefix_is_one_gx_jump():
    m = model("general")
    zero_params(m)
    m.params["g_x.b2"].value = np.arange(1.0, 7.0)
    ep = episode(interventions=())
    state = encode_prefix(m, ep, 1, dt=0.5)
    assert state.t == 0.0
    np.testing.assert_array_equal(state.z_x.value[0], np.arange(1.0, 7.0))
    np.testing.assert_array_equal(state.z_a.value, 0.0)


def test_switch_prefix_without_interventions_keeps_za_zero():
    m = model("switch", seed=3)
    state = encode_prefix(m, episode(interventions=()), 5, dt=0.25)
    np.testing.assert_array_equal(state.z_a.value, 0.0)
    assert state.t == 4.0


def test_encode_prefix_is_deterministic():
    a = encode_prefix(model("general", seed=5), episode(), 4, 0.5)
    b = encode_prefix(model("general", seed=5), episode(), 4, 0.5)
    for x, y in ((a.h, b.h), (a.z_x, b.z_x), (a.z_a, b.z_a)):
        assert x.value.tobytes() == y.value.tobytes()


def test_encode_prefix_needs_enough_observations():
    with pytest.raises(ValueError):
        encode_prefix(model("general"), episode(k=3), 4, 0.5)


def test_initial_h_embeds_first_observation():
    m = model("decay")
    ep = episode()
    s = m.initial_state(ep.x[:1], 0.0)
    np.testing.assert_array_equal(s.h.value, ep.x[:1])
    g = model("general")
    s = g.initial_state(ep.x[:1], 0.0)
    expected = ep.x[:1] @ g.params["embed.W"].value.T + g.params["embed.b"].value
    np.testing.assert_allclose(s.h.value, expected, rtol=1e-15)


# ------------------------------------------------------------------ rollout


def test_switch_rollout_is_affine_without_future_interventions():
    m = model("switch", seed=2)
    ep = episode(k=8, interventions=((1.0, [1.0, 0.0]),))
    state = encode_prefix(m, ep, 3, dt=0.25)
    res = rollout(m, state, ep, dt=0.25)
    preds = np.stack([p.value[0] for p in res.predictions])
    assert res.times == [3.0, 4.0, 5.0, 6.0, 7.0]
    np.testing.assert_allclose(np.diff(preds, n=2, axis=0), 0.0, atol=1e-12)


def test_decay_za_matches_exponential_closed_form():
    m = model("decay", seed=1)
    m.params["log_alpha"].value = np.array([np.log(0.7)])
    ep = episode(k=8, interventions=((3.0, [1.0, -1.0]),))
    state = encode_prefix(m, ep, 4, dt=0.01)
    za0 = state.z_a.value.copy()
    assert np.linalg.norm(za0) > 0
    res = rollout(m, state, ep, dt=0.01, record=True)
    t = np.array(res.trace.t)
    expected = np.linalg.norm(za0) * np.exp(-0.7 * (t - 3.0))
    np.testing.assert_allclose(np.ravel(res.trace.norm_za), expected, rtol=0, atol=1e-8)


def test_rollout_to_current_time_is_empty():
    m = model("general")
    ep = episode()
    state = encode_prefix(m, ep, 6, 0.5)
    res = rollout(m, state, ep, horizon=state.t, dt=0.5)
    assert res.predictions == [] and res.loss is None


def test_rollout_applies_no_observation_jumps():
    m = model("general", seed=4)
    ep = episode(k=6, interventions=())
    state = encode_prefix(m, ep, 3, 0.5)
    other = Episode(ep.times, ep.x + 10.0 * np.arange(6)[:, None] * (np.arange(6)[:, None] >= 3), [])
    a = rollout(m, state, ep, dt=0.5)
    b = rollout(m, state, other, dt=0.5)
    for p, q in zip(a.predictions, b.predictions):
        assert p.value.tobytes() == q.value.tobytes()


def test_empty_intervention_channel_never_evaluates_ga():
    m = model("general", seed=6)
    calls = []
    original = m.g_a
    m.g_a = lambda x: calls.append(1) or original(x)
    ep = episode(k=6, interventions=())
    state = encode_prefix(m, ep, 3, 0.5)
    rollout(m, state, ep, dt=0.5)
    assert calls == []
    m.params["g_a.W1"].value = m.params["g_a.W1"].value * 100.0
    state2 = encode_prefix(m, ep, 3, 0.5)
    assert state2.h.value.tobytes() == state.h.value.tobytes()


def test_rollout_off_grid_horizon():
    m = model("general")
    ep = episode()
    state = encode_prefix(m, ep, 3, 0.5)
    with pytest.raises(ValueError):
        rollout(m, state, ep, horizon=4.3, dt=0.5)


# ------------------------------------------------------------------- loss


def test_reconstruction_loss_examples():
    p = [ad.tensor([1.0, 2.0]), ad.tensor([3.0, 4.0])]
    assert reconstruction_loss(p, [[1.0, 2.0], [3.0, 4.0]]).value == 0.0
    one = reconstruction_loss([ad.tensor([0.1, -0.2])], [[0.0, 0.0]])
    assert float(one.value) == pytest.approx(0.05, abs=1e-15)
    base = reconstruction_loss([ad.tensor([0.1, -0.2]), ad.tensor([0.3, 0.0])], [[0, 0], [0, 0]])
    scaled = reconstruction_loss([ad.tensor([0.3, -0.6]), ad.tensor([0.9, 0.0])], [[0, 0], [0, 0]])
    assert float(scaled.value) == pytest.approx(9.0 * float(base.value), rel=1e-14)


def test_reconstruction_loss_averages_batch():
    p = [ad.tensor([[1.0, 0.0], [0.0, 3.0]])]
    assert float(reconstruction_loss(p, [np.zeros((2, 2))]).value) == 5.0


def test_reconstruction_loss_length_mismatch():
    with pytest.raises(ValueError):
        reconstruction_loss([ad.tensor([1.0])], [])
    with pytest.raises(ValueError):
        reconstruction_loss([], [])


# -------------------------------------------------------------- gradients


@pytest.mark.parametrize("variant", ["switch", "decay", "general"])
def test_end_to_end_gradient_three_step_episode(variant):
    m = model(variant, seed=9, hidden=5, latent=4)
    # zero biases put pre-activations exactly on the leaky-relu kink while z_a = 0
    rng = np.random.default_rng(0)
    for _, p in m.params.items():
        p.value = p.value + 0.05 * rng.standard_normal(p.shape)
    ep = episode(k=3, interventions=((1.0, [0.4, -0.3]), (2.0, [1.0, 0.2])), seed=2)

    def f():
        state = encode_prefix(m, ep, 1, dt=0.25)
        return rollout(m, state, ep, dt=0.25).loss

    assert ad.grad_check(f, m.params, eps=1e-6) < 1e-4


# ------------------------------------------------------------- checkpoint


@pytest.mark.parametrize("variant", ["switch", "decay", "general"])
def test_checkpoint_round_trip_bit_exact(variant):
    m = model(variant, seed=12)
    payload = json.loads(json.dumps(m.to_checkpoint()))
    assert payload["variant"] == variant and payload["kind"] == f"imode_{variant}"
    back = ImodeModel.from_checkpoint(payload)
    for name in m.params.names():
        assert back.params[name].value.tobytes() == m.params[name].value.tobytes()
    ep = episode()
    a = m.predict(m_batch(m, ep), 3, 0.5)[0]
    b = back.predict(m_batch(back, ep), 3, 0.5)[0]
    for p, q in zip(a, b):
        assert p.tobytes() == q.tobytes()


def m_batch(m, ep):
    return as_batch(ep, m.dims.n_a)
