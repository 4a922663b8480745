import math

import numpy as np
import pytest

from awpo.advantage import (
    ConfigError,
    GroupBatch,
    HyperParams,
    Samples,
    advantages,
    batch_clip_radius,
    compute_batch,
    gate,
    group_stats,
    policy_surrogate,
    surrogate_gradient,
    surrogate_objective,
    surrogate_terms,
    surrogate_value_and_gradient,
)
from awpo.policy import TabularPolicy

from oracles import reference_grpo, reference_ppo_objective


def batch(r_out, r_mix):
    k = len(r_out)
    return GroupBatch(0, np.zeros(k, int), np.zeros(k), np.asarray(r_out, float), np.asarray(r_mix, float))


def test_stats_constant_group():
    s = group_stats(r_out=[1.3] * 5, r_mix=[2.0] * 5)
    assert s.mean_out == pytest.approx(1.3) and s.sigma_out == pytest.approx(0.0, abs=1e-15)


def test_stats_population_variance():
    s = group_stats(r_out=[0, 2], r_mix=[0, 1])
    assert s.mean_out == 1.0 and s.sigma_out == 1.0
    s = group_stats(r_out=[0, 1, 2], r_mix=[0, 1, 2])
    assert s.mean_mix == 1.0 and s.sigma_mix == pytest.approx(math.sqrt(2 / 3), abs=1e-15)


def test_stats_need_two_samples():
    with pytest.raises(ConfigError):
        group_stats(r_out=[1.0], r_mix=[1.0])
    with pytest.raises(ConfigError):
        batch([1.0], [1.0])
    with pytest.raises(ConfigError):
        HyperParams(k=1)


def test_gate_degenerate_group():
    g = gate(group_stats(r_out=[1, 1], r_mix=[1, 1]), HyperParams())
    assert g.r_g == 0.0 and g.w_mix == 0.0


def test_gate_tolerance_closes():
    hp = HyperParams(eps_std=1e-8, eps_mix=0.5)
    g = gate(group_stats(r_out=[1, 1], r_mix=[1.5, 2.5]), hp)
    assert g.sigma_out == 0.0 and g.sigma_mix == 0.5
    assert g.r_g == pytest.approx(1.0, abs=1e-7)
    assert g.w_mix == 0.0


def test_gate_opens_below_tolerance_and_saturation():
    hp = HyperParams()
    g = gate(group_stats(r_out=[0, 2], r_mix=[0.5, 2.5]), hp)
    # equal spreads put r_g just under 1/2, inside the default tolerance
    assert g.r_g < 0.5 and g.w_mix == g.r_g
    sat = gate(group_stats(r_out=[1.96, 1.98], r_mix=[2.9, 2.95]), hp)
    assert sat.w_mix == 0.0


def test_difficulty_band_is_strict():
    hp = HyperParams(tau_low=0.4, tau_high=1.6, alpha_base=1.0, alpha_prio=1.5)
    mid = (hp.tau_low + hp.tau_high) / 2
    assert gate(group_stats(r_out=[mid, mid], r_mix=[mid, mid]), hp).d_g == 1.5
    assert gate(group_stats(r_out=[0.4, 0.4], r_mix=[1, 1]), hp).d_g == 1.0
    assert gate(group_stats(r_out=[1.6, 1.6], r_mix=[2, 2]), hp).d_g == 1.0


def test_advantages_hand_example():
    hp = HyperParams(eps_norm=1e-300)
    b = batch([0, 2], [0, 3])
    st = group_stats(b)
    gs = gate(st, hp).__class__(st.mean_out, st.mean_mix, st.sigma_out, st.sigma_mix, 0.0, 0.4, 1.0)
    adv = advantages(b, gs, st, hp)
    assert np.allclose(adv.a_out, [-1, 1]) and np.allclose(adv.a_mix, [-1, 1])
    assert np.allclose(adv.a_hyper, [-1, 1])


def test_advantages_equal_outcomes():
    hp = HyperParams()
    b = batch([1, 1, 1], [1.2, 1.5, 1.8])
    st = group_stats(b)
    gs = gate(st, hp)
    adv = advantages(b, gs, st, hp)
    assert np.all(adv.a_out == 0)
    assert np.allclose(adv.a_hyper, gs.d_g * gs.w_mix * adv.a_mix)


def test_closed_gate_is_weighted_grpo():
    hp = HyperParams(eps_mix=0.0)
    b = batch([0, 1, 2], [0.5, 1.2, 2.9])
    st = group_stats(b)
    gs = gate(st, hp)
    assert gs.w_mix == 0.0
    assert np.array_equal(advantages(b, gs, st, hp).a_hyper, gs.d_g * advantages(b, gs, st, hp).a_out)


def test_clip_radius_examples():
    hp = HyperParams(eps_min=0.1, eps_max=0.3)
    assert batch_clip_radius(np.zeros(4), hp) == 0.3
    assert batch_clip_radius(np.ones(4), hp) == 0.1
    assert batch_clip_radius(np.array([0.0, 0.5]), hp) == pytest.approx(0.25, abs=1e-15)
    with pytest.raises(ValueError):
        batch_clip_radius(np.array([]), hp)


def test_compute_batch_matches_single_group_path():
    rng = np.random.default_rng(0)
    hp = HyperParams(eps_mix=0.6)
    r_out = rng.choice([0.0, 0.5, 1.0, 1.75, 2.0], size=(30, 6))
    r_mix = r_out + rng.choice([0.0, 0.2, 0.6, 1.0], size=r_out.shape)
    ba = compute_batch(r_out, r_mix, hp)
    for g, gs in enumerate(ba.gates()):
        b = batch(r_out[g], r_mix[g])
        st = group_stats(b)
        ref = gate(st, hp)
        assert gs.w_mix == pytest.approx(ref.w_mix, abs=1e-14) and gs.d_g == ref.d_g
        assert np.allclose(ba.a_hyper[g], advantages(b, ref, st, hp).a_hyper, atol=1e-12)
    assert ba.clip_radius == pytest.approx(batch_clip_radius(ba.gates(), hp))


def test_baselines_pin_gates():
    rng = np.random.default_rng(1)
    r_out = rng.random((5, 4)) * 2
    r_mix = r_out + rng.random((5, 4))
    hp = HyperParams(clip_eps=0.17)
    o = compute_batch(r_out, r_mix, hp, "grpo_outcome")
    assert np.all(o.w_mix == 0) and np.all(o.d_g == 1) and o.clip_radius == 0.17
    m = compute_batch(r_out, r_mix, hp, "grpo_mixed")
    assert np.all(m.w_mix == 1) and np.allclose(m.a_hyper, m.a_mix)
    with pytest.raises(ConfigError):
        compute_batch(r_out, r_mix, hp, "ppo")


def test_reduction_to_grpo():
    rng = np.random.default_rng(2)
    hp = HyperParams(eps_min=0.2, eps_max=0.2)
    for _ in range(20):
        r_out = rng.random((7, 8)) * 2
        ba = compute_batch(r_out, r_out + rng.random(r_out.shape), hp, force_w=0.0, force_d=1.0)
        assert np.max(np.abs(ba.a_hyper - reference_grpo(r_out, hp.eps_norm))) <= 1e-12
        assert ba.clip_radius == 0.2


def test_surrogate_examples():
    assert surrogate_objective([0.5, -1.0, 2.0], [0, 0, 0], [0, 0, 0], 0.2) == pytest.approx(0.5)
    assert surrogate_terms([1.0], [math.log(2)], [0.0], 0.2)[0] == pytest.approx(1.2)
    assert surrogate_terms([-1.0], [math.log(0.5)], [0.0], 0.2)[0] == pytest.approx(-0.8)
    with pytest.raises(ValueError):
        surrogate_objective([1.0], [float("-inf")], [0.0], 0.2)


def test_surrogate_matches_reference():
    rng = np.random.default_rng(4)
    for _ in range(50):
        n = 10
        adv, new, old = rng.normal(size=n), rng.normal(scale=0.3, size=n), rng.normal(scale=0.3, size=n)
        assert surrogate_objective(adv, new, old, 0.2) == pytest.approx(reference_ppo_objective(adv, new, old, 0.2))


def _random_setup(rng, n_prompts=3, max_actions=4, n=12):
    logits = [rng.normal(size=rng.integers(2, max_actions + 1)) for _ in range(n_prompts)]
    pol = TabularPolicy(logits)
    g = rng.integers(0, n_prompts, size=n)
    a = np.array([rng.integers(0, pol.sizes[i]) for i in g])
    old = TabularPolicy([l + rng.normal(scale=0.3, size=len(l)) for l in logits])
    old_lp = np.array([old.log_prob(gi, ai) for gi, ai in zip(g, a)])
    return pol, Samples(g, a, old_lp, rng.normal(size=n))


def test_gradient_at_old_policy_is_reinforce():
    rng = np.random.default_rng(5)
    pol, s = _random_setup(rng)
    s = Samples(s.prompt_idx, s.actions, [pol.log_prob(g, a) for g, a in zip(s.prompt_idx, s.actions)], s.advantages)
    expected = np.mean([A * pol.score(g, a) for g, a, A in zip(s.prompt_idx, s.actions, s.advantages)], axis=0)
    assert np.allclose(surrogate_gradient(s, pol, 0.2), expected, atol=1e-14)


def test_zero_advantage_zero_gradient():
    pol, s = _random_setup(np.random.default_rng(6))
    s = Samples(s.prompt_idx, s.actions, s.old_log_probs, np.zeros(len(s.actions)))
    assert np.all(surrogate_gradient(s, pol, 0.2) == 0)


def _fd_gradient(pol, s, eps, h=1e-6):
    g = np.zeros(pol.dim)
    for i in range(pol.dim):
        e = np.zeros(pol.dim)
        e[i] = h
        g[i] = (policy_surrogate(s, pol.with_theta(pol.theta + e), eps)
                - policy_surrogate(s, pol.with_theta(pol.theta - e), eps)) / (2 * h)
    return g


def _near_kink(pol, s, eps, margin=1e-4):
    r = np.exp(pol.flat_log_probs[pol.offsets[s.prompt_idx] + s.actions] - s.old_log_probs)
    return np.any(np.abs(r - (1 - eps)) < margin) or np.any(np.abs(r - (1 + eps)) < margin)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    checked = 0
    while checked < 20:
        pol, s = _random_setup(rng, n_prompts=1, max_actions=3, n=2)
        if _near_kink(pol, s, 0.2):
            continue
        val, grad = surrogate_value_and_gradient(s, pol, 0.2)
        assert val == pytest.approx(policy_surrogate(s, pol, 0.2), abs=1e-14)
        fd = _fd_gradient(pol, s, 0.2)
        assert np.linalg.norm(grad - fd) <= 1e-5 * max(np.linalg.norm(fd), 1e-8) or np.linalg.norm(grad - fd) < 1e-9
        checked += 1


def test_hyperparams_round_trip_and_validation():
    hp = HyperParams(eps_mix=0.3)
    assert HyperParams.from_dict(hp.to_dict()) == hp
    with pytest.raises(ConfigError) as e:
        HyperParams.from_dict({"nope": 1})
    assert e.value.key == "nope"
    for bad in ({"alpha_prio": 0.9}, {"tau_low": 2.0}, {"eps_min": 0.5, "eps_max": 0.3}, {"learning_rate": 0}):
        with pytest.raises(ConfigError):
            HyperParams(**bad)
