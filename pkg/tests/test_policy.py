import math

import numpy as np
import pytest

from awpo.policy import TabularPolicy


def _within_3_sigma(counts, p, n):
    sd = np.sqrt(n * p * (1 - p))
    return np.all(np.abs(counts - n * p) <= 3 * sd)


def test_uniform_sampling():
    pol = TabularPolicy([[0.0, 0.0, 0.0]])
    n = 100_000
    draws = pol.sample(0, np.random.default_rng(0), size=n)
    assert _within_3_sigma(np.bincount(draws, minlength=3), np.full(3, 1 / 3), n)


def test_near_deterministic():
    pol = TabularPolicy([[10.0, -10.0]])
    draws = pol.sample(0, np.random.default_rng(1), size=100_000)
    assert np.mean(draws == 0) > 0.9999


def test_softmax_closed_form():
    pol = TabularPolicy([[math.log(2), 0.0]])
    assert np.allclose(pol.probs(0), [2 / 3, 1 / 3])
    n = 100_000
    draws = pol.sample(0, np.random.default_rng(2), size=n)
    assert _within_3_sigma(np.bincount(draws, minlength=2), np.array([2 / 3, 1 / 3]), n)


def test_sample_groups_shape_and_range():
    pol = TabularPolicy([[0, 1], [0, 0, 5, 1]])
    s = pol.sample_groups(8, np.random.default_rng(3))
    assert s.shape == (2, 8) and s[0].max() < 2 and s[1].max() < 4


def test_score_is_indicator_minus_probs():
    pol = TabularPolicy([[0.3, -0.2], [1.0, 0.0, 0.5]])
    z = pol.score(1, 2)
    assert np.allclose(z[:2], 0) and np.allclose(z[2:], np.eye(3)[2] - pol.probs(1))
    assert np.allclose(pol.score_matrix()[3], pol.score(1, 1))


def test_score_matches_finite_difference_of_log_prob():
    pol = TabularPolicy([[0.3, -0.2, 0.9]])
    h = 1e-6
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        fd = (pol.with_theta(pol.theta + e).log_prob(0, 1) - pol.with_theta(pol.theta - e).log_prob(0, 1)) / (2 * h)
        assert fd == pytest.approx(pol.score(0, 1)[i], abs=1e-8)


def test_bad_indices():
    pol = TabularPolicy([[0, 0]])
    with pytest.raises(IndexError):
        pol.log_prob(0, 2)
    with pytest.raises(IndexError):
        pol.log_prob(1, 0)


def test_exact_expectation():
    pol = TabularPolicy([[0, 0], [math.log(3), 0]])
    assert pol.exact_expectation(np.full(4, 7.0)) == pytest.approx(7.0)
    # (1/2)(0.5*1 + 0.5*2) + (1/2)(0.75*4 + 0.25*0)
    assert pol.exact_expectation([[1, 2], [4, 0]]) == pytest.approx(0.75 + 1.5)
    with pytest.raises(ValueError):
        pol.exact_expectation(np.ones(3))


def test_expectation_matches_monte_carlo():
    pol = TabularPolicy([[0.5, -1.0, 0.2]])
    rng = np.random.default_rng(4)
    n = 100_000
    draws = pol.sample(0, rng, size=n)
    ind = np.array([0.0, 1.0, 0.0])
    exact = pol.exact_expectation(ind)
    est = ind[draws].mean()
    assert abs(est - exact) <= 3 * math.sqrt(exact * (1 - exact) / n)


def test_checkpoint_bit_exact(tmp_path):
    rng = np.random.default_rng(5)
    pol = TabularPolicy([rng.normal(size=4), rng.normal(size=6)], prompt_ids=["a", "b"], seed=9)
    path = tmp_path / "ckpt.json"
    pol.save(path)
    back = TabularPolicy.load(path)
    assert np.array_equal(back.theta, pol.theta) and back.prompt_ids == pol.prompt_ids and back.seed == 9
    assert np.array_equal(back.flat_probs, pol.flat_probs)
    with pytest.raises(ValueError):
        TabularPolicy.from_json({**pol.to_json(), "version": 99})


def test_theta_is_read_only():
    pol = TabularPolicy.uniform([2, 3])
    with pytest.raises(ValueError):
        pol.theta[0] = 1.0
    assert pol.dim == 5 and list(pol.sizes) == [2, 3]
