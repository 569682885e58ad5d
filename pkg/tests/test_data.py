import math

import numpy as np
import pytest

from p2mpo import InvariantError, Policy, TabularRMDP, coverage_coefficient, generate, visitation
from p2mpo.data import dataset_from_text, dataset_to_text, load_dataset, sample_kernel_in_ball, save_dataset
from p2mpo.duals import divergence

from helpers import random_tabular


def simulate_visitation(m, pi, n, seed):
    """Plain vectorised Monte-Carlo frequencies of ``(h, s, a)``, independent of ``generate``."""
    rng = np.random.default_rng(seed)
    H, S, A = m.horizon, m.num_states, m.num_actions
    freq = np.zeros((H, S, A))
    s = np.full(n, m.initial_state)
    for h in range(H):
        a = (rng.random(n)[:, None] > np.cumsum(pi.probs[h, s], axis=1)).sum(axis=1)
        np.add.at(freq[h], (s, a), 1.0)
        s = (rng.random(n)[:, None] > np.cumsum(m.kernels[h, s, a], axis=1)).sum(axis=1)
        s = np.minimum(s, S - 1)
    return freq / n


def test_deterministic_everything_gives_identical_trajectories():
    k = np.zeros((3, 3, 2, 3))
    k[:, :, :, 1] = 1.0
    m = TabularRMDP(k, np.full((3, 3, 2), 0.5))
    data = generate(m, Policy.deterministic(np.ones((3, 3), dtype=int), 2), 50, 1)
    for arr in (data.states, data.actions, data.next_states, data.rewards):
        assert np.all(arr == arr[:, :1])


def test_same_seed_same_bits():
    m = random_tabular(np.random.default_rng(0))
    pi = Policy.uniform(3, 4, 2)
    a, b = generate(m, pi, 300, 7), generate(m, pi, 300, 7)
    assert dataset_to_text(a) == dataset_to_text(b)
    assert not np.array_equal(a.states, generate(m, pi, 300, 8).states)


def test_prefix_is_stable_in_n():
    # per-trajectory streams: trajectory tau does not depend on how many others are drawn
    m = random_tabular(np.random.default_rng(1))
    pi = Policy.uniform(3, 4, 2)
    small, big = generate(m, pi, 20, 3), generate(m, pi, 200, 3)
    assert np.array_equal(small.states, big.states[:, :20])


def test_frequencies_within_binomial_bands():
    rng = np.random.default_rng(2)
    m = random_tabular(rng, H=3, S=2, A=2)
    pi = Policy.random(3, 2, 2, rng)
    n = 100_000
    data = generate(m, pi, n, 11)
    d = visitation(m, pi)
    for h in range(3):
        freq = np.zeros((2, 2))
        np.add.at(freq, (data.states[h], data.actions[h]), 1.0 / n)
        sigma = np.sqrt(d[h] * (1 - d[h]) / n)
        assert np.all(np.abs(freq - d[h]) <= 3 * sigma + 1e-12)


def test_rewards_match_table():
    m = random_tabular(np.random.default_rng(3))
    data = generate(m, Policy.uniform(3, 4, 2), 40, 0)
    data.check_rewards(m.rewards)
    with pytest.raises(InvariantError):
        data.check_rewards(np.zeros_like(m.rewards))


def test_generate_rejects_bad_input():
    m = random_tabular(np.random.default_rng(4))
    with pytest.raises(InvariantError):
        generate(m, Policy.uniform(3, 4, 2), 0, 0)
    with pytest.raises(InvariantError):
        generate(m, Policy.uniform(3, 4, 2), 5, -1)
    with pytest.raises(InvariantError):
        generate(m, Policy.uniform(2, 4, 2), 5, 0)


# visitation ------------------------------------------------------------------


def test_one_step_visitation():
    m = random_tabular(np.random.default_rng(5), H=1, S=3, A=2, initial_state=2)
    pi = Policy.random(1, 3, 2, 0)
    d = visitation(m, pi)
    np.testing.assert_array_equal(d[0, 2], pi.probs[0, 2])
    assert d[0, :2].sum() == 0


def test_uniform_on_doubly_stochastic():
    S, A, H = 4, 2, 3
    row = 0.5 * np.eye(S)[[1, 2, 3, 0]] + 0.5 * np.eye(S)
    k = np.broadcast_to(row[None, :, None, :], (H, S, A, S)).copy()
    pi = Policy.uniform(H, S, A)
    # average over start states gives a uniform start
    d = sum(visitation(k, pi, initial_state=s) for s in range(S)) / S
    np.testing.assert_allclose(d, np.full((H, S, A), 1 / (S * A)), atol=1e-15)


def test_visitation_matches_monte_carlo():
    rng = np.random.default_rng(6)
    m = random_tabular(rng, H=4, S=3, A=2)
    pi = Policy.random(4, 3, 2, rng)
    n = 1_000_000
    freq = simulate_visitation(m, pi, n, 9)
    d = visitation(m, pi)
    assert np.all(np.abs(freq - d) <= 3 * np.sqrt(d * (1 - d) / n) + 1e-12)


# coverage --------------------------------------------------------------------


def test_coverage_same_policy_zero_radius_is_one():
    m = random_tabular(np.random.default_rng(7), rho=0.0)
    pi = Policy.deterministic(np.zeros((3, 4), dtype=int), 2)
    assert coverage_coefficient(m, pi, pi) == pytest.approx(1.0, abs=1e-12)


def test_coverage_closed_form_for_uniform_behavior():
    rng = np.random.default_rng(8)
    m = random_tabular(rng, H=3, S=3, A=2, rho=0.0)
    pi_star = Policy.deterministic(rng.integers(0, 2, size=(3, 3)), 2)
    pi_b = Policy.uniform(3, 3, 2)
    d_star, d_b = visitation(m, pi_star), visitation(m, pi_b)
    want = 0.0
    for h in range(3):
        mask = d_b[h] > 0
        want = max(want, float((d_star[h][mask] ** 2 / d_b[h][mask]).sum()))
    assert coverage_coefficient(m, pi_b, pi_star) == pytest.approx(want, rel=1e-12)


def test_coverage_hole_is_infinite():
    m = random_tabular(np.random.default_rng(9))
    pi_b = Policy.deterministic(np.zeros((3, 4), dtype=int), 2)
    pi_star = Policy.deterministic(np.ones((3, 4), dtype=int), 2)
    assert coverage_coefficient(m, pi_b, pi_star) == math.inf


@pytest.mark.parametrize("div", ["tv", "kl"])
def test_coverage_at_least_one_and_running_max(div):
    rng = np.random.default_rng(10)
    m = random_tabular(rng, divergence=div, rho=0.2)
    pi_star = Policy.random(3, 4, 2, rng)
    value, trace = coverage_coefficient(m, Policy.uniform(3, 4, 2), pi_star, n_perturb=16, return_trace=True)
    assert value >= 1.0 - 1e-12
    assert all(b >= a for a, b in zip(trace, trace[1:]))
    assert value == trace[-1]


@pytest.mark.parametrize("div", ["tv", "kl"])
def test_sampled_kernels_stay_in_ball(div):
    rng = np.random.default_rng(11)
    m = random_tabular(rng, divergence=div, rho=0.15)
    k = sample_kernel_in_ball(m.kernels, m.robust, rng)
    for p, q in zip(m.kernels.reshape(-1, 4), k.reshape(-1, 4)):
        assert divergence(q, p, div) <= 0.15 + 1e-9
        assert q.sum() == pytest.approx(1.0, abs=1e-12) and np.all(q >= 0)


# file format -----------------------------------------------------------------


def test_text_round_trip_is_exact(tmp_path):
    m = random_tabular(np.random.default_rng(12))
    data = generate(m, Policy.uniform(3, 4, 2), 64, 5)
    path = tmp_path / "d.csv"
    save_dataset(data, path)
    back = load_dataset(path)
    for name in ("states", "actions", "rewards", "next_states"):
        assert np.array_equal(getattr(back, name), getattr(data, name))
    assert back.behavior.equals(data.behavior) and back.seed == 5 and back.model_id == data.model_id
    assert dataset_to_text(back) == path.read_text()


def test_text_rejects_wrong_row_count():
    m = random_tabular(np.random.default_rng(13))
    text = dataset_to_text(generate(m, Policy.uniform(3, 4, 2), 4, 0))
    with pytest.raises(InvariantError, match="rows"):
        dataset_from_text("\n".join(text.splitlines()[:-1]))
    with pytest.raises(InvariantError):
        dataset_from_text(text.split("\n", 1)[1])
