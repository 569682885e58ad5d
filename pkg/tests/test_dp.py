import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from p2mpo import (
    InvariantError,
    Policy,
    RobustSpec,
    TabularRMDP,
    factored_robust_backup,
    linear_robust_backup,
    nominal_evaluate,
    robust_evaluate,
    robust_plan,
    suboptimality,
    tv_primal_inf,
)
from p2mpo.dp import bellman_residual, nominal_plan, worst_case_kernels
from p2mpo.duals import dual_inf

from helpers import enumerate_policies, random_factored, random_linear, random_tabular


def test_zero_radius_matches_standard_dp():
    rng = np.random.default_rng(0)
    for div in ("tv", "kl"):
        m = random_tabular(rng, H=4, S=5, A=3, divergence=div, rho=0.0)
        pi = Policy.random(4, 5, 3, rng)
        np.testing.assert_allclose(robust_evaluate(m, pi).v, nominal_evaluate(m.kernels, m.rewards, pi).v, atol=1e-12)
        plan, nom = robust_plan(m), nominal_plan(m.kernels, m.rewards)
        assert plan.policy.equals(nom.policy)
        np.testing.assert_allclose(plan.values.v, nom.values.v, atol=1e-12)


def test_one_step_ignores_transitions():
    rng = np.random.default_rng(1)
    m = random_tabular(rng, H=1, S=3, A=2, rho=0.7)
    pi = Policy.random(1, 3, 2, rng)
    np.testing.assert_allclose(robust_evaluate(m, pi).v[0], (pi.probs[0] * m.rewards[0]).sum(axis=1), atol=1e-15)


def _grid3(step):
    K = int(round(1 / step))
    pts = [(a, b, K - a - b) for a in range(K + 1) for b in range(K + 1 - a)]
    return np.array(pts, dtype=float) / K


def test_chain_matches_grid_product_oracle():
    # kernel entries sit on the 1e-2 grid, so the worst TV point (mass moved by 0.2) is a grid point
    K = np.array([
        [[0.6, 0.4, 0.0], [0.3, 0.3, 0.4]],
        [[0.1, 0.7, 0.2], [0.0, 0.5, 0.5]],
        [[0.25, 0.25, 0.5], [0.0, 0.1, 0.9]],
    ])
    kernels = np.stack([K, K[::-1], K])
    rewards = np.array([[[0.1, 0.0], [0.4, 0.2], [1.0, 0.6]]] * 3)
    m = TabularRMDP(kernels, rewards, RobustSpec("tv", 0.2))
    pi = Policy.deterministic(np.array([[1, 0, 1], [0, 1, 0], [1, 1, 0]]), 2)
    grid = _grid3(1e-2)
    dist = 0.5 * np.abs(grid[None, None] - kernels.reshape(3, 6, 1, 3)).sum(axis=-1)
    v = np.zeros(3)
    for h in range(2, -1, -1):
        cont = np.where(dist[h] <= 0.2 + 1e-12, grid @ v, np.inf).min(axis=1).reshape(3, 2)
        q = rewards[h] + cont
        v = np.einsum("sa,sa->s", pi.probs[h], q)
    np.testing.assert_allclose(robust_evaluate(m, pi).v[0], v, atol=1e-9)


def test_plan_single_action_equals_evaluate():
    m = random_tabular(np.random.default_rng(2), A=1)
    plan = robust_plan(m)
    np.testing.assert_allclose(plan.values.v, robust_evaluate(m, plan.policy).v, atol=1e-15)


def test_full_ambiguity_ties_go_to_action_zero():
    rng = np.random.default_rng(3)
    H, S, A = 3, 3, 2
    rewards = rng.uniform(size=(H, S, A))
    rewards[H - 1] = 0.5
    rewards[H - 2] = 0.2
    m = TabularRMDP(rng.dirichlet(np.ones(S), size=(H, S, A)), rewards, RobustSpec("tv", 1.0))
    assert np.all(robust_plan(m).policy.greedy_actions()[H - 2] == 0)


def test_plan_dominates_random_policies():
    rng = np.random.default_rng(4)
    m = random_tabular(rng, H=3, S=4, A=2, rho=0.15)
    plan = robust_plan(m)
    for _ in range(200):
        pi = Policy.random(3, 4, 2, rng)
        assert plan.values.v[0] == pytest.approx(np.maximum(plan.values.v[0], robust_evaluate(m, pi).v[0]), abs=1e-12)


@pytest.mark.parametrize("div", ["tv", "kl"])
def test_bellman_residual_and_bounds(div):
    rng = np.random.default_rng(5)
    m = random_tabular(rng, H=4, S=4, A=3, divergence=div, rho=0.3, sparse=True)
    for values in (robust_plan(m).values, robust_evaluate(m, Policy.random(4, 4, 3, rng))):
        assert bellman_residual(m, values) <= 1e-9
        H = m.horizon
        assert np.all(values.v >= 0)
        assert np.all(values.v <= (H - np.arange(H + 1))[:, None] + 1e-12)


@pytest.mark.parametrize("div", ["tv", "kl"])
def test_value_nonincreasing_in_rho(div):
    rng = np.random.default_rng(6)
    m = random_tabular(rng, H=3, S=4, A=2, divergence=div)
    pi = Policy.random(3, 4, 2, rng)
    vals = [robust_evaluate(m.with_robust(RobustSpec(div, r)), pi).v for r in np.linspace(0, 1, 11)]
    for a, b in zip(vals, vals[1:]):
        assert np.all(b <= a + 1e-9)


def test_worst_kernels_certify_values():
    rng = np.random.default_rng(7)
    m = random_tabular(rng, H=4, S=5, A=3, rho=0.25)
    plan = robust_plan(m)
    np.testing.assert_allclose(nominal_evaluate(plan.worst_kernels, m.rewards, plan.policy).v, plan.values.v, atol=1e-9)
    with pytest.raises(InvariantError):
        worst_case_kernels(m.with_robust(RobustSpec("kl", 0.1)), plan.values)


def test_parallel_backups_are_bit_identical():
    m = random_tabular(np.random.default_rng(8), H=3, S=5, A=3, divergence="kl", rho=0.2)
    a, b = robust_plan(m), robust_plan(m, n_jobs=2)
    assert np.array_equal(a.values.v, b.values.v) and a.policy.equals(b.policy)


def test_policy_shape_checked():
    m = random_tabular(np.random.default_rng(9))
    with pytest.raises(InvariantError, match="policy shape"):
        robust_evaluate(m, Policy.uniform(2, 4, 2))


# suboptimality ---------------------------------------------------------------


def test_suboptimality_of_plan_is_zero():
    m = random_tabular(np.random.default_rng(10), rho=0.2)
    plan = robust_plan(m)
    assert suboptimality(m, plan.policy, plan) == 0.0


def test_equivalent_actions_give_zero_gap():
    rng = np.random.default_rng(11)
    k = rng.dirichlet(np.ones(3), size=(2, 3, 1))
    r = rng.uniform(size=(2, 3, 1))
    m = TabularRMDP(np.repeat(k, 2, axis=2), np.repeat(r, 2, axis=2), RobustSpec("tv", 0.3))
    assert suboptimality(m, Policy.uniform(2, 3, 2)) == pytest.approx(0.0, abs=1e-12)


def test_bad_policy_gap_matches_enumeration():
    # two-armed chain: arm 1 pays now, arm 0 leads to the paying state
    kernels = np.array([
        [[[0.0, 1.0], [1.0, 0.0]], [[0.0, 1.0], [1.0, 0.0]]],
        [[[1.0, 0.0], [1.0, 0.0]], [[0.0, 1.0], [0.0, 1.0]]],
    ])
    rewards = np.array([[[0.0, 0.3], [0.5, 0.0]], [[0.0, 0.1], [1.0, 0.2]]])
    m = TabularRMDP(kernels, rewards, RobustSpec("tv", 0.2))
    # by hand: optimal last-step values are [0.1, 1.0]; arm 0 at s=0 is worth 0.8 * 1.0 + 0.2 * 0.1 = 0.82,
    # arm 1 is worth 0.3 + 0.1; the bad policy collects 0.3 and then nothing
    bad = Policy.deterministic(np.array([[1, 1], [0, 0]]), 2)
    best = max(robust_evaluate(m, pi).v[0, 0] for pi in enumerate_policies(2, 2, 2))
    assert best == pytest.approx(0.82, abs=1e-12)
    assert robust_evaluate(m, bad).v[0, 0] == pytest.approx(0.3, abs=1e-12)
    assert suboptimality(m, bad) == pytest.approx(0.52, abs=1e-12)


# factored backup -------------------------------------------------------------


def test_factored_d1_is_single_dual():
    rng = np.random.default_rng(12)
    for kind in ("tv", "kl"):
        p, v = rng.dirichlet(np.ones(3)), rng.uniform(0, 2, 3)
        assert factored_robust_backup([p], [0.2], v, kind) == dual_inf(p, v, RobustSpec(kind, 0.2)).value


def test_factored_constant_value():
    rng = np.random.default_rng(13)
    fs = [rng.dirichlet(np.ones(2)) for _ in range(3)]
    assert factored_robust_backup(fs, [0.3, 0.1, 0.5], np.full(8, 0.7), "kl") == 0.7


def product_grid_tv(f0, f1, V, rho, step=1e-3):
    t = np.arange(0, 1 + step / 2, step)
    a = t[np.abs(t - f0[0]) <= rho + 1e-12]
    b = t[np.abs(t - f1[0]) <= rho + 1e-12]
    A, B = np.meshgrid(a, b, indexing="ij")
    # mixed-radix order: factor 0 is the fastest digit
    val = A * B * V[0] + (1 - A) * B * V[1] + A * (1 - B) * V[2] + (1 - A) * (1 - B) * V[3]
    return float(val.min())


def test_factored_matches_product_grid():
    rng = np.random.default_rng(14)
    for _ in range(20):
        # centers on the grid so the exact product minimizer is a grid point
        f0, f1 = (np.array([x, 1 - x]) for x in rng.integers(0, 1001, 2) / 1000)
        V = rng.uniform(0, 2, 4)
        got = factored_robust_backup([f0, f1], [0.15, 0.15], V, "tv")
        assert got == pytest.approx(product_grid_tv(f0, f1, V, 0.15), abs=1e-6)


def test_factored_model_plan_runs():
    m = random_factored(np.random.default_rng(15))
    plan = robust_plan(m)
    assert bellman_residual(m, plan.values) <= 1e-9


# linear backup ---------------------------------------------------------------


def test_linear_single_feature_is_single_dual():
    rng = np.random.default_rng(16)
    mu, V = rng.dirichlet(np.ones(4), size=1), rng.uniform(0, 2, 4)
    spec = RobustSpec("kl", 0.2)
    assert linear_robust_backup([1.0], mu, V, spec) == dual_inf(mu[0], V, spec).value


def test_linear_zero_radius_is_nominal():
    rng = np.random.default_rng(17)
    phi, mu, V = rng.dirichlet(np.ones(3)), rng.dirichlet(np.ones(5), size=3), rng.uniform(0, 2, 5)
    assert linear_robust_backup(phi, mu, V, RobustSpec("tv", 0.0)) == pytest.approx(phi @ (mu @ V), abs=1e-15)


def test_linear_matches_per_factor_primal():
    rng = np.random.default_rng(18)
    for _ in range(20):
        phi, mu, V = rng.dirichlet(np.ones(3)), rng.dirichlet(np.ones(5), size=3), rng.uniform(0, 2, 5)
        want = sum(w * tv_primal_inf(m_i, V, 0.1)[0] for w, m_i in zip(phi, mu))
        assert linear_robust_backup(phi, mu, V, RobustSpec("tv", 0.1)) == pytest.approx(want, abs=1e-9)


def test_linear_model_plan_matches_expansion_at_zero_radius():
    from p2mpo.model import linear_to_tabular

    m = random_linear(np.random.default_rng(19), rho=0.0)
    t = linear_to_tabular(m)
    np.testing.assert_allclose(robust_plan(m).values.v, robust_plan(t).values.v, atol=1e-12)


@given(st.integers(0, 10_000), st.floats(0.0, 1.0))
@settings(max_examples=40, deadline=None)
def test_plan_value_dominates_uniform(seed, rho):
    m = random_tabular(np.random.default_rng(seed), H=2, S=3, A=2, rho=rho)
    uni = robust_evaluate(m, Policy.uniform(2, 3, 2)).v
    assert np.all(robust_plan(m).values.v >= uni - 1e-12)
