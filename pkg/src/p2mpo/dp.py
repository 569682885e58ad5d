"""Robust policy evaluation and planning by backward induction.

All three model families share one backward pass; they differ only in how
the one-step robust expectation ``inf_{q in Phi(P_h(.|s,a))} E_q[V_{h+1}]``
is computed:

* tabular models call the KL/TV dual directly on each kernel row;
* factored models run coordinate descent over the per-factor balls;
* linear models with d-rectangular balls decouple across feature factors,
  so one dual per factor measure and step is enough.
"""

from dataclasses import dataclass

import numpy as np
from joblib import Parallel, delayed

from ._validation import InvariantError, check_distribution
from .duals import dual_inf, kl_worst_q, tv_primal_inf, divergence
from .model import (
    Divergence,
    FactoredRMDP,
    LinearRMDP,
    Policy,
    RobustSpec,
    TabularRMDP,
    ValueTable,
)


@dataclass(frozen=True, eq=False)
class PlanResult:
    policy: Policy
    values: ValueTable
    worst_kernels: np.ndarray = None

    def to_dict(self):
        return {
            "policy": self.policy.to_dict(),
            "values": self.values.to_dict(),
            "worst_kernels": None if self.worst_kernels is None else self.worst_kernels.tolist(),
        }


def backward_induction(rewards, expect, policy=None):
    """Generic finite-horizon backward pass.

    ``expect(h, v_next)`` returns the ``(S, A)`` array of (robust)
    continuation values at step ``h``. With ``policy=None`` the pass is greedy
    with ties broken towards the lowest action index. Values are floored at 0.
    Returns ``(ValueTable, actions)`` where ``actions`` is ``None`` when a
    policy was given.
    """
    H, S, A = rewards.shape
    v = np.zeros((H + 1, S))
    q = np.zeros((H, S, A))
    actions = None if policy is not None else np.zeros((H, S), dtype=np.int64)
    for h in range(H - 1, -1, -1):
        q[h] = np.clip(rewards[h] + expect(h, v[h + 1]), 0.0, H - h)
        if policy is None:
            actions[h] = np.argmax(q[h], axis=1)
            v[h] = q[h][np.arange(S), actions[h]]
        else:
            v[h] = np.clip(np.einsum("sa,sa->s", policy.probs[h], q[h]), 0.0, H - h)
    return ValueTable(v, q), actions


def _check_policy(m, pi):
    if pi.probs.shape != (m.horizon, m.num_states, m.num_actions):
        raise InvariantError(
            f"policy shape {pi.probs.shape} does not match model {(m.horizon, m.num_states, m.num_actions)}"
        )


def _map_pairs(fn, S, A, n_jobs):
    pairs = [(s, a) for s in range(S) for a in range(A)]
    if n_jobs in (None, 1):
        out = [fn(s, a) for s, a in pairs]
    else:
        out = Parallel(n_jobs=n_jobs)(delayed(fn)(s, a) for s, a in pairs)
    return np.asarray(out, dtype=np.float64).reshape(S, A)


def tabular_expectation(m, n_jobs=None):
    H = m.horizon

    def expect(h, v_next):
        def one(s, a):
            return dual_inf(m.kernels[h, s, a], v_next, m.robust, value_cap=H - h - 1).value

        return _map_pairs(one, m.num_states, m.num_actions, n_jobs)

    return expect


def linear_expectation(m):
    rho = m.robust.rho

    def expect(h, v_next):
        per_factor = np.array(
            [dual_inf(mu_i, v_next, m.robust, rho=rho).value for mu_i in m.factor_measures[h]]
        )
        return m.features @ per_factor

    return expect


def factored_expectation(m, restarts=8, seed=0, n_jobs=None):
    radii = [m.robust.factor_rho(i) for i in range(m.num_factors)]

    def expect(h, v_next):
        def one(s, a):
            return factored_robust_backup(
                m.factor_rows(h, s, a), radii, v_next, m.robust.divergence,
                restarts=restarts, seed=(seed, h, s, a), lambda_floor=m.robust.lambda_floor,
            )

        return _map_pairs(one, m.num_states, m.num_actions, n_jobs)

    return expect


def _expectation(m, n_jobs=None, restarts=8, seed=0):
    if isinstance(m, TabularRMDP):
        return tabular_expectation(m, n_jobs)
    if isinstance(m, LinearRMDP):
        return linear_expectation(m)
    if isinstance(m, FactoredRMDP):
        return factored_expectation(m, restarts, seed, n_jobs)
    raise TypeError(f"unsupported model type {type(m).__name__}")


def robust_evaluate(m, pi, n_jobs=None, **kw):
    """Robust value table of ``pi``: worst-case return over the robust set."""
    _check_policy(m, pi)
    values, _ = backward_induction(m.rewards, _expectation(m, n_jobs, **kw), pi)
    return values


def robust_plan(m, n_jobs=None, **kw):
    """Robust-optimal deterministic policy by greedy backward induction.

    For TV tabular models the result also carries the worst-case kernels of
    the returned policy.
    """
    values, actions = backward_induction(m.rewards, _expectation(m, n_jobs, **kw))
    policy = Policy.deterministic(actions, m.num_actions)
    worst = None
    if isinstance(m, TabularRMDP) and m.robust.divergence is Divergence.TV:
        worst = worst_case_kernels(m, values)
    return PlanResult(policy, values, worst)


def worst_case_kernels(m, values):
    """Per-step TV worst-case kernels against ``values.v``.

    Running a standard (non-robust) evaluation under these kernels reproduces
    the robust values exactly.
    """
    if m.robust.divergence is not Divergence.TV:
        raise InvariantError("worst-case kernel extraction is only available for TV balls")
    H, S, A = m.horizon, m.num_states, m.num_actions
    out = np.empty((H, S, A, S))
    rho = min(m.robust.rho, 1.0)
    for h in range(H):
        for s in range(S):
            for a in range(A):
                _, out[h, s, a] = tv_primal_inf(m.kernels[h, s, a], values.v[h + 1], rho)
    return out


def nominal_evaluate(kernels, rewards, pi):
    """Standard policy evaluation under fixed kernels."""
    kernels = np.asarray(kernels)
    values, _ = backward_induction(np.asarray(rewards), lambda h, v: kernels[h] @ v, pi)
    return values


def nominal_plan(kernels, rewards):
    kernels = np.asarray(kernels)
    rewards = np.asarray(rewards)
    values, actions = backward_induction(rewards, lambda h, v: kernels[h] @ v)
    return PlanResult(Policy.deterministic(actions, rewards.shape[2]), values)


def bellman_residual(m, values, n_jobs=None):
    """Largest ``|Q_h - R_h - inf E[V_{h+1}]|`` over all steps and pairs."""
    expect = _expectation(m, n_jobs)
    worst = 0.0
    for h in range(m.horizon):
        q = m.rewards[h] + expect(h, values.v[h + 1])
        worst = max(worst, float(np.abs(values.q[h] - q).max()))
    return worst


def suboptimality(m, pi_hat, plan=None):
    """Robust value gap at the initial state between the optimal policy and ``pi_hat``."""
    plan = robust_plan(m) if plan is None else plan
    s1 = m.initial_state
    return float(plan.values.v[0, s1] - robust_evaluate(m, pi_hat).v[0, s1])


# factored and linear backups ----------------------------------------------


def _tensor(V, O, d):
    return np.asarray(V, dtype=np.float64).reshape((O,) * d, order="F")


def _marginal(T, qs, j):
    """Contract tensor ``T`` with every ``qs[i]`` except factor ``j``."""
    out = T
    for i in range(len(qs) - 1, -1, -1):
        if i != j:
            out = np.tensordot(out, qs[i], axes=([i], [0]))
    return out


def _product_value(T, qs):
    out = T
    for i in range(len(qs) - 1, -1, -1):
        out = np.tensordot(out, qs[i], axes=([i], [0]))
    return float(out)


def _single_factor_min(p, u, rho, kind, lambda_floor):
    if kind is Divergence.TV:
        return tv_primal_inf(p, u, min(rho, 1.0))[1]
    return kl_worst_q(p, u, rho, lambda_floor)[1]


def _random_in_ball(p, rho, kind, rng):
    """A random point of the ball: move a random fraction towards a Dirichlet draw."""
    r = rng.dirichlet(np.ones(p.size))
    if kind is Divergence.TV:
        dist = divergence(r, p, kind)
        tmax = 1.0 if dist <= rho else rho / dist
    else:
        lo, hi = 0.0, 1.0
        if divergence(r, p, kind) > rho:
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                if divergence(p + mid * (r - p), p, kind) <= rho:
                    lo = mid
                else:
                    hi = mid
            tmax = lo
        else:
            tmax = 1.0
    q = p + rng.uniform(0.0, tmax) * (r - p)
    return q / q.sum()


def factored_robust_backup(
    factors, radii, V, kind, restarts=8, seed=0, tol=1e-8, max_sweeps=500, lambda_floor=1e-6
):
    """Worst-case expectation of ``V`` over a product of per-factor balls.

    ``factors[i]`` is the nominal next-outcome distribution of factor ``i``
    and ``V`` is indexed by the mixed-radix encoding of ``O^d``. Holding all
    but one factor fixed, the problem is a single-ball robust expectation of
    the marginalised value, solved exactly; coordinate sweeps repeat until the
    relative change drops below ``tol``. The best of the nominal start and
    ``restarts`` random feasible starts is returned, which upper-bounds the
    exact infimum.
    """
    kind = Divergence(kind)
    factors = [check_distribution(f, f"factors[{i}]", atol=1e-9) for i, f in enumerate(factors)]
    d = len(factors)
    if len(radii) != d:
        raise InvariantError("need one radius per factor")
    O = factors[0].size
    if any(f.size != O for f in factors):
        raise InvariantError("all factors must share the outcome set")
    V = np.asarray(V, dtype=np.float64)
    if V.size != O**d:
        raise InvariantError(f"V has {V.size} entries, expected |O|^d = {O**d}")
    if d == 1:
        return dual_inf(factors[0], V, RobustSpec(kind, radii[0], lambda_floor)).value
    if np.all(V == V.flat[0]):
        return float(V.flat[0])
    T = _tensor(V, O, d)
    rng = np.random.default_rng(np.random.SeedSequence(list(np.atleast_1d(seed))))
    best = np.inf
    for r in range(restarts + 1):
        if r == 0:
            qs = [f.copy() for f in factors]
        else:
            qs = [_random_in_ball(f, rho, kind, rng) for f, rho in zip(factors, radii)]
        val = _product_value(T, qs)
        for _ in range(max_sweeps):
            prev = val
            for j in range(d):
                qs[j] = _single_factor_min(factors[j], _marginal(T, qs, j), radii[j], kind, lambda_floor)
            val = _product_value(T, qs)
            if abs(prev - val) <= tol * max(1.0, abs(val)):
                break
        best = min(best, val)
    return float(best)


def linear_robust_backup(phi_sa, mu, V, spec):
    """d-rectangular robust expectation ``sum_i phi_i * inf_{D(q||mu_i)<=rho} E_q[V]``.

    Exact: the balls act on each factor measure separately and the feature
    weights are nonnegative, so the infimum splits factor by factor.
    """
    phi_sa = check_distribution(phi_sa, "phi_sa", atol=1e-10)
    mu = np.asarray(mu, dtype=np.float64)
    if mu.shape[0] != phi_sa.size:
        raise InvariantError("need one factor measure per feature")
    return float(sum(w * dual_inf(mu_i, V, spec).value for w, mu_i in zip(phi_sa, mu)))
