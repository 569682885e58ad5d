"""Doubly pessimistic evaluation and policy optimisation.

Two infima are stacked in every backup: one over kernels ``P`` inside the
data confidence region (a half-L1 ball of radius ``eps`` around the
estimate, per state-action pair) and one over the robust set around ``P``.

* TV: the two balls merge into one of radius ``min(1, rho + eps)`` by the
  triangle inequality. This can only be more pessimistic than the exact
  composition and coincides with it away from the simplex boundary.
* KL: for a fixed dual multiplier the inner minimisation over ``P`` is linear
  in ``P`` and is solved by moving ``eps`` mass from the largest values of
  ``v`` onto its global minimiser. That move does not depend on the
  multiplier, so the outer dual is maximised once on the shifted
  distribution.
"""

from dataclasses import dataclass, field

import numpy as np

from ._validation import InvariantError, check_distribution
from .data import coverage_coefficient, generate
from .dp import PlanResult, backward_induction, robust_plan, robust_evaluate, _map_pairs
from .duals import kl_dual_inf, tv_dual_inf, tv_primal_inf
from .estimation import confidence_region
from .model import Divergence, Policy

TV_BALL_MERGE = "tv_ball_merge"
KL_INNER_SHIFT = "kl_inner_shift"


def composition_for(spec):
    return TV_BALL_MERGE if spec.divergence is Divergence.TV else KL_INNER_SHIFT


def doubly_pessimistic_backup(p_hat, eps, v, spec):
    """``inf`` of ``E[v]`` over the robust sets of every kernel row within
    half-L1 distance ``eps`` of ``p_hat``."""
    p_hat = check_distribution(p_hat, "p_hat", atol=1e-9)
    eps = float(eps)
    if not 0.0 <= eps <= 1.0:
        raise InvariantError(f"eps must lie in [0, 1], got {eps!r}")
    if spec.nominal_only or spec.rho == 0:
        return tv_primal_inf(p_hat, v, eps)[0]
    if spec.divergence is Divergence.TV:
        return tv_dual_inf(p_hat, v, min(1.0, spec.rho + eps)).value
    _, shifted = tv_primal_inf(p_hat, v, eps)
    return kl_dual_inf(shifted, v, spec.rho, spec.lambda_floor).value


def _expectation(region, robust, n_jobs=None):
    S, A = region.num_states, region.num_actions

    def expect(h, v_next):
        def one(s, a):
            return doubly_pessimistic_backup(region.center[h, s, a], region.per_sa_radius[h, s, a], v_next, robust)

        return _map_pairs(one, S, A, n_jobs)

    return expect


def _check_shapes(rewards, region):
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.shape != region.center.shape[:3]:
        raise InvariantError(f"rewards shape {rewards.shape} does not match region {region.center.shape[:3]}")
    return rewards


def doubly_pessimistic_evaluate(rewards, region, robust, pi, n_jobs=None):
    """Pessimistic value table of ``pi``; ``values.v[0, s1]`` is its doubly pessimistic score."""
    rewards = _check_shapes(rewards, region)
    if pi.probs.shape != rewards.shape:
        raise InvariantError("policy shape does not match the region")
    values, _ = backward_induction(rewards, _expectation(region, robust, n_jobs), pi)
    return values


def optimize(rewards, region, robust, n_jobs=None):
    """Greedy deterministic maximiser of the doubly pessimistic value."""
    rewards = _check_shapes(rewards, region)
    values, actions = backward_induction(rewards, _expectation(region, robust, n_jobs))
    return PlanResult(Policy.deterministic(actions, rewards.shape[2]), values)


def baseline_policy(method, data, rewards, robust, delta=0.1, constants=None, region=None):
    """Policy of one learner on ``data``.

    ``p2mpo`` uses both pessimism sources, ``mle_greedy`` drops the data
    radii (robust planning on the estimate), ``single_pessimism`` drops the
    robust set.
    """
    constants = dict(constants or {})
    if region is None:
        region = confidence_region(data, delta, **constants)
    if method == "p2mpo":
        return optimize(rewards, region, robust).policy
    if method == "mle_greedy":
        return optimize(rewards, region.scaled(0.0), robust).policy
    if method == "single_pessimism":
        return optimize(rewards, region, robust.with_rho(0.0)).policy
    raise InvariantError(f"unknown method {method!r}")


@dataclass(frozen=True, eq=False)
class RunResult:
    policy: Policy
    subopt: float
    values: object
    diagnostics: dict = field(default_factory=dict)


def run_p2mpo(model, pi_b, n, delta=0.1, seed=0, constants=None, plan=None, coverage=False):
    """Generate data, build the region, optimise and score against the true robust optimum."""
    constants = dict(constants or {})
    data = generate(model, pi_b, n, seed)
    region = confidence_region(data, delta, **constants)
    result = optimize(model.rewards, region, model.robust)
    plan = robust_plan(model) if plan is None else plan
    s1 = model.initial_state
    achieved = robust_evaluate(model, result.policy).v[0, s1]
    diagnostics = {
        "truth_in_region": region.contains(model.kernels),
        "truth_in_rectangular_region": region.rectangular_contains(model.kernels),
        "rectangular_region_sound": region.rectangular_is_sound(),
        "pessimistic_value": float(result.values.v[0, s1]),
        "robust_value": float(achieved),
    }
    if coverage:
        diagnostics["coverage"] = coverage_coefficient(model, pi_b, plan.policy)
    return RunResult(result.policy, float(plan.values.v[0, s1] - achieved), result.values, diagnostics)
