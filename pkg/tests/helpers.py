"""Independent oracles and instance builders shared by the tests."""

import itertools

import numpy as np
from scipy.optimize import linprog
from scipy.special import rel_entr

from p2mpo import Policy, RobustSpec, TabularRMDP
from p2mpo.model import FactoredRMDP, LinearRMDP


def random_tabular(rng, H=3, S=4, A=2, divergence="tv", rho=0.1, initial_state=0, sparse=False):
    kernels = rng.dirichlet(np.ones(S), size=(H, S, A))
    if sparse:
        kernels = kernels * (rng.uniform(size=kernels.shape) < 0.6)
        kernels[..., 0] += 1e-3
        kernels /= kernels.sum(axis=-1, keepdims=True)
    rewards = rng.uniform(size=(H, S, A))
    return TabularRMDP(kernels, rewards, RobustSpec(divergence, rho), initial_state)


def random_factored(rng, O=2, d=2, A=2, H=2, rho=0.15, divergence="tv", parents=None):
    parents = parents or [[i] for i in range(d)]
    fk = [[rng.dirichlet(np.ones(O), size=(O ** len(pa), A)) for pa in parents] for _ in range(H)]
    rewards = rng.uniform(size=(H, O**d, A))
    return FactoredRMDP(O, parents, fk, rewards, RobustSpec(divergence, rho))


def random_linear(rng, S=5, A=2, d=3, H=3, rho=0.1, divergence="tv"):
    phi = rng.dirichlet(np.ones(d), size=(S, A))
    mu = rng.dirichlet(np.ones(S), size=(H, d))
    theta = rng.uniform(0, 1, size=(H, d))
    return LinearRMDP(phi, mu, theta, RobustSpec(divergence, rho))


def lp_tv_inf(p, v, rho):
    """``min q.v`` s.t. ``0.5 ||q - p||_1 <= rho`` as a linear program in ``(q, t)``."""
    p, v = np.asarray(p, float), np.asarray(v, float)
    m = p.size
    eye = np.eye(m)
    c = np.concatenate([v, np.zeros(m)])
    A_ub = np.block([[eye, -eye], [-eye, -eye], [np.zeros((1, m)), np.ones((1, m))]])
    b_ub = np.concatenate([p, -p, [2 * rho]])
    A_eq = np.concatenate([np.ones(m), np.zeros(m)])[None]
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=[1.0], bounds=[(0, None)] * (2 * m), method="highs",
                  options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10})
    assert res.status == 0
    return float(res.fun)


def kl_grid_inf_2(p, v, rho, step=1e-4):
    """Two-outcome KL oracle on a plain grid."""
    t = np.arange(0, 1 + step / 2, step)
    q = np.stack([t, 1 - t], axis=1)
    div = rel_entr(q, np.asarray(p)[None]).sum(axis=1)
    ok = div <= rho
    return float((q[ok] @ np.asarray(v)).min())


def tv_two_ball_grid(p_hat, v, rho, eps, step=1e-3):
    """Exact composed infimum for 2 outcomes: ``P`` within ``eps`` of ``p_hat`` then ``Q`` within ``rho`` of ``P``."""
    grid = np.arange(0, 1 + step / 2, step)
    best = np.inf
    for x in grid:
        if abs(x - p_hat[0]) > eps + 1e-12:
            continue
        lo, hi = max(0.0, x - rho), min(1.0, x + rho)
        for y in (lo, hi):
            best = min(best, y * v[0] + (1 - y) * v[1])
    return best


def enumerate_policies(H, S, A):
    for acts in itertools.product(range(A), repeat=H * S):
        yield Policy.deterministic(np.array(acts).reshape(H, S), A)


def tv_inner_many(P, v, rho):
    """TV robust expectation for many rows ``P`` at once by the mass-shifting rule."""
    P = np.asarray(P, float)
    v = np.asarray(v, float)
    j = int(np.argmin(v))
    budget = np.minimum(rho, 1.0 - P[:, j])
    value = P @ v
    for i in np.argsort(-v, kind="stable"):
        if v[i] <= v[j]:
            break
        take = np.minimum(P[:, i], budget)
        value -= take * (v[i] - v[j])
        budget -= take
    return value


def two_ball_grid_3(p_hat, v, rho, eps, step=1e-3):
    """Exact composition over a grid of kernels ``P`` with ``0.5 ||P - p_hat||_1 <= eps`` (3 outcomes)."""
    K = int(round(1 / step))
    a, b = np.meshgrid(np.arange(K + 1), np.arange(K + 1), indexing="ij")
    keep = a + b <= K
    P = np.stack([a[keep], b[keep], K - a[keep] - b[keep]], axis=1) / K
    P = P[0.5 * np.abs(P - np.asarray(p_hat)[None]).sum(axis=1) <= eps + 1e-12]
    return float(tv_inner_many(P, v, rho).min())


def kl_primal_conic(p, v, rho):
    """``min q.v`` s.t. ``KL(q || p) <= rho`` as an exponential-cone program (no duality on our side)."""
    import cvxpy as cp

    p, v = np.asarray(p, float), np.asarray(v, float)
    keep = p > 0
    ps, vs = p[keep], v[keep]
    q = cp.Variable(ps.size, nonneg=True)
    prob = cp.Problem(cp.Minimize(vs @ q), [cp.sum(q) == 1, cp.sum(cp.rel_entr(q, ps)) <= rho])
    prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-10, tol_gap_rel=1e-10, tol_feas=1e-10)
    return float(prob.value)
