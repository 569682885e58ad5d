"""Model estimation: empirical/MLE kernels and their confidence regions.

Tabular and factored regions keep two descriptions of the same uncertainty:

* the exact dataset-averaged constraint
  ``(1/n) sum_tau ||P_hat - P||_1^2 (s_h^tau, a_h^tau) <= xi``, used for
  membership tests, and
* per-pair half-L1 radii ``eps_h(s, a)`` from a count-based deviation bound,
  used by the planner, which needs a rectangular set.

The linear region is the test-function form: a candidate factor measure is
accepted when its predictions of ``E[v(s')]`` stay within ``xi`` (in mean
square over the data) of the ridge regression fit, for every ``v`` in a
finite class.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from ._validation import InvariantError
from .model import Divergence, FactoredRMDP, context_index, decode_state


def transition_counts(data):
    """``N[h, s, a, s']`` from an offline dataset."""
    H, S, A = data.horizon, data.num_states, data.num_actions
    counts = np.zeros((H, S, A, S))
    for h in range(H):
        np.add.at(counts[h], (data.states[h], data.actions[h], data.next_states[h]), 1.0)
    return counts


def normalize_counts(counts):
    """Row-normalize counts; rows with no data become uniform."""
    totals = counts.sum(axis=-1, keepdims=True)
    uniform = np.full_like(counts, 1.0 / counts.shape[-1])
    return np.where(totals > 0, counts / np.maximum(totals, 1.0), uniform)


def empirical_estimate(data):
    """Empirical kernel ``count(s,a,s') / count(s,a)`` with uniform rows where unvisited.

    Returns ``(kernels, pair_counts)`` with shapes ``(H, S, A, S)`` and ``(H, S, A)``.
    """
    counts = transition_counts(data)
    return normalize_counts(counts), counts.sum(axis=-1)


def xi_schedule(n, delta, num_states, num_actions, horizon, C1=1.0, C2=1.0):
    """Global budget ``C1 * (2 S^2 A log n + log(C2 H / delta)) / n``."""
    if n < 2:
        raise InvariantError("xi schedule needs n >= 2")
    S, A = num_states, num_actions
    return C1 * (2 * S * S * A * math.log(n) + math.log(C2 * horizon / delta)) / n


def factored_xi_schedule(n, delta, num_outcomes, num_parents, num_actions, num_factors, horizon, C1=1.0, C2=1.0):
    """Per-factor budget ``C1 |O|^{1+|pa|} |A| log(C2 n d H / delta) / n``."""
    if n < 2:
        raise InvariantError("xi schedule needs n >= 2")
    return (
        C1 * num_outcomes ** (1 + num_parents) * num_actions
        * math.log(C2 * n * num_factors * horizon / delta) / n
    )


def deviation_log_term(n, delta, num_outcomes, num_contexts, horizon, num_factors=1):
    return num_outcomes * math.log(max(n, 2)) + math.log(2 * horizon * num_factors * num_contexts / delta)


def pair_radii(pair_counts, log_term, c_dec=2.0):
    """Half-L1 radii ``min(1, sqrt(c_dec * log_term / max(1, N)))``; unvisited pairs get 1."""
    pair_counts = np.asarray(pair_counts, dtype=np.float64)
    eps = np.minimum(1.0, np.sqrt(c_dec * log_term / np.maximum(1.0, pair_counts)))
    return np.where(pair_counts > 0, eps, 1.0)


def calibrated_c_dec(n, delta, num_states, num_actions, horizon, C1=1.0, C2=1.0):
    """Largest ``c_dec`` for which every kernel inside the per-pair radii
    passes the exact averaged membership test, whatever the counts.

    The worst case over the rectangular set contributes at most
    ``(N/n) * 4 c_dec L / N`` per visited pair, so the bound is
    ``xi * n / (4 S A L)``.
    """
    xi = xi_schedule(n, delta, num_states, num_actions, horizon, C1, C2)
    L = deviation_log_term(n, delta, num_states, num_states * num_actions, horizon)
    return xi * n / (4.0 * num_states * num_actions * L)


@dataclass(frozen=True, eq=False)
class ConfidenceRegion:
    center: np.ndarray
    xi: np.ndarray
    per_sa_radius: np.ndarray
    counts: np.ndarray
    n: int
    delta: float = 0.1
    kind: str = "tabular"
    constants: dict = field(default_factory=dict)

    def __post_init__(self):
        eps = np.asarray(self.per_sa_radius)
        if np.any(eps < 0) or np.any(eps > 1):
            raise InvariantError("per-pair radii must lie in [0, 1]")
        if np.any(np.asarray(self.xi) <= 0):
            raise InvariantError("xi must be positive")

    @property
    def horizon(self):
        return self.center.shape[0]

    @property
    def num_states(self):
        return self.center.shape[1]

    @property
    def num_actions(self):
        return self.center.shape[2]

    def statistic(self, kernels):
        """Per-step ``(1/n) sum_tau ||P_hat - P||_1^2`` at the observed pairs."""
        l1 = np.abs(np.asarray(kernels) - self.center).sum(axis=-1)
        return (self.counts * l1**2).sum(axis=(1, 2)) / self.n

    def contains(self, kernels):
        """Exact averaged membership test, all steps at once."""
        return bool(np.all(self.statistic(kernels) <= self.xi))

    def rectangular_contains(self, kernels, atol=1e-12):
        """Whether every row lies inside its per-pair half-L1 radius."""
        half_l1 = 0.5 * np.abs(np.asarray(kernels) - self.center).sum(axis=-1)
        return bool(np.all(half_l1 <= self.per_sa_radius + atol))

    def worst_rectangular_statistic(self):
        """Largest exact-test statistic over kernels inside the per-pair radii."""
        l1 = np.minimum(2.0, 2.0 * self.per_sa_radius)
        return (self.counts * l1**2).sum(axis=(1, 2)) / self.n

    def rectangular_is_sound(self, rtol=1e-12):
        """Whether the per-pair radii describe a subset of the exact region.

        A calibrated ``c_dec`` makes the bound tight, hence the relative slack
        for rounding.
        """
        return bool(np.all(self.worst_rectangular_statistic() <= self.xi * (1.0 + rtol)))

    def scaled(self, factor):
        """Copy with every per-pair radius multiplied by ``factor`` (capped at 1)."""
        eps = np.minimum(1.0, self.per_sa_radius * factor)
        return ConfidenceRegion(self.center, self.xi, eps, self.counts, self.n, self.delta, self.kind, self.constants)

    def to_dict(self):
        H, S, A = self.horizon, self.num_states, self.num_actions
        return {
            "kind": self.kind,
            "num_states": S,
            "num_actions": A,
            "horizon": H,
            "n": self.n,
            "delta": self.delta,
            "constants": dict(self.constants),
            "center": self.center.reshape(H, S * A, S).tolist(),
            "xi": np.asarray(self.xi).tolist(),
            "per_sa_radius": self.per_sa_radius.reshape(H, S * A).tolist(),
            "counts": self.counts.reshape(H, S * A).tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        H, S, A = d["horizon"], d["num_states"], d["num_actions"]
        return cls(
            np.asarray(d["center"]).reshape(H, S, A, S),
            np.asarray(d["xi"], dtype=np.float64),
            np.asarray(d["per_sa_radius"]).reshape(H, S, A),
            np.asarray(d["counts"]).reshape(H, S, A),
            int(d["n"]),
            d.get("delta", 0.1),
            d.get("kind", "tabular"),
            d.get("constants", {}),
        )


def confidence_region(data, delta=0.1, C1=1.0, C2=1.0, c_dec=2.0):
    """Tabular confidence region around the empirical kernel."""
    center, counts = empirical_estimate(data)
    H, S, A = counts.shape
    n = data.n
    xi = xi_schedule(max(n, 2), delta, S, A, H, C1, C2)
    L = deviation_log_term(n, delta, S, S * A, H)
    eps = pair_radii(counts, L, c_dec)
    return ConfidenceRegion(
        center, np.full(H, xi), eps, counts, n, delta, "tabular", {"C1": C1, "C2": C2, "c_dec": c_dec}
    )


# factored ---------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FactoredConfidenceRegion:
    """Per-factor regions; ``centers[h][i]`` has shape ``(|O|^{|pa_i|}, A, |O|)``."""

    num_outcomes: int
    parents: tuple
    centers: tuple
    counts: tuple
    xi: np.ndarray
    radii: tuple
    n: int

    def statistic(self, factor_kernels):
        """``stat[h, i] = (1/n) sum_tau ||P_i - P_hat_i||_1^2`` at the observed contexts."""
        H, d = len(self.centers), len(self.parents)
        out = np.zeros((H, d))
        for h in range(H):
            for i in range(d):
                l1 = np.abs(np.asarray(factor_kernels[h][i]) - self.centers[h][i]).sum(axis=-1)
                out[h, i] = (self.counts[h][i] * l1**2).sum() / self.n
        return out

    def contains(self, factor_kernels):
        return bool(np.all(self.statistic(factor_kernels) <= self.xi[None, :]))


def factored_confidence_region(data, num_outcomes, parents, delta=0.1, C1=1.0, C2=1.0, c_dec=2.0):
    """Per-factor empirical estimates with per-factor budgets and per-context radii."""
    O = int(num_outcomes)
    parents = tuple(tuple(pa) for pa in parents)
    d = len(parents)
    H, A, n = data.horizon, data.num_actions, data.n
    if data.num_states != O**d:
        raise InvariantError(f"dataset has {data.num_states} states, expected |O|^d = {O**d}")
    outcomes = np.array([decode_state(s, O, d) for s in range(O**d)])
    centers, counts, radii = [], [], []
    for h in range(H):
        cur = outcomes[data.states[h]]
        nxt = outcomes[data.next_states[h]]
        c_row, n_row, r_row = [], [], []
        for i, pa in enumerate(parents):
            ctx = np.zeros(n, dtype=np.int64)
            for k, j in enumerate(pa):
                ctx += cur[:, j] * O**k
            C = O ** len(pa)
            cnt = np.zeros((C, A, O))
            np.add.at(cnt, (ctx, data.actions[h], nxt[:, i]), 1.0)
            pair = cnt.sum(axis=-1)
            L = deviation_log_term(n, delta, O, C * A, H, d)
            c_row.append(normalize_counts(cnt))
            n_row.append(pair)
            r_row.append(pair_radii(pair, L, c_dec))
        centers.append(tuple(c_row))
        counts.append(tuple(n_row))
        radii.append(tuple(r_row))
    xi = np.array(
        [factored_xi_schedule(max(n, 2), delta, O, len(pa), A, d, H, C1, C2) for pa in parents]
    )
    return FactoredConfidenceRegion(O, parents, tuple(centers), tuple(counts), xi, tuple(radii), n)


def factored_model_kernels(m: FactoredRMDP):
    return [[np.asarray(k) for k in step] for step in m.factor_kernels]


# linear -----------------------------------------------------------------------


def ridge_estimate(phi, targets, alpha=1.0):
    """Ridge coefficients ``Lambda^{-1} (1/n) sum phi_tau y_tau`` with
    ``Lambda = (1/n) sum phi phi^T + (alpha/n) I``.

    ``targets`` may be ``(n,)`` or ``(n, k)`` for ``k`` test functions at once.
    """
    phi = np.asarray(phi, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if phi.ndim != 2 or targets.shape[0] != phi.shape[0]:
        raise InvariantError("phi must be (n, d) and targets must have n rows")
    if not alpha > 0:
        raise InvariantError("alpha must be positive")
    n, d = phi.shape
    lam = phi.T @ phi / n + (alpha / n) * np.eye(d)
    return np.linalg.solve(lam, phi.T @ targets / n)


def regularized_covariance(phi, alpha=1.0):
    phi = np.asarray(phi, dtype=np.float64)
    n, d = phi.shape
    return phi.T @ phi / n + (alpha / n) * np.eye(d)


def ridge_measure(phi, next_states, num_states, alpha=1.0):
    """Coefficients of the weighted Dirac-mixture estimate, shape ``(d, S)``.

    ``phi(s,a)^T`` times this matrix reproduces ``phi(s,a)^T theta_v`` for
    every test function ``v`` when contracted with ``v``.
    """
    onehot = np.zeros((len(next_states), num_states))
    onehot[np.arange(len(next_states)), next_states] = 1.0
    return ridge_estimate(phi, onehot, alpha)


def linear_xi_schedule(n, feature_dim, horizon, delta, divergence, rho=None, lambda_floor=None, C1=1.0, C2=1.0, C3=1.0):
    d, H = feature_dim, horizon
    if Divergence(divergence) is Divergence.TV:
        return C1 * d * d * H * H * math.log(C2 * n * d * H / delta) / n
    return C1 * d * d * (
        math.log(1 + C2 * n * H / delta) + math.log(1 + C3 * n * d * H / (rho * lambda_floor**2))
    ) / n


def make_v_class(features, horizon, divergence, rho=None, lambda_floor=1e-6, n_w=64, n_lambda=16, seed=0):
    """Finite test-function family, shape ``(n_w * n_lambda, S)``.

    ``w`` is drawn uniformly from the nonnegative part of the ball of radius
    ``H sqrt(d)``, so ``max_a phi^T w`` plays the role of a nonnegative
    Q-function. TV functions are ``(lam - max_a phi^T w)_+`` with ``lam`` on a
    grid over ``[0, H]``; KL functions are ``exp(-max_a phi^T w / lam)`` with
    ``lam`` on a log grid over ``[lambda_floor, H / rho]``.
    """
    features = np.asarray(features, dtype=np.float64)
    S, A, d = features.shape
    rng = np.random.default_rng(seed)
    dirs = np.abs(rng.standard_normal((n_w, d)))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radius = horizon * math.sqrt(d) * rng.uniform(size=n_w) ** (1.0 / d)
    w = dirs * radius[:, None]
    qmax = np.einsum("sad,kd->ksa", features, w).max(axis=-1)  # (n_w, S)
    if Divergence(divergence) is Divergence.TV:
        lams = np.linspace(0.0, horizon, n_lambda)
        v = np.maximum(lams[:, None, None] - qmax[None], 0.0)
    else:
        lams = np.geomspace(lambda_floor, horizon / rho, n_lambda)
        v = np.exp(-qmax[None] / lams[:, None, None])
    return v.reshape(-1, S)


def linear_statistic(candidate_mu, phi, next_states, v_class, alpha=1.0):
    """``max_v (1/n) sum_tau (phi_tau^T mu v - phi_tau^T theta_hat_v)^2`` for one step."""
    phi = np.asarray(phi, dtype=np.float64)
    mu_hat = ridge_measure(phi, next_states, np.asarray(v_class).shape[1], alpha)
    diff = phi @ ((np.asarray(candidate_mu) - mu_hat) @ np.asarray(v_class).T)  # (n, K)
    return float((diff**2).mean(axis=0).max())


def linear_confidence_check(candidate_mu, data, features, v_class, xi, alpha=1.0, return_stats=False):
    """Whether ``candidate_mu`` (shape ``(H, d, S)``) passes the test-function
    confidence check at every step."""
    features = np.asarray(features, dtype=np.float64)
    candidate_mu = np.asarray(candidate_mu, dtype=np.float64)
    if candidate_mu.shape[0] != data.horizon:
        raise InvariantError("candidate must have one factor-measure matrix per step")
    stats = np.array([
        linear_statistic(candidate_mu[h], features[data.states[h], data.actions[h]], data.next_states[h], v_class, alpha)
        for h in range(data.horizon)
    ])
    ok = bool(np.all(stats <= xi))
    return (ok, stats) if return_stats else ok


@dataclass(frozen=True, eq=False)
class LinearConfidenceRegion:
    covariance: np.ndarray  # (H, d, d)
    empirical_measure: np.ndarray  # (H, d, S)
    alpha: float
    xi: float
    v_class: np.ndarray

    def __post_init__(self):
        if not self.alpha > 0:
            raise InvariantError("alpha must be positive")
        for lam in self.covariance:
            if np.linalg.eigvalsh(lam).min() <= 0:
                raise InvariantError("regularized covariance is not positive definite")


def linear_confidence_region(data, features, xi, v_class, alpha=1.0):
    features = np.asarray(features, dtype=np.float64)
    covs, measures = [], []
    for h in range(data.horizon):
        phi = features[data.states[h], data.actions[h]]
        covs.append(regularized_covariance(phi, alpha))
        measures.append(ridge_measure(phi, data.next_states[h], data.num_states, alpha))
    return LinearConfidenceRegion(np.array(covs), np.array(measures), alpha, xi, np.asarray(v_class))
