"""Robust MDP model types, policies, value tables and their JSON serialization.

Indices are 0-based throughout, so step ``h`` in ``range(H)`` is the
``(h + 1)``-th decision step. Value tables carry ``H + 1`` rows with the
terminal row fixed at 0.

Kernel arrays are stored as ``(H, S, A, S)`` and rewards as ``(H, S, A)``. The
JSON files flatten the ``(s, a)`` pair into a single row index ``s * A + a``.
Factored states use a mixed-radix encoding with factor 0 least significant.
"""

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from ._validation import (
    InvariantError,
    check_index,
    check_stochastic_rows,
    check_unit_interval,
    frozen,
)

VALUE_ATOL = 1e-9


class Divergence(str, Enum):
    KL = "kl"
    TV = "tv"


@dataclass(frozen=True)
class RobustSpec:
    """Ambiguity-set description.

    ``rho`` is a KL radius or a half-L1 (total variation) radius. For TV the
    radius is capped at 1, where the ball covers the whole simplex.
    ``nominal_only`` marks specs produced by model conversions that drop the
    original robust structure; such specs always carry ``rho = 0``.
    """

    divergence: Divergence = Divergence.TV
    rho: float = 0.0
    lambda_floor: float = 1e-6
    per_factor_rho: tuple = None
    nominal_only: bool = False

    def __post_init__(self):
        object.__setattr__(self, "divergence", Divergence(self.divergence))
        object.__setattr__(self, "rho", float(self.rho))
        object.__setattr__(self, "lambda_floor", float(self.lambda_floor))
        if self.per_factor_rho is not None:
            object.__setattr__(
                self, "per_factor_rho", tuple(float(r) for r in self.per_factor_rho)
            )
        radii = [self.rho] + list(self.per_factor_rho or ())
        for r in radii:
            if not np.isfinite(r) or r < 0:
                raise InvariantError(f"robust radius must be nonnegative, got {r!r}")
            if self.divergence is Divergence.TV and r > 1:
                raise InvariantError(f"TV radius must be at most 1, got {r!r}")
        if self.divergence is Divergence.KL and not self.lambda_floor > 0:
            raise InvariantError("lambda_floor must be positive for KL")
        if self.nominal_only and self.rho != 0:
            raise InvariantError("nominal-only specs must have rho = 0")

    def with_rho(self, rho):
        return RobustSpec(self.divergence, rho, self.lambda_floor, self.per_factor_rho)

    def factor_rho(self, i):
        if self.per_factor_rho is None:
            return self.rho
        return self.per_factor_rho[i]

    def to_dict(self):
        out = {"divergence": self.divergence.value, "rho": self.rho}
        if self.divergence is Divergence.KL:
            out["lambda_floor"] = self.lambda_floor
        if self.per_factor_rho is not None:
            out["per_factor_rho"] = list(self.per_factor_rho)
        if self.nominal_only:
            out["nominal_only"] = True
        return out

    @classmethod
    def from_dict(cls, d):
        return cls(
            divergence=d.get("divergence", "tv").lower(),
            rho=d.get("rho", 0.0),
            lambda_floor=d.get("lambda_floor", 1e-6),
            per_factor_rho=d.get("per_factor_rho"),
            nominal_only=d.get("nominal_only", False),
        )


@dataclass(frozen=True, eq=False)
class TabularRMDP:
    kernels: np.ndarray
    rewards: np.ndarray
    robust: RobustSpec = field(default_factory=RobustSpec)
    initial_state: int = 0

    def __post_init__(self):
        kernels = np.asarray(self.kernels, dtype=np.float64)
        if kernels.ndim != 4 or kernels.shape[1] != kernels.shape[3]:
            raise InvariantError(f"kernels must have shape (H, S, A, S), got {kernels.shape}")
        H, S, A, _ = kernels.shape
        if H < 1 or S < 1 or A < 1:
            raise InvariantError("horizon, num_states and num_actions must be positive")
        check_stochastic_rows(kernels, "kernels")
        rewards = np.asarray(self.rewards, dtype=np.float64)
        if rewards.shape != (H, S, A):
            raise InvariantError(f"rewards must have shape {(H, S, A)}, got {rewards.shape}")
        check_unit_interval(rewards, "rewards")
        object.__setattr__(self, "kernels", frozen(kernels))
        object.__setattr__(self, "rewards", frozen(rewards))
        object.__setattr__(self, "initial_state", check_index(self.initial_state, S, "initial_state"))
        if not isinstance(self.robust, RobustSpec):
            object.__setattr__(self, "robust", RobustSpec.from_dict(self.robust))

    @property
    def horizon(self):
        return self.kernels.shape[0]

    @property
    def num_states(self):
        return self.kernels.shape[1]

    @property
    def num_actions(self):
        return self.kernels.shape[2]

    @property
    def dims(self):
        return ModelDims(self.num_states, self.num_actions, self.horizon, self.initial_state)

    def with_robust(self, robust):
        return TabularRMDP(self.kernels, self.rewards, robust, self.initial_state)

    def to_dict(self):
        H, S, A = self.horizon, self.num_states, self.num_actions
        return {
            "kind": "tabular",
            "num_states": S,
            "num_actions": A,
            "horizon": H,
            "kernels": self.kernels.reshape(H, S * A, S).tolist(),
            "rewards": self.rewards.reshape(H, S * A).tolist(),
            "robust": self.robust.to_dict(),
            "initial_state": self.initial_state,
        }


@dataclass(frozen=True, eq=False)
class FactoredRMDP:
    """Factored model over ``S = O^d``.

    ``factor_kernels[h][i]`` has shape ``(|O|^{|pa_i|}, A, |O|)``; the context
    index mixes the parent outcomes in the order listed in ``parents[i]`` with
    the first parent least significant.
    """

    num_outcomes: int
    parents: tuple
    factor_kernels: tuple
    rewards: np.ndarray
    robust: RobustSpec = field(default_factory=RobustSpec)
    initial_state: int = 0

    def __post_init__(self):
        O = int(self.num_outcomes)
        if O < 1:
            raise InvariantError("num_outcomes must be positive")
        parents = tuple(tuple(int(j) for j in pa) for pa in self.parents)
        d = len(parents)
        if d < 1:
            raise InvariantError("need at least one factor")
        for i, pa in enumerate(parents):
            if len(set(pa)) != len(pa) or any(not 0 <= j < d for j in pa):
                raise InvariantError(f"parents[{i}] = {list(pa)} has invalid indices")
        rewards = np.asarray(self.rewards, dtype=np.float64)
        if rewards.ndim != 3:
            raise InvariantError("rewards must have shape (H, S, A)")
        H, S, A = rewards.shape
        if S != O**d:
            raise InvariantError(f"rewards index {S} states but |O|^d = {O**d}")
        check_unit_interval(rewards, "rewards")
        if len(self.factor_kernels) != H:
            raise InvariantError(f"factor_kernels must have {H} steps")
        fk = []
        for h, step in enumerate(self.factor_kernels):
            if len(step) != d:
                raise InvariantError(f"factor_kernels[{h}] must have {d} factors")
            row = []
            for i, k in enumerate(step):
                k = np.asarray(k, dtype=np.float64)
                want = (O ** len(parents[i]), A, O)
                if k.shape != want:
                    raise InvariantError(f"factor_kernels[{h}][{i}] must have shape {want}, got {k.shape}")
                check_stochastic_rows(k, f"factor_kernels[{h}][{i}]")
                row.append(frozen(k))
            fk.append(tuple(row))
        robust = self.robust if isinstance(self.robust, RobustSpec) else RobustSpec.from_dict(self.robust)
        if robust.per_factor_rho is not None and len(robust.per_factor_rho) != d:
            raise InvariantError(f"per_factor_rho must have {d} entries")
        object.__setattr__(self, "num_outcomes", O)
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "factor_kernels", tuple(fk))
        object.__setattr__(self, "rewards", frozen(rewards))
        object.__setattr__(self, "robust", robust)
        object.__setattr__(self, "initial_state", check_index(self.initial_state, S, "initial_state"))

    @property
    def num_factors(self):
        return len(self.parents)

    @property
    def horizon(self):
        return self.rewards.shape[0]

    @property
    def num_states(self):
        return self.rewards.shape[1]

    @property
    def num_actions(self):
        return self.rewards.shape[2]

    def decode(self, s):
        """Outcome tuple of state ``s`` (factor 0 least significant)."""
        return decode_state(s, self.num_outcomes, self.num_factors)

    def context(self, i, s):
        return context_index(self.decode(s), self.parents[i], self.num_outcomes)

    def factor_rows(self, h, s, a):
        """The d per-factor next-outcome distributions at ``(h, s, a)``."""
        return [self.factor_kernels[h][i][self.context(i, s), a] for i in range(self.num_factors)]

    def to_dict(self):
        H, S, A = self.rewards.shape
        return {
            "kind": "factored",
            "num_outcomes": self.num_outcomes,
            "num_factors": self.num_factors,
            "num_actions": A,
            "horizon": H,
            "parents": [list(pa) for pa in self.parents],
            "factor_kernels": [
                [k.reshape(-1, self.num_outcomes).tolist() for k in step] for step in self.factor_kernels
            ],
            "rewards": self.rewards.reshape(H, S * A).tolist(),
            "robust": self.robust.to_dict(),
            "initial_state": self.initial_state,
        }


@dataclass(frozen=True, eq=False)
class LinearRMDP:
    """Linear-feature model with ``P_h(s'|s,a) = phi(s,a)^T mu_h(s')``.

    ``features`` has shape ``(S, A, d)``, ``factor_measures`` ``(H, d, S)`` and
    ``reward_params`` ``(H, d)``. Rewards are ``phi(s,a)^T theta_h``.
    """

    features: np.ndarray
    factor_measures: np.ndarray
    reward_params: np.ndarray
    robust: RobustSpec = field(default_factory=RobustSpec)
    initial_state: int = 0

    def __post_init__(self):
        phi = np.asarray(self.features, dtype=np.float64)
        mu = np.asarray(self.factor_measures, dtype=np.float64)
        theta = np.asarray(self.reward_params, dtype=np.float64)
        if phi.ndim != 3:
            raise InvariantError(f"features must have shape (S, A, d), got {phi.shape}")
        S, A, d = phi.shape
        if mu.ndim != 3 or mu.shape[1:] != (d, S):
            raise InvariantError(f"factor_measures must have shape (H, {d}, {S}), got {mu.shape}")
        H = mu.shape[0]
        if theta.shape != (H, d):
            raise InvariantError(f"reward_params must have shape {(H, d)}, got {theta.shape}")
        check_stochastic_rows(phi, "features", atol=1e-10)
        check_stochastic_rows(mu, "factor_measures", atol=1e-10)
        norms = np.linalg.norm(theta, axis=1)
        if np.any(norms > np.sqrt(d) + 1e-12):
            raise InvariantError("reward_params must satisfy ||theta_h||_2 <= sqrt(d)")
        check_unit_interval(np.einsum("sad,hd->hsa", phi, theta), "rewards")
        induced = np.einsum("sad,hdt->hsat", phi, mu)
        err = np.abs(induced.sum(axis=-1) - 1.0).max()
        if err > 1e-10:
            raise InvariantError(f"induced kernel rows deviate from 1 by {err!r}")
        object.__setattr__(self, "features", frozen(phi))
        object.__setattr__(self, "factor_measures", frozen(mu))
        object.__setattr__(self, "reward_params", frozen(theta))
        if not isinstance(self.robust, RobustSpec):
            object.__setattr__(self, "robust", RobustSpec.from_dict(self.robust))
        object.__setattr__(self, "initial_state", check_index(self.initial_state, S, "initial_state"))

    @property
    def feature_dim(self):
        return self.features.shape[2]

    @property
    def horizon(self):
        return self.factor_measures.shape[0]

    @property
    def num_states(self):
        return self.features.shape[0]

    @property
    def num_actions(self):
        return self.features.shape[1]

    @property
    def rewards(self):
        return np.clip(np.einsum("sad,hd->hsa", self.features, self.reward_params), 0.0, 1.0)

    def to_dict(self):
        S, A, d = self.features.shape
        return {
            "kind": "linear",
            "num_states": S,
            "num_actions": A,
            "feature_dim": d,
            "horizon": self.horizon,
            "features": self.features.reshape(S * A, d).tolist(),
            "factor_measures": self.factor_measures.tolist(),
            "reward_params": self.reward_params.tolist(),
            "robust": self.robust.to_dict(),
            "initial_state": self.initial_state,
        }


@dataclass(frozen=True)
class ModelDims:
    num_states: int
    num_actions: int
    horizon: int
    initial_state: int = 0


@dataclass(frozen=True, eq=False)
class Policy:
    """Step-indexed action distributions, ``probs[h, s, a] = pi_h(a|s)``."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 3:
            raise InvariantError(f"policy must have shape (H, S, A), got {probs.shape}")
        check_stochastic_rows(probs, "policy", atol=1e-9)
        object.__setattr__(self, "probs", frozen(probs))

    @property
    def horizon(self):
        return self.probs.shape[0]

    @property
    def num_states(self):
        return self.probs.shape[1]

    @property
    def num_actions(self):
        return self.probs.shape[2]

    @classmethod
    def uniform(cls, horizon, num_states, num_actions):
        return cls(np.full((horizon, num_states, num_actions), 1.0 / num_actions))

    @classmethod
    def deterministic(cls, actions, num_actions):
        actions = np.asarray(actions, dtype=np.int64)
        probs = np.zeros(actions.shape + (num_actions,))
        np.put_along_axis(probs, actions[..., None], 1.0, axis=-1)
        return cls(probs)

    @classmethod
    def random(cls, horizon, num_states, num_actions, rng, deterministic=False):
        rng = np.random.default_rng(rng)
        if deterministic:
            return cls.deterministic(rng.integers(num_actions, size=(horizon, num_states)), num_actions)
        return cls(rng.dirichlet(np.ones(num_actions), size=(horizon, num_states)))

    def mix(self, other, weight):
        """``(1 - weight) * self + weight * other``."""
        return Policy((1.0 - weight) * self.probs + weight * other.probs)

    def greedy_actions(self):
        return self.probs.argmax(axis=-1)

    def equals(self, other):
        return self.probs.shape == other.probs.shape and np.array_equal(self.probs, other.probs)

    def to_dict(self):
        H, S, A = self.probs.shape
        return {"kind": "policy", "horizon": H, "num_states": S, "num_actions": A, "probs": self.probs.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["probs"], dtype=np.float64))


@dataclass(frozen=True, eq=False)
class ValueTable:
    """``v`` has shape ``(H + 1, S)`` with a zero terminal row; ``q`` is ``(H, S, A)``."""

    v: np.ndarray
    q: np.ndarray = None

    def __post_init__(self):
        v = np.asarray(self.v, dtype=np.float64)
        if v.ndim != 2:
            raise InvariantError("v must have shape (H + 1, S)")
        if np.any(v[-1] != 0):
            raise InvariantError("terminal values must be zero")
        H = v.shape[0] - 1
        caps = (H - np.arange(H + 1))[:, None]
        if np.any(v < -VALUE_ATOL) or np.any(v > caps + VALUE_ATOL):
            raise InvariantError("values outside [0, H - h]")
        object.__setattr__(self, "v", frozen(v))
        if self.q is not None:
            q = np.asarray(self.q, dtype=np.float64)
            if q.shape[:2] != (H, v.shape[1]):
                raise InvariantError("q must have shape (H, S, A)")
            if np.any(q < -VALUE_ATOL) or np.any(q > caps[:-1, :, None] + VALUE_ATOL):
                raise InvariantError("q-values outside [0, H - h]")
            object.__setattr__(self, "q", frozen(q))

    @property
    def horizon(self):
        return self.v.shape[0] - 1

    def to_dict(self):
        return {"v": self.v.tolist(), "q": None if self.q is None else self.q.tolist()}


def decode_state(s, num_outcomes, num_factors):
    out = []
    for _ in range(num_factors):
        out.append(s % num_outcomes)
        s //= num_outcomes
    return tuple(out)


def encode_state(outcomes, num_outcomes):
    s = 0
    for o in reversed(outcomes):
        s = s * num_outcomes + int(o)
    return s


def context_index(outcomes, parents, num_outcomes):
    return encode_state([outcomes[j] for j in parents], num_outcomes)


def expand_factored(m, max_states=1 << 12):
    """Tabular model with the product kernel of ``m``.

    Product robust sets are not S x A rectangular balls around the product
    kernel, so the returned model carries a nominal-only robust spec.
    """
    S, A, H = m.num_states, m.num_actions, m.horizon
    if S > max_states:
        raise InvariantError(f"expansion has {S} states, above max_states={max_states}")
    O, d = m.num_outcomes, m.num_factors
    outcomes = np.array([decode_state(s, O, d) for s in range(S)])  # (S, d)
    kernels = np.ones((H, S, A, S))
    for h in range(H):
        for i, pa in enumerate(m.parents):
            ctx = np.zeros(S, dtype=np.int64)
            for k, j in enumerate(pa):
                ctx += outcomes[:, j] * O**k
            fk = m.factor_kernels[h][i]  # (C, A, O)
            # rows indexed by current state, columns by next state's i-th outcome
            kernels[h] *= fk[ctx][:, :, outcomes[:, i]]
    robust = RobustSpec(m.robust.divergence, 0.0, m.robust.lambda_floor, nominal_only=True)
    return TabularRMDP(kernels, m.rewards, robust, m.initial_state)


def linear_to_tabular(m):
    """Tabular model with kernel ``phi(s,a)^T mu_h``; nominal only (d-rectangular sets are not S x A balls)."""
    kernels = np.einsum("sad,hdt->hsat", m.features, m.factor_measures)
    kernels = np.clip(kernels, 0.0, None)
    kernels /= kernels.sum(axis=-1, keepdims=True)
    robust = RobustSpec(m.robust.divergence, 0.0, m.robust.lambda_floor, nominal_only=True)
    return TabularRMDP(kernels, m.rewards, robust, m.initial_state)


def _tabular_from_dict(d):
    S, A, H = int(d["num_states"]), int(d["num_actions"]), int(d["horizon"])
    kernels = np.asarray(d["kernels"], dtype=np.float64)
    rewards = np.asarray(d["rewards"], dtype=np.float64)
    if kernels.size != H * S * A * S:
        raise InvariantError(f"kernels hold {kernels.size} numbers, expected {H * S * A * S}")
    if rewards.size != H * S * A:
        raise InvariantError(f"rewards hold {rewards.size} numbers, expected {H * S * A}")
    return TabularRMDP(
        kernels.reshape(H, S, A, S),
        rewards.reshape(H, S, A),
        RobustSpec.from_dict(d.get("robust", {})),
        d.get("initial_state", 0),
    )


def _factored_from_dict(d):
    O, A, H = int(d["num_outcomes"]), int(d["num_actions"]), int(d["horizon"])
    parents = d["parents"]
    if "num_factors" in d and int(d["num_factors"]) != len(parents):
        raise InvariantError("num_factors disagrees with parents")
    fk = [
        [np.asarray(k, dtype=np.float64).reshape(O ** len(parents[i]), A, O) for i, k in enumerate(step)]
        for step in d["factor_kernels"]
    ]
    S = O ** len(parents)
    rewards = np.asarray(d["rewards"], dtype=np.float64).reshape(H, S, A)
    return FactoredRMDP(O, parents, fk, rewards, RobustSpec.from_dict(d.get("robust", {})), d.get("initial_state", 0))


def _linear_from_dict(d):
    S, A, dim = int(d["num_states"]), int(d["num_actions"]), int(d["feature_dim"])
    phi = np.asarray(d["features"], dtype=np.float64).reshape(S, A, dim)
    return LinearRMDP(
        phi,
        np.asarray(d["factor_measures"], dtype=np.float64),
        np.asarray(d["reward_params"], dtype=np.float64),
        RobustSpec.from_dict(d.get("robust", {})),
        d.get("initial_state", 0),
    )


_LOADERS = {"tabular": _tabular_from_dict, "factored": _factored_from_dict, "linear": _linear_from_dict}


def model_from_dict(d, kind=None):
    found = d.get("kind", "tabular")
    if kind is not None and found != kind:
        raise InvariantError(f"expected a {kind} model, file declares {found!r}")
    if found not in _LOADERS:
        raise InvariantError(f"unknown model kind {found!r}")
    try:
        return _LOADERS[found](d)
    except (KeyError, TypeError) as exc:
        raise InvariantError(f"malformed {found} model: {exc!r}") from exc


def load_model(path, kind=None):
    """Load and validate a model JSON file.

    Raises ``json.JSONDecodeError`` on parse errors and ``InvariantError`` when
    the model breaks an invariant.
    """
    with open(path) as fh:
        d = json.load(fh)
    return model_from_dict(d, kind)


def dumps(obj):
    """Canonical JSON text for any object with ``to_dict``."""
    return json.dumps(obj.to_dict() if hasattr(obj, "to_dict") else obj, sort_keys=True)


def save_model(m, path):
    Path(path).write_text(dumps(m) + "\n")


def model_id(m):
    return hashlib.sha256(dumps(m).encode()).hexdigest()[:16]


def load_policy(path):
    with open(path) as fh:
        return Policy.from_dict(json.load(fh))
