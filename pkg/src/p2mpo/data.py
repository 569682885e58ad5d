"""Offline datasets, visitation distributions and the coverage diagnostic.

Trajectories are drawn from the nominal kernel only. Each trajectory ``tau``
owns a counter-based Philox stream keyed by ``(seed, tau)``, so a dataset is
reproducible regardless of how trajectories are split across workers.
"""

import io
import json
import math
from dataclasses import dataclass

import numpy as np

from ._validation import InvariantError, check_index
from .duals import divergence
from .model import Divergence, Policy, TabularRMDP, model_id

RNG_VERSION = "philox4x64-key(seed,tau)-v1"
DATASET_FORMAT = "p2mpo-dataset-v1"


@dataclass(frozen=True, eq=False)
class OfflineDataset:
    """``n`` trajectories stored step-major: ``states[h, tau]`` is ``s_h`` of trajectory ``tau``."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    num_states: int
    num_actions: int
    behavior: Policy = None
    seed: int = None
    model_id: str = ""

    def __post_init__(self):
        shape = np.shape(self.states)
        if len(shape) != 2:
            raise InvariantError("dataset arrays must have shape (H, n)")
        for name in ("actions", "rewards", "next_states"):
            if np.shape(getattr(self, name)) != shape:
                raise InvariantError(f"{name} has shape {np.shape(getattr(self, name))}, expected {shape}")
        for name, size in (("states", self.num_states), ("next_states", self.num_states), ("actions", self.num_actions)):
            arr = np.asarray(getattr(self, name))
            if arr.size and (arr.min() < 0 or arr.max() >= size):
                raise InvariantError(f"{name} has indices outside [0, {size})")
        for name in ("states", "actions", "next_states"):
            arr = np.array(getattr(self, name), dtype=np.int64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        r = np.array(self.rewards, dtype=np.float64)
        r.setflags(write=False)
        object.__setattr__(self, "rewards", r)

    @property
    def horizon(self):
        return self.states.shape[0]

    @property
    def n(self):
        return self.states.shape[1]

    def step(self, h):
        """The ``n`` tuples ``(s, a, r, s')`` of step ``h``."""
        return list(zip(self.states[h], self.actions[h], self.rewards[h], self.next_states[h]))

    def check_rewards(self, rewards):
        """Raise unless every recorded reward equals the known reward table."""
        h = np.arange(self.horizon)[:, None]
        expected = np.asarray(rewards)[h, self.states, self.actions]
        if not np.array_equal(expected, self.rewards):
            raise InvariantError("recorded rewards differ from the reward table")


def trajectory_uniforms(seed, n, width):
    """``(n, width)`` uniforms; row ``tau`` comes from the Philox stream keyed by ``(seed, tau)``."""
    return np.array(
        [np.random.Generator(np.random.Philox(key=[seed, tau])).random(width) for tau in range(n)]
    ).reshape(n, width)


def _inverse_cdf(probs, u):
    cdf = np.cumsum(probs, axis=-1)
    cdf /= cdf[..., -1:]
    return (u[:, None] >= cdf).sum(axis=-1)


def generate(m, pi_b, n, seed):
    """Sample ``n`` trajectories of ``pi_b`` under the nominal kernel of ``m``."""
    if n < 1:
        raise InvariantError("n must be at least 1")
    if seed < 0:
        raise InvariantError("seed must be nonnegative")
    H, S, A = m.horizon, m.num_states, m.num_actions
    if pi_b.probs.shape != (H, S, A):
        raise InvariantError("behavior policy shape does not match the model")
    u = trajectory_uniforms(seed, n, 2 * H)
    states = np.empty((H, n), dtype=np.int64)
    actions = np.empty((H, n), dtype=np.int64)
    nxt = np.empty((H, n), dtype=np.int64)
    s = np.full(n, m.initial_state, dtype=np.int64)
    for h in range(H):
        states[h] = s
        actions[h] = _inverse_cdf(pi_b.probs[h, s], u[:, 2 * h])
        nxt[h] = _inverse_cdf(m.kernels[h, s, actions[h]], u[:, 2 * h + 1])
        s = nxt[h]
    rewards = m.rewards[np.arange(H)[:, None], states, actions]
    return OfflineDataset(states, actions, rewards, nxt, S, A, pi_b, int(seed), model_id(m))


def visitation(kernels, pi, initial_state=None):
    """State-action visitation ``d[h, s, a]`` of ``pi`` under ``kernels``.

    ``kernels`` may be a ``TabularRMDP`` (its nominal kernel and initial state
    are used) or an explicit ``(H, S, A, S)`` array.
    """
    if isinstance(kernels, TabularRMDP):
        initial_state = kernels.initial_state if initial_state is None else initial_state
        kernels = kernels.kernels
    kernels = np.asarray(kernels, dtype=np.float64)
    H, S, A, _ = kernels.shape
    if pi.probs.shape != (H, S, A):
        raise InvariantError("policy shape does not match kernels")
    s1 = check_index(0 if initial_state is None else initial_state, S, "initial_state")
    d = np.zeros((H, S, A))
    state = np.zeros(S)
    state[s1] = 1.0
    for h in range(H):
        d[h] = state[:, None] * pi.probs[h]
        state = np.einsum("sa,sat->t", d[h], kernels[h])
    return d


def _tilt_into_ball(p, g, rho, frac):
    """Exponential tilt ``p * exp(theta * g)`` with KL to ``p`` equal to ``frac`` of the reachable radius."""

    def tilt(theta):
        w = p * np.exp(theta * (g - g.max()))
        return w / w.sum()

    lo, hi = 0.0, 64.0
    if divergence(tilt(hi), p, "kl") > rho:
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if divergence(tilt(mid), p, "kl") <= rho:
                lo = mid
            else:
                hi = mid
        hi = lo
    return tilt(frac * hi)


def sample_kernel_in_ball(kernels, spec, rng):
    """One random kernel from the S x A rectangular ball around ``kernels``.

    TV: each row moves a random fraction of the way to a Dirichlet draw,
    staying within radius. KL: each row is a random exponential tilt scaled
    to lie inside the ball.
    """
    kernels = np.asarray(kernels, dtype=np.float64)
    flat = kernels.reshape(-1, kernels.shape[-1])
    out = np.empty_like(flat)
    for i, p in enumerate(flat):
        if spec.rho == 0:
            out[i] = p
        elif spec.divergence is Divergence.TV:
            r = rng.dirichlet(np.ones(p.size))
            dist = divergence(r, p, "tv")
            tmax = 1.0 if dist <= spec.rho else spec.rho / dist
            out[i] = p + rng.uniform(0.0, tmax) * (r - p)
        else:
            out[i] = _tilt_into_ball(p, rng.standard_normal(p.size), spec.rho, rng.uniform())
    return out.reshape(kernels.shape)


def _chi2_ratio(d_star, d_b):
    hole = (d_star > 0) & (d_b <= 0)
    if np.any(hole):
        return math.inf
    mask = d_b > 0
    return float((d_star[mask] ** 2 / d_b[mask]).sum())


def coverage_coefficient(m, pi_b, pi_star, n_perturb=32, seed=0, return_trace=False):
    """Monte-Carlo lower bound on the robust partial coverage coefficient.

    Takes the running maximum over steps of ``E_{d_b}[(d_star / d_b)^2]``
    where ``d_b`` is the behavior visitation under the nominal kernel and
    ``d_star`` the target visitation under the nominal kernel and under
    ``n_perturb`` kernels sampled from the robust set. Returns ``math.inf``
    when the target visits a pair the behavior never does. This is an
    approximate diagnostic, never an input to learning.
    """
    d_b = visitation(m, pi_b)
    rng = np.random.default_rng(seed)
    best = -math.inf
    trace = []
    for k in range(n_perturb + 1):
        kern = m.kernels if k == 0 else sample_kernel_in_ball(m.kernels, m.robust, rng)
        d_star = visitation(kern, pi_star, m.initial_state)
        for h in range(m.horizon):
            best = max(best, _chi2_ratio(d_star[h], d_b[h]))
        trace.append(best)
    return (best, trace) if return_trace else best


# file format -----------------------------------------------------------------


def dataset_to_text(data):
    """JSON header line (prefixed ``#``) followed by a CSV body ``h,tau,s,a,r,s_next``."""
    header = {
        "format": DATASET_FORMAT,
        "n": data.n,
        "horizon": data.horizon,
        "num_states": data.num_states,
        "num_actions": data.num_actions,
        "seed": data.seed,
        "model_id": data.model_id,
        "rng": RNG_VERSION,
        "behavior": None if data.behavior is None else data.behavior.probs.tolist(),
    }
    buf = io.StringIO()
    buf.write("# " + json.dumps(header, sort_keys=True) + "\n")
    buf.write("h,tau,s,a,r,s_next\n")
    for h in range(data.horizon):
        for tau in range(data.n):
            buf.write(
                f"{h},{tau},{data.states[h, tau]},{data.actions[h, tau]},"
                f"{float(data.rewards[h, tau])!r},{data.next_states[h, tau]}\n"
            )
    return buf.getvalue()


def save_dataset(data, path):
    with open(path, "w", newline="") as fh:
        fh.write(dataset_to_text(data))


def dataset_from_text(text):
    lines = text.splitlines()
    if not lines or not lines[0].startswith("#"):
        raise InvariantError("dataset file must start with a '#' JSON header line")
    header = json.loads(lines[0][1:])
    if lines[1].strip() != "h,tau,s,a,r,s_next":
        raise InvariantError("unexpected CSV columns")
    H, n = int(header["horizon"]), int(header["n"])
    body = np.loadtxt(io.StringIO("\n".join(lines[2:])), delimiter=",", ndmin=2)
    if body.shape != (H * n, 6):
        raise InvariantError(f"expected {H * n} rows, found {body.shape[0]}")
    h, tau = body[:, 0].astype(np.int64), body[:, 1].astype(np.int64)
    grids = {}
    for col, name in ((2, "s"), (3, "a"), (4, "r"), (5, "s_next")):
        arr = np.empty((H, n), dtype=np.float64)
        arr[h, tau] = body[:, col]
        grids[name] = arr
    behavior = header.get("behavior")
    return OfflineDataset(
        grids["s"].astype(np.int64),
        grids["a"].astype(np.int64),
        grids["r"],
        grids["s_next"].astype(np.int64),
        int(header["num_states"]),
        int(header["num_actions"]),
        None if behavior is None else Policy(np.asarray(behavior)),
        header.get("seed"),
        header.get("model_id", ""),
    )


def load_dataset(path):
    with open(path) as fh:
        return dataset_from_text(fh.read())
