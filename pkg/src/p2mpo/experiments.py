"""Rate experiments: suboptimality against dataset size for several learners."""

import csv
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from joblib import Parallel, delayed
from scipy import stats

from ._validation import InvariantError
from .data import generate
from .dp import robust_evaluate, robust_plan
from .duals import tv_dual_inf
from .estimation import calibrated_c_dec, confidence_region
from .model import Divergence, Policy, RobustSpec, TabularRMDP, dumps, load_model, load_policy
from .pessimism import baseline_policy

METHODS = ("p2mpo", "mle_greedy", "single_pessimism")

# Reference instance: an optimal-stopping chain. States 0-2 are live, state 3
# is an absorbing zero-reward sink. Action 0 cashes out (reward, then sink),
# action 1 waits (no reward, random move among live states). Stop rewards are
# set so that waiting is robust-optimal at every live state before the last
# step, with the relative margins below; their spread over two orders of
# magnitude is what makes the learner's loss shrink gradually with n instead
# of vanishing after a single threshold.
REFERENCE_MARGINS = (
    (0.4, 0.005, 0.08),
    (0.33, 0.2, 0.3),
    (0.12, 0.4, 0.07),
    (0.016, 0.055, 0.022),
)
REFERENCE_FINAL_REWARDS = (1.0, 0.8, 0.6)
REFERENCE_MOVES = ((0.5, 0.3, 0.2), (0.2, 0.5, 0.3), (0.3, 0.2, 0.5))


def reference_model(rho=0.1, margins=REFERENCE_MARGINS):
    """4-state, 2-action, horizon-5 TV model used by the rate experiment."""
    H, S, A = 5, 4, 2
    live = 3
    kernels = np.zeros((H, S, A, S))
    rewards = np.zeros((H, S, A))
    kernels[:, :, 0, live] = 1.0
    kernels[:, live, :, live] = 1.0
    kernels[:, :live, 1, :live] = np.asarray(REFERENCE_MOVES)
    v_next = np.zeros(S)
    for h in range(H - 1, -1, -1):
        v = np.zeros(S)
        for s in range(live):
            if h == H - 1:
                rewards[h, s, 0] = v[s] = REFERENCE_FINAL_REWARDS[s]
            else:
                wait = tv_dual_inf(kernels[h, s, 1], v_next, rho).value
                rewards[h, s, 0] = wait * (1.0 - margins[h][s])
                v[s] = wait
        v_next = v
    return TabularRMDP(kernels, rewards, RobustSpec(Divergence.TV, rho), initial_state=0)


def mixed_behavior(m, eps_mix=0.3, plan=None):
    """``(1 - eps_mix) * pi_star + eps_mix * uniform``."""
    if not 0.0 <= eps_mix <= 1.0:
        raise InvariantError("eps_mix must lie in [0, 1]")
    plan = robust_plan(m) if plan is None else plan
    return plan.policy.mix(Policy.uniform(m.horizon, m.num_states, m.num_actions), eps_mix)


def family_c_dec(n_grid, delta, num_states, num_actions, horizon, C1=1.0, C2=1.0):
    """One ``c_dec`` for a whole sweep: the smallest calibrated value over the grid,
    so the per-pair radii stay inside the exact region at every ``n``."""
    return min(calibrated_c_dec(max(n, 2), delta, num_states, num_actions, horizon, C1, C2) for n in n_grid)


@dataclass
class ExperimentConfig:
    model: str = "reference"
    behavior: str = None
    eps_mix: float = 0.3
    n_grid: list = field(default_factory=lambda: [2**k for k in range(6, 15)])
    seeds: list = field(default_factory=lambda: list(range(20)))
    delta: float = 0.1
    robust: dict = None
    constants: dict = field(default_factory=lambda: {"C1": 1.0, "C2": 1.0, "c_dec": "calibrated"})
    baselines: list = field(default_factory=lambda: list(METHODS))

    def __post_init__(self):
        self.n_grid = [int(n) for n in self.n_grid]
        self.seeds = [int(s) for s in self.seeds]
        if not self.n_grid or any(b <= a for a, b in zip(self.n_grid, self.n_grid[1:])):
            raise InvariantError("n_grid must be nonempty and strictly increasing")
        if self.n_grid[0] < 1:
            raise InvariantError("dataset sizes must be positive")
        if not self.seeds:
            raise InvariantError("seeds must be nonempty")
        if not 0.0 <= self.eps_mix <= 1.0:
            raise InvariantError("eps_mix must lie in [0, 1]")
        if not 0.0 < self.delta < 1.0:
            raise InvariantError("delta must lie in (0, 1)")
        unknown = set(self.baselines) - set(METHODS)
        if unknown:
            raise InvariantError(f"unknown methods {sorted(unknown)}")
        if not self.baselines:
            raise InvariantError("baselines must be nonempty")

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise InvariantError(f"unknown config keys {sorted(extra)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            cfg = cls.from_dict(json.load(fh))
        base = os.path.dirname(os.path.abspath(path))
        for key in ("model", "behavior"):
            val = getattr(cfg, key)
            if val not in (None, "reference") and not os.path.isabs(val):
                setattr(cfg, key, os.path.join(base, val))
        return cfg

    def to_dict(self):
        return asdict(self)

    def build_model(self):
        m = reference_model() if self.model == "reference" else load_model(self.model, "tabular")
        if self.robust is not None:
            m = m.with_robust(RobustSpec.from_dict(self.robust))
        return m

    def resolved_constants(self, m):
        c = {"C1": 1.0, "C2": 1.0, "c_dec": 2.0}
        c.update(self.constants or {})
        if c["c_dec"] == "calibrated":
            c["c_dec"] = family_c_dec(
                self.n_grid, self.delta, m.num_states, m.num_actions, m.horizon, c["C1"], c["C2"]
            )
        return {k: float(v) for k, v in c.items()}


def run_cell(m, pi_b, plan, n, seed, methods, delta, constants):
    """All methods on one shared dataset; returns ``[(method, n, seed, subopt)]``."""
    data = generate(m, pi_b, n, seed)
    region = confidence_region(data, delta, **constants)
    s1 = m.initial_state
    best = plan.values.v[0, s1]
    rows = []
    for method in methods:
        pi = baseline_policy(method, data, m.rewards, m.robust, delta, constants, region=region)
        gap = float(best - robust_evaluate(m, pi).v[0, s1])
        if gap < -1e-9:
            raise InvariantError(f"negative suboptimality {gap!r} for {method} at n={n}, seed={seed}")
        rows.append((method, int(n), int(seed), gap))
    return rows


@dataclass
class RateReport:
    rows: list
    methods: list
    n_grid: list
    config: dict = None

    def subopts(self, method, n):
        return [r[3] for r in self.rows if r[0] == method and r[1] == n]

    def summary(self):
        means, stderr, slopes = {}, {}, {}
        for method in self.methods:
            mu, se = {}, {}
            for n in self.n_grid:
                vals = np.asarray(self.subopts(method, n))
                if vals.size:
                    mu[str(n)] = float(vals.mean())
                    se[str(n)] = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
            means[method], stderr[method] = mu, se
            slopes[method] = fit_slope(self.n_grid, [mu.get(str(n)) for n in self.n_grid])
        return {"methods": list(self.methods), "n_grid": list(self.n_grid), "means": means, "stderr": stderr, "slopes": slopes}


def fit_slope(n_grid, means, drop=2, min_points=4):
    """Least-squares slope of ``log mean`` against ``log n`` after dropping the
    ``drop`` smallest sizes, with a 95% confidence interval. ``None`` entries
    when fewer than ``min_points`` usable points remain or a mean is not
    positive."""
    pts = [(n, m) for n, m in list(zip(n_grid, means))[drop:] if m is not None]
    empty = {"slope": None, "intercept": None, "ci95": None, "points": len(pts)}
    if len(pts) < min_points or any(m <= 0 for _, m in pts):
        return empty
    x = np.log([p[0] for p in pts])
    y = np.log([p[1] for p in pts])
    fit = stats.linregress(x, y)
    half = float(stats.t.ppf(0.975, len(pts) - 2) * fit.stderr)
    return {
        "slope": float(fit.slope),
        "intercept": float(fit.intercept),
        "ci95": [float(fit.slope - half), float(fit.slope + half)],
        "points": len(pts),
    }


def run_rate_experiment(cfg, n_jobs=None, out_dir=None):
    """Run every ``(n, seed)`` cell; rows come back in ``(n, seed, method)`` order
    regardless of ``n_jobs``. With ``out_dir`` set, whatever finished is
    written out even if a cell fails."""
    m = cfg.build_model()
    if not isinstance(m, TabularRMDP):
        raise InvariantError("rate experiments need a tabular model")
    plan = robust_plan(m)
    pi_b = load_policy(cfg.behavior) if cfg.behavior else mixed_behavior(m, cfg.eps_mix, plan)
    constants = cfg.resolved_constants(m)
    methods = list(cfg.baselines)
    cells = [(n, seed) for n in cfg.n_grid for seed in cfg.seeds]
    cfg_dict = dict(cfg.to_dict(), resolved_constants=constants)
    rows = []
    try:
        if n_jobs in (None, 1):
            for n, seed in cells:
                rows.extend(run_cell(m, pi_b, plan, n, seed, methods, cfg.delta, constants))
        else:
            out = Parallel(n_jobs=n_jobs)(
                delayed(run_cell)(m, pi_b, plan, n, seed, methods, cfg.delta, constants) for n, seed in cells
            )
            rows = [r for cell in out for r in cell]
    except Exception:
        if out_dir is not None:
            emit_report(RateReport(rows, methods, cfg.n_grid, cfg_dict), out_dir)
        raise
    report = RateReport(rows, methods, cfg.n_grid, cfg_dict)
    if out_dir is not None:
        emit_report(report, out_dir)
    return report


CSV_COLUMNS = ("method", "n", "seed", "subopt")


def report_csv(report):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for method, n, seed, subopt in report.rows:
        w.writerow([method, n, seed, repr(float(subopt))])
    return buf.getvalue()


def emit_report(report, out_dir):
    """Write ``results.csv`` and ``summary.json`` into ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "results.csv"), "w", newline="") as fh:
        fh.write(report_csv(report))
    summary = dict(report.summary(), config=report.config)
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        fh.write(dumps(summary) + "\n")


def load_report(out_dir):
    with open(os.path.join(out_dir, "results.csv"), newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_COLUMNS:
            raise InvariantError(f"unexpected CSV header {header}")
        rows = [(r[0], int(r[1]), int(r[2]), float(r[3])) for r in reader]
    with open(os.path.join(out_dir, "summary.json")) as fh:
        summary = json.load(fh)
    return RateReport(rows, summary["methods"], summary["n_grid"], summary.get("config"))
