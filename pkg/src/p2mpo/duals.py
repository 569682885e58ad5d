"""One-step distributionally robust expectations.

Each routine computes ``inf { E_q[v] : D(q || p) <= rho }`` for a KL or total
variation ball. TV radii use the half-L1 convention ``0.5 * ||q - p||_1``.

The KL value comes from the scalar dual

    sup_{lam >= 0}  -lam * log E_p[exp(-v / lam)] - lam * rho

maximised by golden-section search, and the TV value from the piecewise
linear dual

    sup_lam  lam - E_p[(lam - v)_+] - rho * (lam - min v)_+

evaluated at its breakpoints. ``tv_primal_inf`` and ``brute_force_inf`` are
independent primal solvers used as test oracles and for worst-case kernel
extraction.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import rel_entr

from ._validation import InvariantError, as_float_array, check_distribution
from .model import Divergence

INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0
LAMBDA_TOL = 1e-10
LOG_LAMBDA_TOL = 1e-12
MIN_LAMBDA = 1e-8
MAX_LAMBDA = 1e300


@dataclass(frozen=True)
class DualResult:
    value: float
    lambda_star: float
    iterations: int = 0


def _check_inputs(p, v, rho):
    p = check_distribution(p, "p", atol=1e-9)
    v = as_float_array(v, "v", ndim=1)
    if v.shape != p.shape:
        raise InvariantError(f"p and v have different lengths ({p.size} vs {v.size})")
    rho = float(rho)
    if not rho >= 0:
        raise InvariantError(f"rho must be nonnegative, got {rho!r}")
    return p, v, rho


def golden_section_max(f, lo, hi, tol=LAMBDA_TOL, max_iter=500):
    """Maximise a unimodal ``f`` on ``[lo, hi]``.

    Returns ``(x, f(x), iterations)``; the endpoints are evaluated too so a
    maximiser sitting on the boundary is not lost.
    """
    a, b = lo, hi
    x1 = b - INV_PHI * (b - a)
    x2 = a + INV_PHI * (b - a)
    f1, f2 = f(x1), f(x2)
    it = 0
    while b - a > tol and it < max_iter:
        if f1 < f2:
            a, x1, f1 = x1, x2, f2
            x2 = a + INV_PHI * (b - a)
            f2 = f(x2)
        else:
            b, x2, f2 = x2, x1, f1
            x1 = b - INV_PHI * (b - a)
            f1 = f(x1)
        it += 1
    best = max([(f1, x1), (f2, x2), (f(lo), lo), (f(hi), hi)])
    return best[1], best[0], it


def _log_mgf(p, u, lam):
    """``log E_p[exp(-u / lam)]`` for ``u >= 0``, accurate for large ``lam`` too."""
    t = -u / lam
    shifted = float(np.dot(p, np.expm1(t)))
    if shifted > -0.5:
        return math.log1p(shifted)
    return math.log(float(np.dot(p, np.exp(t))))


def _kl_objective(p, u, rho):
    def g(lam):
        return -lam * _log_mgf(p, u, lam) - lam * rho

    return g


def kl_dual_inf(p, v, rho, lambda_floor=1e-6, value_cap=None):
    """Worst-case expectation of ``v`` over the KL ball of radius ``rho`` around ``p``.

    Outcomes with ``p_i = 0`` are unreachable (the ball keeps absolute
    continuity) and are dropped. The search bracket is
    ``[max(lambda_floor, 1e-8), span / rho]`` where ``span`` is the range of
    ``v`` over the support; since ``span <= value_cap`` this sits inside the
    ``[0, value_cap / rho]`` bracket on which the optimal multiplier is known
    to live. The search runs over ``log(lam)`` with relative tolerance
    ``1e-12``. The ``lam -> 0`` limit (minimum of ``v`` over the support) is
    always a candidate.
    """
    p, v, rho = _check_inputs(p, v, rho)
    if not lambda_floor > 0:
        raise InvariantError("lambda_floor must be positive")
    if rho == 0:
        return DualResult(float(np.dot(p, v)), 0.0, 0)
    support = p > 0
    ps, vs = p[support], v[support]
    vmin = vs.min()
    u = vs - vmin
    span = u.max()
    if span == 0:
        return DualResult(float(vmin), 0.0, 0)
    mean = float(np.dot(ps, vs))
    g = _kl_objective(ps, u, rho)
    hi = span / rho if span < rho * MAX_LAMBDA else MAX_LAMBDA
    lo = min(max(lambda_floor, MIN_LAMBDA), hi)
    # unimodal in lam, hence in log(lam); the log scale keeps huge brackets (tiny rho) cheap
    x, best, iters = golden_section_max(lambda t: g(math.exp(t)), math.log(lo), math.log(hi), tol=LOG_LAMBDA_TOL)
    lam = min(max(math.exp(x), lo), hi)
    if best <= 0.0:
        lam, best = 0.0, 0.0
    if value_cap is not None:
        assert lam <= value_cap / rho * (1 + 1e-12), "KL multiplier above value_cap / rho"
    value = min(max(vmin + best, vmin), mean)
    return DualResult(float(value), float(lam), iters)


def tv_dual_inf(p, v, rho, value_cap=None):
    """Worst-case expectation of ``v`` over the half-L1 ball of radius ``rho``.

    Mass may move to outcomes outside the support of ``p``, so the global
    minimum of ``v`` enters the dual. The objective is concave and piecewise
    linear, hence maximised at one of the breakpoints ``{0} u {v_i}``.
    """
    p, v, rho = _check_inputs(p, v, rho)
    if rho > 1:
        raise InvariantError(f"TV radius must be at most 1, got {rho!r}")
    if rho == 0:
        return DualResult(float(np.dot(p, v)), 0.0, 0)
    vmin = v.min()
    u = v - vmin
    # shifted multiplier lam' = lam - min v; lam = 0 corresponds to lam' = -min v
    cands = np.unique(np.concatenate([[-vmin, 0.0], u]))
    hinge = np.maximum(cands[:, None] - u[None, :], 0.0) @ p
    obj = cands - hinge - rho * np.maximum(cands, 0.0)
    k = int(np.argmax(obj))
    lam = float(vmin + cands[k])
    if value_cap is not None:
        assert -1e-12 <= lam <= value_cap + 1e-12, "TV multiplier outside [0, value_cap]"
    value = min(max(float(vmin + obj[k]), float(vmin)), float(np.dot(p, v)))
    return DualResult(value, lam, 0)


def tv_primal_inf(p, v, rho):
    """Exact TV minimiser by mass shifting.

    Moves ``min(rho, 1 - p[j])`` mass onto ``j``, the lowest-index global
    minimiser of ``v``, taking it from outcomes in decreasing order of ``v``.
    Returns ``(value, worst_q)``.
    """
    p, v, rho = _check_inputs(p, v, rho)
    if rho > 1:
        raise InvariantError(f"TV radius must be at most 1, got {rho!r}")
    q = p.copy()
    if rho == 0:
        return float(np.dot(p, v)), q
    j = int(np.argmin(v))
    budget = min(rho, 1.0 - p[j])
    for i in np.argsort(-v, kind="stable"):
        if budget <= 0 or v[i] <= v[j]:
            break
        take = min(q[i], budget)
        q[i] -= take
        q[j] += take
        budget -= take
    return float(np.dot(q, v)), q


def kl_worst_q(p, v, rho, lambda_floor=1e-6):
    """Minimising distribution of the KL ball: the exponential tilt ``p * exp(-v / lam*)``.

    When the optimum is the ``lam -> 0`` limit the minimiser is ``p``
    conditioned on the argmin set of ``v`` over the support.
    """
    res = kl_dual_inf(p, v, rho, lambda_floor)
    p = np.asarray(p, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if rho == 0:
        return res, p.copy()
    support = p > 0
    vmin = v[support].min()
    if res.lambda_star == 0.0:
        q = np.where(support & (v == vmin), p, 0.0)
    else:
        q = np.where(support, p * np.exp(-(v - vmin) / res.lambda_star), 0.0)
    return res, q / q.sum()


def dual_inf(p, v, spec, value_cap=None, rho=None):
    """Dispatch on ``spec.divergence``; ``rho`` overrides ``spec.rho`` when given."""
    rho = spec.rho if rho is None else rho
    if spec.divergence is Divergence.KL:
        return kl_dual_inf(p, v, rho, spec.lambda_floor, value_cap)
    return tv_dual_inf(p, v, min(rho, 1.0), value_cap)


def divergence(q, p, kind):
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if Divergence(kind) is Divergence.KL:
        return float(rel_entr(q, p).sum())
    return 0.5 * float(np.abs(q - p).sum())


# brute-force oracle -------------------------------------------------------

MAX_ORACLE_DIM = 6


def _pruned_grid(p, K, rho, kl):
    """Grid points for the first ``m - 2`` coordinates that can still be feasible.

    Merging all remaining coordinates into one cannot increase a
    divergence, so a partial vector whose merged divergence already exceeds
    ``rho`` is dropped together with all of its extensions.
    """
    m = p.size
    tail = np.concatenate([np.cumsum(p[::-1])[::-1], [0.0]])  # tail[j] = sum(p[j:])
    out = np.zeros((1, 0), dtype=np.int64)
    used = np.zeros(1, dtype=np.int64)
    partial = np.zeros(1)
    for j in range(m - 2):
        room = K - used + 1
        rows = np.repeat(np.arange(out.shape[0]), room)
        offs = np.arange(rows.size) - np.repeat(np.cumsum(room) - room, room)
        out = np.column_stack([out[rows], offs])
        used = used[rows] + offs
        qj = offs / K
        rest = (K - used) / K
        if kl:
            partial = partial[rows] + rel_entr(qj, p[j])
            bound = partial + rel_entr(rest, tail[j + 1])
        else:
            partial = partial[rows] + np.abs(qj - p[j])
            bound = 0.5 * (partial + np.abs(rest - tail[j + 1]))
        keep = bound <= rho + 1e-12
        out, used, partial = out[keep], used[keep], partial[keep]
    return out


def _line_solve(p, v, outer, rho, kl, bisect_iter):
    """Best objective on each segment where the first ``m - 2`` coordinates are fixed.

    Returns ``(values, outer)`` restricted to the segments that hold a
    feasible point.
    """
    m = p.size
    r = 1.0 - outer.sum(axis=1)
    po, pa, pb = p[: m - 2], p[m - 2], p[m - 1]
    if kl:
        base_div = rel_entr(outer, po).sum(axis=1)
    else:
        base_div = np.abs(outer - po).sum(axis=1)
    base_obj = outer @ v[: m - 2]

    def line_div(t, rr, bd):
        if kl:
            return bd + rel_entr(t, pa) + rel_entr(rr - t, pb)
        return 0.5 * (bd + np.abs(t - pa) + np.abs(rr - t - pb))

    # the divergence along the segment is minimised at tstar
    if kl:
        w = pa + pb
        tstar = np.where(w > 0, r * pa / max(w, 1e-300), 0.5 * r)
    else:
        tstar = np.clip(pa, 0.0, r)
    ok = line_div(tstar, r, base_div) <= rho
    outer, r, base_div, base_obj, tstar = outer[ok], r[ok], base_div[ok], base_obj[ok], tstar[ok]
    if not ok.any():
        return np.empty(0), outer

    def endpoint(toward):
        # bisection between the feasible tstar and the segment end, keeping the feasible side
        good, bad = tstar.copy(), toward.copy()
        end_ok = line_div(toward, r, base_div) <= rho
        for _ in range(bisect_iter):
            mid = 0.5 * (good + bad)
            feas = line_div(mid, r, base_div) <= rho
            good = np.where(feas, mid, good)
            bad = np.where(feas, bad, mid)
        return np.where(end_ok, toward, good)

    t = endpoint(np.zeros_like(r)) if v[m - 2] > v[m - 1] else endpoint(r)
    return base_obj + v[m - 2] * t + v[m - 1] * (r - t), outer


def _local_grid(center, step, half_width):
    offs = np.arange(-half_width, half_width + 1) * step
    mesh = np.stack(np.meshgrid(*([offs] * center.size), indexing="ij"), axis=-1).reshape(-1, center.size)
    pts = center[None, :] + mesh
    return pts[(pts >= 0).all(axis=1) & (pts.sum(axis=1) <= 1.0)]


def brute_force_inf(p, v, spec, grid_step=1e-2, rho=None, bisect_iter=60, zoom_levels=0, zoom_factor=8, max_moves=50):
    """Primal search for the robust expectation, independent of any duality.

    The first ``m - 2`` coordinates of ``q`` range over a simplex grid with
    spacing ``grid_step``; on each grid point the remaining two coordinates
    lie on a segment where the objective is linear and the divergence convex,
    so the best feasible point is an endpoint of the feasible interval, found
    by bisection that always keeps the feasible side. Each of the
    ``zoom_levels`` extra passes shrinks the step by ``zoom_factor`` and
    re-centres a local grid spanning one previous step on the best point until
    it stops improving. Every returned value is attained by a
    feasible ``q``, hence is an upper bound on the true infimum.
    """
    p, v, rho = _check_inputs(p, v, spec.rho if rho is None else rho)
    m = p.size
    if m > MAX_ORACLE_DIM:
        raise InvariantError(f"brute force supports at most {MAX_ORACLE_DIM} outcomes, got {m}")
    if grid_step > 1e-2:
        raise InvariantError("grid_step must be at most 1e-2")
    kl = Divergence(spec.divergence) is Divergence.KL
    if kl:
        # a finite KL divergence keeps q at zero wherever p is zero
        p, v = p[p > 0], v[p > 0]
        m = p.size
    best = float(np.dot(p, v))
    if m == 1:
        return float(v[0])
    K = int(round(1.0 / grid_step))
    outer = _pruned_grid(p, K, rho, kl) / K  # (N, m-2)
    vals, outer = _line_solve(p, v, outer, rho, kl, bisect_iter)
    if vals.size == 0:
        return best
    k = int(np.argmin(vals))
    best = min(best, float(vals[k]))
    center, step = outer[k], grid_step
    for _ in range(zoom_levels if m > 2 else 0):
        step /= zoom_factor
        for _ in range(max_moves):
            vals, pts = _line_solve(p, v, _local_grid(center, step, zoom_factor), rho, kl, bisect_iter)
            k = int(np.argmin(vals)) if vals.size else -1
            if k < 0 or vals[k] >= best:
                break
            best, center = float(vals[k]), pts[k]
    return best
