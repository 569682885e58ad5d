"""Command line front end.

Exit codes: 0 on success, 2 on invalid input or a broken invariant, 3 on
I/O errors.
"""

import argparse
import json
import sys
from dataclasses import asdict

import numpy as np

from . import __version__
from .data import RNG_VERSION, generate, load_dataset, save_dataset
from .dp import robust_plan
from .duals import dual_inf
from .estimation import confidence_region
from .experiments import ExperimentConfig, mixed_behavior, run_rate_experiment
from .model import (
    FactoredRMDP,
    LinearRMDP,
    ModelDims,
    RobustSpec,
    dumps,
    expand_factored,
    linear_to_tabular,
    load_model,
    load_policy,
)
from .pessimism import optimize


def _write_json(obj, path):
    text = dumps(obj) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)


def load_dims(path, data=None):
    """Model dimensions plus the reward table from a dims file.

    The file holds ``num_states``, ``num_actions``, ``horizon`` and optionally
    ``initial_state`` and ``rewards``. A full model file also works. Without
    a reward table, rewards recorded in ``data`` are used and pairs never
    visited get reward 0.
    """
    with open(path) as fh:
        d = json.load(fh)
    try:
        dims = ModelDims(int(d["num_states"]), int(d["num_actions"]), int(d["horizon"]), int(d.get("initial_state", 0)))
    except KeyError as exc:
        raise ValueError(f"dims file is missing {exc}") from exc
    H, S, A = dims.horizon, dims.num_states, dims.num_actions
    if d.get("rewards") is not None:
        rewards = np.asarray(d["rewards"], dtype=np.float64)
        if rewards.size != H * S * A:
            raise ValueError(f"rewards hold {rewards.size} numbers, expected {H * S * A}")
        rewards = rewards.reshape(H, S, A)
    elif data is not None:
        rewards = np.zeros((H, S, A))
        for h in range(H):
            rewards[h, data.states[h], data.actions[h]] = data.rewards[h]
    else:
        raise ValueError("dims file has no rewards and no dataset was given")
    return dims, rewards


def _load_checked_data(args):
    data = load_dataset(args.data)
    dims, rewards = load_dims(args.model_dims, data)
    if (data.horizon, data.num_states, data.num_actions) != (dims.horizon, dims.num_states, dims.num_actions):
        raise ValueError("dataset dimensions disagree with the dims file")
    return data, dims, rewards


def _constants(args):
    return {"C1": args.C1, "C2": args.C2, "c_dec": args.c_dec}


def _as_tabular(m):
    if isinstance(m, FactoredRMDP):
        return expand_factored(m)
    if isinstance(m, LinearRMDP):
        return linear_to_tabular(m)
    return m


def cmd_plan(args):
    _write_json(robust_plan(load_model(args.model), n_jobs=args.n_jobs), args.out)


def cmd_gen_data(args):
    m = _as_tabular(load_model(args.model))
    pi_b = load_policy(args.behavior) if args.behavior else mixed_behavior(m, args.eps_mix)
    save_dataset(generate(m, pi_b, args.n, args.seed), args.out)


def cmd_estimate(args):
    data, _, _ = _load_checked_data(args)
    _write_json(confidence_region(data, args.delta, **_constants(args)), args.out)


def cmd_optimize(args):
    data, _, rewards = _load_checked_data(args)
    region = confidence_region(data, args.delta, **_constants(args))
    robust = RobustSpec(args.divergence, args.rho, args.lambda_floor)
    _write_json(optimize(rewards, region, robust).policy, args.out)


def cmd_duals_eval(args):
    spec = RobustSpec.from_dict(json.loads(args.spec))
    res = dual_inf(json.loads(args.p), json.loads(args.v), spec)
    _write_json(asdict(res), None)


def cmd_experiment_rate(args):
    cfg = ExperimentConfig.load(args.config)
    report = run_rate_experiment(cfg, n_jobs=args.n_jobs, out_dir=args.out_dir)
    slopes = report.summary()["slopes"]
    for method in report.methods:
        slope = slopes[method]["slope"]
        sys.stdout.write(f"{method}: slope={'n/a' if slope is None else f'{slope:.4f}'}\n")


def _add_region_flags(p):
    p.add_argument("--data", required=True)
    p.add_argument("--model-dims", required=True)
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--C1", type=float, default=1.0)
    p.add_argument("--C2", type=float, default=1.0)
    p.add_argument("--c-dec", type=float, default=2.0)
    p.add_argument("--out", default="-")


def build_parser():
    parser = argparse.ArgumentParser(prog="p2mpo", description="Doubly pessimistic robust offline RL.")
    parser.add_argument("--version", action="version", version=f"p2mpo {__version__} (rng {RNG_VERSION})")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="robust-optimal policy and values of a model")
    p.add_argument("--model", required=True)
    p.add_argument("--out", default="-")
    p.add_argument("--n-jobs", type=int, default=None)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("gen-data", help="sample an offline dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--behavior", help="policy JSON; defaults to the eps-mix of the robust-optimal policy")
    p.add_argument("--eps-mix", type=float, default=0.3)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("estimate", help="confidence region from a dataset")
    _add_region_flags(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("optimize", help="doubly pessimistic policy from a dataset")
    _add_region_flags(p)
    p.add_argument("--rho", type=float, required=True)
    p.add_argument("--divergence", choices=["tv", "kl"], default="tv")
    p.add_argument("--lambda-floor", type=float, default=1e-6)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("duals", help="one-step robust expectations")
    dsub = p.add_subparsers(dest="duals_command", required=True)
    q = dsub.add_parser("eval", help="evaluate the dual for one distribution and value vector")
    q.add_argument("--p", required=True, help="JSON list")
    q.add_argument("--v", required=True, help="JSON list")
    q.add_argument("--spec", required=True, help='JSON, e.g. {"divergence": "tv", "rho": 0.1}')
    q.set_defaults(func=cmd_duals_eval)

    p = sub.add_parser("experiment", help="experiment harness")
    esub = p.add_subparsers(dest="experiment_command", required=True)
    q = esub.add_parser("rate", help="suboptimality against dataset size")
    q.add_argument("--config", required=True)
    q.add_argument("--out-dir", required=True)
    q.add_argument("--n-jobs", type=int, default=None)
    q.set_defaults(func=cmd_experiment_rate)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        args.func(args)
    except OSError as exc:
        sys.stderr.write(f"p2mpo: I/O error: {exc}\n")
        return 3
    except ValueError as exc:
        sys.stderr.write(f"p2mpo: {exc}\n")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
