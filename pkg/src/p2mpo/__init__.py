"""Robust offline reinforcement learning with doubly pessimistic planning."""

__version__ = "0.1.0"

from ._validation import InvariantError
from .data import (
    RNG_VERSION,
    OfflineDataset,
    coverage_coefficient,
    generate,
    load_dataset,
    save_dataset,
    visitation,
)
from .dp import (
    PlanResult,
    factored_robust_backup,
    linear_robust_backup,
    nominal_evaluate,
    robust_evaluate,
    robust_plan,
    suboptimality,
)
from .duals import DualResult, brute_force_inf, dual_inf, kl_dual_inf, tv_dual_inf, tv_primal_inf
from .estimation import (
    ConfidenceRegion,
    FactoredConfidenceRegion,
    LinearConfidenceRegion,
    confidence_region,
    empirical_estimate,
    factored_confidence_region,
    linear_confidence_check,
    ridge_estimate,
    xi_schedule,
)
from .estimator import P2MPO
from .experiments import ExperimentConfig, RateReport, emit_report, load_report, reference_model, run_rate_experiment
from .model import (
    Divergence,
    FactoredRMDP,
    LinearRMDP,
    Policy,
    RobustSpec,
    TabularRMDP,
    ValueTable,
    load_model,
    save_model,
)
from .pessimism import doubly_pessimistic_backup, doubly_pessimistic_evaluate, optimize, run_p2mpo
