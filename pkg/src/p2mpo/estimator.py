"""Scikit-learn style wrapper: fit on an offline dataset, predict actions."""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from ._validation import InvariantError
from .estimation import confidence_region
from .model import RobustSpec
from .pessimism import baseline_policy, doubly_pessimistic_evaluate


class P2MPO(BaseEstimator):
    """Doubly pessimistic offline policy learner for tabular robust MDPs.

    ``fit(data, rewards)`` takes an ``OfflineDataset`` and the known reward
    table ``(H, S, A)``. ``predict`` maps rows ``(h, s)`` to actions.
    ``method`` selects the full learner or one of the two ablations
    (``"mle_greedy"``, ``"single_pessimism"``).
    """

    def __init__(self, divergence="tv", rho=0.1, delta=0.1, C1=1.0, C2=1.0, c_dec=2.0,
                 lambda_floor=1e-6, method="p2mpo"):
        self.divergence = divergence
        self.rho = rho
        self.delta = delta
        self.C1 = C1
        self.C2 = C2
        self.c_dec = c_dec
        self.lambda_floor = lambda_floor
        self.method = method

    def _robust(self):
        return RobustSpec(self.divergence, self.rho, self.lambda_floor)

    def fit(self, X, y):
        rewards = np.asarray(y, dtype=np.float64)
        if rewards.shape != (X.horizon, X.num_states, X.num_actions):
            raise InvariantError(f"rewards must have shape {(X.horizon, X.num_states, X.num_actions)}")
        constants = {"C1": self.C1, "C2": self.C2, "c_dec": self.c_dec}
        self.robust_ = self._robust()
        self.region_ = confidence_region(X, self.delta, **constants)
        self.rewards_ = rewards
        self.policy_ = baseline_policy(self.method, X, rewards, self.robust_, self.delta, constants, region=self.region_)
        self.values_ = doubly_pessimistic_evaluate(rewards, self.region_, self.robust_, self.policy_)
        return self

    def predict(self, X):
        check_is_fitted(self, "policy_")
        X = check_array(X, dtype=np.int64)
        if X.shape[1] != 2:
            raise InvariantError("predict expects rows (h, s)")
        H, S, _ = self.policy_.probs.shape
        h, s = X[:, 0], X[:, 1]
        if h.min() < 0 or h.max() >= H or s.min() < 0 or s.max() >= S:
            raise InvariantError("(h, s) out of range")
        return self.policy_.greedy_actions()[h, s]

    def pessimistic_value(self, initial_state=0):
        check_is_fitted(self, "values_")
        return float(self.values_.v[0, initial_state])
