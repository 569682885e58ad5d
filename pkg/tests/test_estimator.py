import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from p2mpo import P2MPO, InvariantError, confidence_region, generate, optimize, reference_model
from p2mpo.experiments import mixed_behavior


@pytest.fixture(scope="module")
def setup():
    m = reference_model()
    return m, generate(m, mixed_behavior(m), 512, 0)


def test_fit_matches_optimize(setup):
    m, data = setup
    est = P2MPO(rho=0.1).fit(data, m.rewards)
    res = optimize(m.rewards, confidence_region(data), m.robust)
    assert est.policy_.equals(res.policy)
    assert est.pessimistic_value() == pytest.approx(res.values.v[0, 0], abs=1e-12)
    rows = np.array([[h, s] for h in range(m.horizon) for s in range(m.num_states)])
    np.testing.assert_array_equal(est.predict(rows), res.policy.greedy_actions().ravel())


def test_params_and_clone():
    est = P2MPO(divergence="kl", rho=0.2, method="mle_greedy")
    assert est.get_params()["rho"] == 0.2
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    assert twin.set_params(rho=0.3).rho == 0.3


def test_unfitted_predict():
    with pytest.raises(NotFittedError):
        P2MPO().predict([[0, 0]])


def test_bad_inputs(setup):
    m, data = setup
    with pytest.raises(InvariantError):
        P2MPO().fit(data, np.zeros((2, 2, 2)))
    est = P2MPO().fit(data, m.rewards)
    with pytest.raises(InvariantError):
        est.predict([[0, 9]])
    with pytest.raises(InvariantError):
        est.predict([[0, 1, 2]])


@pytest.mark.parametrize("method", ["p2mpo", "mle_greedy", "single_pessimism"])
def test_every_method_fits(setup, method):
    m, data = setup
    est = P2MPO(method=method).fit(data, m.rewards)
    assert 0.0 <= est.pessimistic_value() <= m.horizon
