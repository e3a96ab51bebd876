import math

import numpy as np
import pytest
import torch

from src.diffnet import DTYPE, ParamVector, jacobian
from src.errors import ContractViolationError
from src.gp import GaussianTaskPrior, IdentityCovariance, LowRankCovariance, nll, posterior_predictive, random_projection
from src.mixture import (ClusterParams, MixtureModel, cluster_nlls, combine_nlls, infer_cluster, mixture_nll,
                         mixture_nll_from_jacobian, predict)

SIGMA = 0.05
X_CONTEXT = np.array([[-1.0, 1.0, 2.0]])


@pytest.fixture
def line_and_constant(linear_spec):
    """Cluster 0 varies the slope, cluster 1 varies the offset"""
    theta0 = torch.zeros(2, dtype=DTYPE)
    clusters = [ClusterParams(torch.zeros(2, dtype=DTYPE), torch.tensor([1.0, 0.01], dtype=DTYPE)),
                ClusterParams(torch.zeros(2, dtype=DTYPE), torch.tensor([0.01, 3.0], dtype=DTYPE))]
    return MixtureModel(ParamVector(theta0, linear_spec), torch.eye(2, dtype=DTYPE), clusters, SIGMA)


def test_single_cluster_matches_plain_gp(small_theta, rng):
    P = small_theta.spec.param_count
    mu = torch.as_tensor(0.1 * rng.standard_normal(P), dtype=DTYPE)
    for cov in (IdentityCovariance(), LowRankCovariance(random_projection(P, 4, 0), torch.ones(4, dtype=DTYPE))):
        prior = GaussianTaskPrior(small_theta, mu, cov, SIGMA)
        X = rng.uniform(-5, 5, (1, 6))
        Y = rng.standard_normal((1, 6))
        model = MixtureModel.from_prior(prior)
        assert model.alpha == 1
        assert mixture_nll(model, X, Y).item() == nll(prior, X, Y).item()

        Xq = rng.uniform(-5, 5, (1, 4))
        expected = posterior_predictive(prior, X, Y, Xq)
        got = predict(model, X, Y, Xq)
        assert got.cluster == 0
        torch.testing.assert_close(got.mean, expected.mean, rtol=0, atol=0)
        torch.testing.assert_close(got.cov, expected.cov, rtol=0, atol=0)


def test_combine_nlls():
    equal = combine_nlls(torch.tensor([2.5, 2.5, 2.5], dtype=DTYPE))
    assert equal.item() == pytest.approx(2.5, abs=1e-12)
    separated = combine_nlls(torch.tensor([1.0, 1000.0], dtype=DTYPE))
    assert separated.item() == pytest.approx(1.0 + math.log(2.0), abs=1e-12)
    single = torch.tensor([7.0], dtype=DTYPE)
    assert combine_nlls(single).item() == 7.0


def test_mixture_nll_is_bounded_by_best_cluster(line_and_constant):
    Y = 2.0 * X_CONTEXT
    per_cluster = cluster_nlls(line_and_constant, X_CONTEXT, Y)
    total = mixture_nll(line_and_constant, X_CONTEXT, Y).item()
    best = per_cluster.min().item()
    assert best <= total <= best + math.log(2.0) + 1e-12


def test_mixture_nll_from_jacobian_matches(line_and_constant):
    Y = np.array([[0.3, -0.2, 1.1]])
    J = jacobian(line_and_constant.theta0, X_CONTEXT)
    from_jacobian = mixture_nll_from_jacobian(line_and_constant, J, torch.as_tensor(Y[0], dtype=DTYPE))
    assert from_jacobian.item() == pytest.approx(mixture_nll(line_and_constant, X_CONTEXT, Y).item(), rel=1e-14)


def test_infer_cluster_separates_lines_from_constants(line_and_constant):
    assert infer_cluster(line_and_constant, X_CONTEXT, 2.0 * X_CONTEXT) == 0
    assert infer_cluster(line_and_constant, X_CONTEXT, np.full((1, 3), 1.5)) == 1


def test_predict_reports_cluster_and_conditions_on_it(line_and_constant):
    result = predict(line_and_constant, X_CONTEXT, 2.0 * X_CONTEXT, np.array([[3.0]]))
    assert result.cluster == 0
    assert result.mean.item() == pytest.approx(6.0, abs=0.05)

    result = predict(line_and_constant, X_CONTEXT, np.full((1, 3), 1.5), np.array([[3.0]]))
    assert result.cluster == 1
    assert result.mean.item() == pytest.approx(1.5, abs=0.05)


def test_ties_go_to_the_first_cluster(linear_spec):
    same = ClusterParams(torch.zeros(2, dtype=DTYPE), torch.ones(2, dtype=DTYPE))
    model = MixtureModel(ParamVector(torch.zeros(2, dtype=DTYPE), linear_spec), torch.eye(2, dtype=DTYPE),
                         [same, same], SIGMA)
    assert infer_cluster(model, X_CONTEXT, X_CONTEXT) == 0


def test_identity_covariance_requires_single_cluster(small_theta):
    P = small_theta.spec.param_count
    clusters = [ClusterParams(torch.zeros(P, dtype=DTYPE)), ClusterParams(torch.ones(P, dtype=DTYPE))]
    with pytest.raises(ContractViolationError):
        MixtureModel(small_theta, None, clusters, SIGMA)


def test_mixture_rejects_inconsistent_clusters(small_theta):
    P = small_theta.spec.param_count
    Q = random_projection(P, 3, 1)
    with pytest.raises(ContractViolationError):
        MixtureModel(small_theta, Q, [ClusterParams(torch.zeros(P, dtype=DTYPE))], SIGMA)
    with pytest.raises(ContractViolationError):
        MixtureModel(small_theta, Q, [ClusterParams(torch.zeros(P - 1, dtype=DTYPE), torch.ones(3, dtype=DTYPE))],
                     SIGMA)
    with pytest.raises(ContractViolationError):
        MixtureModel(small_theta, Q, [], SIGMA)


def test_two_cluster_combination_example():
    value = combine_nlls(torch.tensor([1.0, 3.0], dtype=DTYPE)).item()
    assert value == pytest.approx(math.log(2.0) - math.log(math.exp(-1.0) + math.exp(-3.0)), abs=1e-12)
    assert value == pytest.approx(0.873, abs=5e-4)


def test_cluster_order_does_not_change_the_mixture(small_theta, rng):
    P = small_theta.spec.param_count
    Q = random_projection(P, 4, 2)
    clusters = [ClusterParams(torch.as_tensor(0.3 * rng.standard_normal(P), dtype=DTYPE),
                              torch.as_tensor(rng.uniform(0.2, 2.0, 4), dtype=DTYPE)) for _ in range(3)]
    order = [2, 0, 1]
    model = MixtureModel(small_theta, Q, clusters, SIGMA)
    permuted = MixtureModel(small_theta, Q, [clusters[i] for i in order], SIGMA)
    for _ in range(5):
        X = rng.uniform(-5, 5, (1, 6))
        Y = rng.standard_normal((1, 6))
        Xq = rng.uniform(-5, 5, (1, 3))
        assert mixture_nll(permuted, X, Y).item() == pytest.approx(mixture_nll(model, X, Y).item(), rel=1e-12)
        assert order[infer_cluster(permuted, X, Y)] == infer_cluster(model, X, Y)
        torch.testing.assert_close(predict(permuted, X, Y, Xq).mean, predict(model, X, Y, Xq).mean,
                                   rtol=0, atol=0)
