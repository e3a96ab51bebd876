import logging
import math
from dataclasses import dataclass
from typing import Any, List, Optional, Sequence

import numpy as np
import torch

from .diffnet import DTYPE, ParamVector, jacobian
from .errors import ContractViolationError
from .gp import (CovarianceParam, GaussianTaskPrior, IdentityCovariance, LowRankCovariance,
                 PredictiveGaussian, as_targets, nll_from_jacobian, posterior_from_jacobians)

# Configure logging
logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ClusterParams:
    """Per-cluster prior mean over weights and covariance scales"""
    mu: torch.Tensor
    s_vec: Optional[torch.Tensor] = None


@dataclass(frozen=True, eq=False)
class MixtureModel:
    """
    Equal-weighted mixture of GPs sharing theta0 and Q.

    Q = None stands for the identity prior covariance, which only makes sense for a
    single cluster: with the identity every cluster would get the same covariance function.
    """
    theta0: ParamVector
    Q: Optional[torch.Tensor]
    clusters: Sequence[ClusterParams]
    sigma_eps: float

    def __post_init__(self):
        clusters = tuple(self.clusters)
        if not clusters:
            raise ContractViolationError("A mixture needs at least one cluster")
        P = self.theta0.spec.param_count

        covariances: List[CovarianceParam] = []
        if self.Q is None:
            if len(clusters) != 1:
                raise ContractViolationError(
                    "Identity prior covariance supports a single cluster only "
                    "(all clusters would share one covariance function)")
            if clusters[0].s_vec is not None:
                raise ContractViolationError("Identity covariance takes no s_vec")
            covariances.append(IdentityCovariance())
        else:
            Q = torch.as_tensor(self.Q, dtype=DTYPE)
            object.__setattr__(self, 'Q', Q)
            for index, cluster in enumerate(clusters):
                if cluster.s_vec is None:
                    raise ContractViolationError(f"Cluster {index} is missing s_vec")
                covariances.append(LowRankCovariance(Q, cluster.s_vec))

        for index, cluster in enumerate(clusters):
            if tuple(torch.as_tensor(cluster.mu).shape) != (P,):
                raise ContractViolationError(f"Cluster {index} mu must have length {P}")

        object.__setattr__(self, 'clusters', clusters)
        object.__setattr__(self, '_covariances', tuple(covariances))

    @property
    def alpha(self) -> int:
        return len(self.clusters)

    def covariance(self, index: int) -> CovarianceParam:
        return self._covariances[index]

    def cluster_prior(self, index: int) -> GaussianTaskPrior:
        return GaussianTaskPrior(self.theta0, self.clusters[index].mu, self._covariances[index], self.sigma_eps)

    @classmethod
    def from_prior(cls, prior: GaussianTaskPrior) -> 'MixtureModel':
        """Single-cluster mixture equivalent to one GaussianTaskPrior"""
        if isinstance(prior.cov, IdentityCovariance):
            return cls(prior.theta0, None, (ClusterParams(prior.mu),), prior.sigma_eps)
        return cls(prior.theta0, prior.cov.Q, (ClusterParams(prior.mu, prior.cov.s_vec),), prior.sigma_eps)


def _nlls_from_jacobian(model: MixtureModel, J: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return torch.stack([
        nll_from_jacobian(J, y, cluster.mu, model.covariance(index), model.sigma_eps)
        for index, cluster in enumerate(model.clusters)
    ])


def combine_nlls(nlls: torch.Tensor) -> torch.Tensor:
    """log(alpha) - logsumexp(-NLL_1, ..., -NLL_alpha)"""
    if nlls.shape[0] == 1:
        return nlls[0]
    return math.log(nlls.shape[0]) - torch.logsumexp(-nlls, dim=0)


def mixture_nll_from_jacobian(model: MixtureModel, J: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mixture NLL of one task whose Jacobian at theta0 is already known"""
    return combine_nlls(_nlls_from_jacobian(model, J, y))


def cluster_nlls(model: MixtureModel, X: Any, Y: Any) -> torch.Tensor:
    """Per-cluster NLLs of (X, Y); one Jacobian evaluation shared by all clusters"""
    J = jacobian(model.theta0, X)
    y = as_targets(Y, J.shape[0])
    return _nlls_from_jacobian(model, J, y)


def mixture_nll(model: MixtureModel, X: Any, Y: Any) -> torch.Tensor:
    return combine_nlls(cluster_nlls(model, X, Y))


def _argmin(nlls: torch.Tensor) -> int:
    # np.argmin returns the first minimum: ties go to the smallest index
    return int(np.argmin(nlls.detach().cpu().numpy()))


def infer_cluster(model: MixtureModel, Xc: Any, Yc: Any) -> int:
    """Index of the cluster under which the context is most likely"""
    if model.alpha == 1:
        return 0
    return _argmin(cluster_nlls(model, Xc, Yc))


def predict(model: MixtureModel, Xc: Any, Yc: Any, Xq: Any) -> PredictiveGaussian:
    """Infer the cluster from the context, then condition that cluster's GP"""
    Jc = jacobian(model.theta0, Xc)
    yc = as_targets(Yc, Jc.shape[0])
    chosen = 0 if model.alpha == 1 else _argmin(_nlls_from_jacobian(model, Jc, yc))
    logger.debug(f"Context assigned to cluster {chosen} of {model.alpha}")

    Jq = jacobian(model.theta0, Xq)
    cluster = model.clusters[chosen]
    posterior = posterior_from_jacobians(Jc, yc, Jq, cluster.mu, model.covariance(chosen), model.sigma_eps)
    return PredictiveGaussian(posterior.mean, posterior.cov, cluster=chosen)
