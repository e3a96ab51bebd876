import logging
import math
from dataclasses import dataclass
from typing import Any, Optional, Tuple, Union

import numpy as np
import torch

from .diffnet import DTYPE, ParamVector, jacobian, vectorize
from .errors import ContractViolationError, NumericalConditioningError

# Configure logging
logger = logging.getLogger(__name__)

ORTHONORMAL_TOL = 1e-8

# Stream id of the random projection under its seed, apart from the weight init stream
PROJECTION_STREAM = 13

# Jitter escalation: 1e-10 * mean(diag) up to 1e-4 * mean(diag), x10 each step
JITTER_EXPONENTS = range(-10, -3)


@dataclass(frozen=True)
class IdentityCovariance:
    """Sigma = I_P"""
    pass


@dataclass(frozen=True, eq=False)
class LowRankCovariance:
    """Sigma = Q^T diag(s_vec^2) Q with orthonormal rows in Q (s x P)"""
    Q: torch.Tensor
    s_vec: torch.Tensor

    def __post_init__(self):
        Q = torch.as_tensor(self.Q, dtype=DTYPE)
        s_vec = torch.as_tensor(self.s_vec, dtype=DTYPE)
        if Q.ndim != 2 or Q.shape[0] < 1 or Q.shape[0] > Q.shape[1]:
            raise ContractViolationError(f"Q must be s x P with 1 <= s <= P, got {tuple(Q.shape)}")
        if s_vec.ndim != 1 or s_vec.shape[0] != Q.shape[0]:
            raise ContractViolationError(
                f"s_vec has shape {tuple(s_vec.shape)}, expected ({Q.shape[0]},)")
        gram = Q.detach() @ Q.detach().T
        deviation = (gram - torch.eye(Q.shape[0], dtype=DTYPE)).abs().max().item()
        if deviation > ORTHONORMAL_TOL:
            raise ContractViolationError(f"Rows of Q are not orthonormal (max deviation {deviation:.2e})")
        object.__setattr__(self, 'Q', Q)
        object.__setattr__(self, 's_vec', s_vec)

    @property
    def rank(self) -> int:
        return self.Q.shape[0]

    def dense(self) -> torch.Tensor:
        """Explicit P x P covariance (small P only)"""
        return self.Q.T @ torch.diag(self.s_vec ** 2) @ self.Q


CovarianceParam = Union[IdentityCovariance, LowRankCovariance]


@dataclass(frozen=True, eq=False)
class GaussianTaskPrior:
    """One GP over functions: linearization point, weight-prior mean and covariance, noise std"""
    theta0: ParamVector
    mu: torch.Tensor
    cov: CovarianceParam
    sigma_eps: float

    def __post_init__(self):
        mu = torch.as_tensor(self.mu, dtype=DTYPE)
        P = self.theta0.spec.param_count
        if mu.ndim != 1 or mu.shape[0] != P:
            raise ContractViolationError(f"mu has shape {tuple(mu.shape)}, expected ({P},)")
        if isinstance(self.cov, LowRankCovariance) and self.cov.Q.shape[1] != P:
            raise ContractViolationError(f"Q has {self.cov.Q.shape[1]} columns, expected {P}")
        if not isinstance(self.cov, (IdentityCovariance, LowRankCovariance)):
            raise ContractViolationError(f"Unknown covariance parameterization: {type(self.cov).__name__}")
        if not self.sigma_eps > 0:
            raise ContractViolationError(f"sigma_eps must be positive, got {self.sigma_eps}")
        object.__setattr__(self, 'mu', mu)


@dataclass(frozen=True, eq=False)
class PredictiveGaussian:
    """Gaussian over vectorized outputs (length N_y*K)"""
    mean: torch.Tensor
    cov: torch.Tensor
    has_covariance: bool = True
    cluster: Optional[int] = None

    def variance(self) -> torch.Tensor:
        return torch.clamp(torch.diagonal(self.cov), min=0.0)

    def std(self) -> torch.Tensor:
        return torch.sqrt(self.variance())


def kernel_from_jacobians(J1: torch.Tensor, J2: torch.Tensor, cov: CovarianceParam) -> torch.Tensor:
    """J1 Sigma J2^T without materializing Sigma"""
    if isinstance(cov, IdentityCovariance):
        return J1 @ J2.T
    projected1 = J1 @ cov.Q.T
    projected2 = projected1 if J2 is J1 else J2 @ cov.Q.T
    return (projected1 * cov.s_vec ** 2) @ projected2.T


def kernel(prior: GaussianTaskPrior, X1: Any, X2: Any) -> torch.Tensor:
    """k_Sigma(X1, X2) with the Jacobian feature map at theta0"""
    J1 = jacobian(prior.theta0, X1)
    J2 = J1 if X2 is X1 else jacobian(prior.theta0, X2)
    return kernel_from_jacobians(J1, J2, prior.cov)


def prior_moments(J: torch.Tensor, mu: torch.Tensor, cov: CovarianceParam,
                  sigma_eps: float) -> Tuple[torch.Tensor, torch.Tensor]:
    """Mean J mu and covariance J Sigma J^T + sigma_eps^2 I of the observations"""
    mean = J @ mu
    covariance = kernel_from_jacobians(J, J, cov)
    covariance = covariance + (sigma_eps ** 2) * torch.eye(J.shape[0], dtype=DTYPE)
    return mean, covariance


def prior_predictive(prior: GaussianTaskPrior, X: Any) -> PredictiveGaussian:
    J = jacobian(prior.theta0, X)
    mean, covariance = prior_moments(J, prior.mu, prior.cov, prior.sigma_eps)
    return PredictiveGaussian(mean, covariance)


def cholesky_with_jitter(A: torch.Tensor) -> Tuple[torch.Tensor, float]:
    """
    Lower Cholesky factor of a symmetric positive-definite matrix.

    On failure, adds jitter * mean(diag) to the diagonal with jitter escalating
    from 1e-10 to 1e-4.

    Returns:
        tuple: (factor, absolute jitter added, 0.0 when none was needed)
    """
    factor, info = torch.linalg.cholesky_ex(A)
    if int(info) == 0:
        return factor, 0.0

    scale = float(torch.diagonal(A).detach().mean())
    if not math.isfinite(scale) or scale <= 0:
        scale = 1.0
    identity = torch.eye(A.shape[0], dtype=A.dtype)
    attempted = []
    for exponent in JITTER_EXPONENTS:
        jitter = (10.0 ** exponent) * scale
        attempted.append(jitter)
        factor, info = torch.linalg.cholesky_ex(A + jitter * identity)
        if int(info) == 0:
            logger.warning(f"Cholesky needed jitter {jitter:.3e} on a {A.shape[0]}x{A.shape[0]} matrix")
            return factor, jitter

    raise NumericalConditioningError(
        f"Cholesky factorization failed on a {A.shape[0]}x{A.shape[0]} matrix after jitter escalation",
        jitter_levels=attempted)


def gaussian_nll(y: torch.Tensor, mean: torch.Tensor, covariance: torch.Tensor) -> torch.Tensor:
    """Negative log-density of y under N(mean, covariance)"""
    factor, _ = cholesky_with_jitter(covariance)
    residual = (y - mean).unsqueeze(-1)
    whitened = torch.linalg.solve_triangular(factor, residual, upper=False)
    logdet = 2.0 * torch.log(torch.diagonal(factor)).sum()
    return 0.5 * (whitened.pow(2).sum() + logdet + y.shape[0] * math.log(2.0 * math.pi))


def as_targets(Y: Any, length: int) -> torch.Tensor:
    """Accept N_y x K outputs or an already vectorized length N_y*K vector"""
    targets = torch.as_tensor(np.asarray(Y, dtype=np.float64) if not torch.is_tensor(Y) else Y, dtype=DTYPE)
    if targets.ndim == 2:
        targets = vectorize(targets)
    if targets.ndim != 1 or targets.shape[0] != length:
        raise ContractViolationError(f"Targets have shape {tuple(targets.shape)}, expected ({length},)")
    return targets


def nll_from_jacobian(J: torch.Tensor, y: torch.Tensor, mu: torch.Tensor,
                      cov: CovarianceParam, sigma_eps: float) -> torch.Tensor:
    mean, covariance = prior_moments(J, mu, cov, sigma_eps)
    return gaussian_nll(y, mean, covariance)


def nll(prior: GaussianTaskPrior, X: Any, Y: Any) -> torch.Tensor:
    """Joint NLL of the context labels under the prior predictive"""
    J = jacobian(prior.theta0, X)
    y = as_targets(Y, J.shape[0])
    return nll_from_jacobian(J, y, prior.mu, prior.cov, prior.sigma_eps)


def posterior_from_jacobians(Jc: torch.Tensor, yc: torch.Tensor, Jq: torch.Tensor, mu: torch.Tensor,
                             cov: CovarianceParam, sigma_eps: float) -> PredictiveGaussian:
    """GP conditioning on context features Jc; query covariance is noiseless"""
    k_cc = kernel_from_jacobians(Jc, Jc, cov) + (sigma_eps ** 2) * torch.eye(Jc.shape[0], dtype=DTYPE)
    k_qc = kernel_from_jacobians(Jq, Jc, cov)
    k_qq = kernel_from_jacobians(Jq, Jq, cov)

    factor, _ = cholesky_with_jitter(k_cc)
    cross = torch.linalg.solve_triangular(factor, k_qc.T, upper=False)
    residual = torch.linalg.solve_triangular(factor, (yc - Jc @ mu).unsqueeze(-1), upper=False)

    mean = Jq @ mu + (cross.T @ residual).squeeze(-1)
    covariance = k_qq - cross.T @ cross
    return PredictiveGaussian(mean, 0.5 * (covariance + covariance.T))


def posterior_predictive(prior: GaussianTaskPrior, Xc: Any, Yc: Any, Xq: Any) -> PredictiveGaussian:
    Jc = jacobian(prior.theta0, Xc)
    Jq = jacobian(prior.theta0, Xq)
    yc = as_targets(Yc, Jc.shape[0])
    return posterior_from_jacobians(Jc, yc, Jq, prior.mu, prior.cov, prior.sigma_eps)


def random_projection(P: int, s: int, seed: int) -> torch.Tensor:
    """Orthonormal-row s x P matrix from a seeded standard-normal draw"""
    if not 1 <= s <= P:
        raise ContractViolationError(f"Projection size s={s} must lie in [1, {P}]")
    rng = np.random.default_rng([seed, PROJECTION_STREAM])
    basis, _ = np.linalg.qr(rng.standard_normal((P, s)))
    return torch.as_tensor(basis.T.copy(), dtype=DTYPE)
