import logging
from dataclasses import dataclass
from typing import Any, Sequence, Tuple

import numpy as np
import torch

from .diffnet import DTYPE, ParamVector, jacobian
from .errors import ContractViolationError, SketchRankError

# Configure logging
logger = logging.getLogger(__name__)

DENSE_FIM_MAX_PARAMS = 500
RANK_TOL = 1e-12

# Stream ids under the sketch seed; Psi also takes the redraw attempt
OMEGA_STREAM, PSI_STREAM = 21, 22


@dataclass(eq=False)
class SketchPair:
    """
    Streaming sketches of the dataset FIM.

    Y = F Omega^T (P x k) and W = Psi F (l x P) are accumulated task by task from
    factored products, so the P x P FIM never exists in memory.
    """
    Omega: np.ndarray
    Psi: np.ndarray
    Y: np.ndarray
    W: np.ndarray
    s: int
    seed: int
    psi_attempt: int = 0
    tasks_seen: int = 0

    @property
    def k(self) -> int:
        return self.Omega.shape[0]

    @property
    def l(self) -> int:
        return self.Psi.shape[0]

    @property
    def P(self) -> int:
        return self.Omega.shape[1]


@dataclass(frozen=True, eq=False)
class ProjectionBasis:
    """Orthonormal rows spanning the approximate top-s FIM eigenspace, with eigenvalue estimates"""
    Q: np.ndarray
    eigenvalues: np.ndarray

    def as_tensor(self) -> torch.Tensor:
        return torch.as_tensor(self.Q, dtype=DTYPE)


def sketch_sizes(s: int) -> Tuple[int, int]:
    """Sketch budget k = 2s + 1, l = 4s + 3"""
    return 2 * s + 1, 4 * s + 3


def _as_numpy(J: Any) -> np.ndarray:
    if torch.is_tensor(J):
        return J.detach().cpu().numpy().astype(np.float64, copy=False)
    return np.asarray(J, dtype=np.float64)


def init_sketch(P: int, s: int, seed: int, psi_attempt: int = 0) -> SketchPair:
    """Draw Omega and Psi from seeded streams and zero the accumulators"""
    if s < 1 or 6 * s + 4 > P:
        raise ContractViolationError(f"Subspace size s={s} too large for P={P} (need 1 <= s and 6s + 4 <= P)")
    k, l = sketch_sizes(s)
    # Omega and Psi come from separate streams so Psi can be redrawn alone
    omega = np.random.default_rng([seed, OMEGA_STREAM]).standard_normal((k, P))
    psi = np.random.default_rng([seed, PSI_STREAM, psi_attempt]).standard_normal((l, P))
    return SketchPair(Omega=omega, Psi=psi, Y=np.zeros((P, k)), W=np.zeros((l, P)),
                      s=s, seed=seed, psi_attempt=psi_attempt)


def update_sketch(sk: SketchPair, J_i: Any, N: int) -> None:
    """Accumulate task i's contribution (1/N) J_i^T J_i into both sketches"""
    J = _as_numpy(J_i)
    if J.ndim != 2 or J.shape[1] != sk.P:
        raise ContractViolationError(f"Jacobian has shape {J.shape}, expected (rows, {sk.P})")
    if N < 1:
        raise ContractViolationError(f"Task count N must be positive, got {N}")
    sk.Y += ((sk.Omega @ J.T) @ J).T / N
    sk.W += ((sk.Psi @ J.T) @ J) / N
    sk.tasks_seen += 1


def fixed_rank_sym_approx(sk: SketchPair, s: int) -> ProjectionBasis:
    """
    Top-s eigenpairs of the sketched symmetric PSD matrix.

    Orthonormalizes the range sketch Y into U, recovers the core C = U^T F U from the
    co-range sketch by least squares on (Psi U) C = W U, symmetrizes and eigendecomposes it.
    """
    if sk.tasks_seen < 1:
        raise ContractViolationError("Sketch has not accumulated any task")
    if not 1 <= s <= sk.k:
        raise ContractViolationError(f"Requested s={s} outside [1, {sk.k}]")

    U, _ = np.linalg.qr(sk.Y)
    core_lhs = sk.Psi @ U
    singular = np.linalg.svd(core_lhs, compute_uv=False)
    if singular[0] == 0 or singular[-1] <= RANK_TOL * singular[0]:
        raise SketchRankError(f"Psi U is rank deficient (condition {singular[0] / max(singular[-1], 1e-300):.2e})")

    core, _, _, _ = np.linalg.lstsq(core_lhs, sk.W @ U, rcond=None)
    core = 0.5 * (core + core.T)
    eigvals, eigvecs = np.linalg.eigh(core)

    # eigh sorts ascending
    order = np.arange(len(eigvals) - 1, len(eigvals) - 1 - s, -1)
    directions = U @ eigvecs[:, order]
    basis, triangular = np.linalg.qr(directions)
    signs = np.sign(np.diag(triangular))
    signs[signs == 0] = 1.0
    basis = basis * signs

    eigenvalues = np.clip(eigvals[order], 0.0, None)
    return ProjectionBasis(Q=np.ascontiguousarray(basis.T), eigenvalues=eigenvalues)


def dense_fim(theta0: ParamVector, task_inputs: Sequence[Any]) -> np.ndarray:
    """(1/N) sum_i J_i^T J_i, explicit P x P; for checking the sketch on small networks"""
    P = theta0.spec.param_count
    if P > DENSE_FIM_MAX_PARAMS:
        raise ContractViolationError(f"Dense FIM refused for P={P} > {DENSE_FIM_MAX_PARAMS}")
    if not task_inputs:
        raise ContractViolationError("Dense FIM needs at least one task")
    fim = np.zeros((P, P))
    with torch.no_grad():
        for X in task_inputs:
            J = _as_numpy(jacobian(theta0.detach(), X))
            fim += J.T @ J
    return fim / len(task_inputs)


def fim_projection(theta0: ParamVector, task_inputs: Sequence[Any], s: int, seed: int) -> ProjectionBasis:
    """Sketch the dataset FIM at theta0 over every task's inputs and extract Q"""
    P = theta0.spec.param_count
    N = len(task_inputs)
    if N < 1:
        raise ContractViolationError("FIM projection needs at least one task")
    theta = theta0.detach()

    for attempt in (0, 1):
        sketch = init_sketch(P, s, seed, psi_attempt=attempt)
        with torch.no_grad():
            for X in task_inputs:
                update_sketch(sketch, jacobian(theta, X), N)
        try:
            basis = fixed_rank_sym_approx(sketch, s)
            logger.info(f"FIM projection over {N} tasks: top eigenvalues {np.round(basis.eigenvalues[:3], 4).tolist()}")
            return basis
        except SketchRankError as e:
            if attempt == 1:
                logger.error(f"FIM sketch still rank deficient after redrawing Psi: {str(e)}")
                raise
            logger.warning(f"FIM sketch rank deficient, redrawing Psi: {str(e)}")
