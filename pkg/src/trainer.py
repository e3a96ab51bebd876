import logging
import math
from dataclasses import asdict, dataclass, fields, replace
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from config import defaults
from .checkpoint_store import PHASE_IDENTITY, PHASE_PROJECTED, Checkpoint, checkpoint_from_dict, checkpoint_to_dict
from .diffnet import DTYPE, Activation, NetworkSpec, ParamVector, init_params, jacobian
from .errors import ContractViolationError, NumericalConditioningError, TrainingAbortedError
from .fimsketch import fim_projection
from .gp import as_targets, random_projection
from .mixture import ClusterParams, MixtureModel, mixture_nll_from_jacobian
from .taskgen import TaskData

# Configure logging
logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

MOVING_AVERAGE_WINDOW = 500

# Variance of the random s_vec initialization for mixtures
MIXTURE_S_INIT_VAR = 0.5

# Checkpoint.data key holding the phase-boundary snapshot of a FIM run
BOUNDARY_KEY = 'boundary_checkpoint'

# Extra stream under the run seed for s_vec initialization
S_INIT_STREAM = 11


class Variant(str, Enum):
    IDENTITY = 'i'
    RANDOM = 'r'
    FIM = 'f'


def parse_variant(value: Any) -> Variant:
    try:
        return Variant(str(value).strip().lower())
    except ValueError:
        raise ContractViolationError(f"Unknown variant '{value}' (expected i, r or f)")


@dataclass(frozen=True)
class TrainConfig:
    variant: Variant = Variant.FIM
    alpha: int = 1
    epochs: int = 4000
    tasks_per_epoch: int = 24
    context_size: int = 10
    subspace_size: int = 10
    learning_rate: float = 1e-3
    sigma_eps: float = defaults.SIGMA_EPS
    seed: int = 0
    hidden_widths: Tuple[int, ...] = (40, 40)
    fim_tasks: int = defaults.FIM_AUX_TASKS
    fim_points_cap: int = defaults.FIM_AUX_POINTS_CAP
    log_every: int = 100
    checkpoint_every: int = 0
    proj_seed: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, 'variant', parse_variant(self.variant))
        object.__setattr__(self, 'hidden_widths', tuple(int(w) for w in self.hidden_widths))
        if self.variant == Variant.IDENTITY and self.alpha > 1:
            raise ContractViolationError(
                "Variant I cannot train a mixture: with the identity prior covariance every cluster "
                "would have an identical covariance function; use variant r or f")
        for name in ('alpha', 'epochs', 'tasks_per_epoch', 'context_size', 'subspace_size',
                     'fim_tasks', 'fim_points_cap', 'log_every'):
            if getattr(self, name) < 1:
                raise ContractViolationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.learning_rate < 0:
            raise ContractViolationError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if not self.sigma_eps > 0:
            raise ContractViolationError(f"sigma_eps must be positive, got {self.sigma_eps}")
        if self.checkpoint_every < 0:
            raise ContractViolationError(f"checkpoint_every must be non-negative, got {self.checkpoint_every}")
        if self.tasks_per_epoch % self.alpha:
            raise ContractViolationError(
                f"tasks_per_epoch={self.tasks_per_epoch} must split evenly over alpha={self.alpha} clusters")
        if self.variant == Variant.FIM and self.epochs < 2:
            raise ContractViolationError("Variant F needs at least 2 epochs (one per phase)")

    @property
    def phase1_epochs(self) -> int:
        """Epochs trained with the identity covariance before the FIM projection (variant F)"""
        return self.epochs // 2 if self.variant == Variant.FIM else 0

    def network_spec(self, input_dim: int = 1, output_dim: int = 1) -> NetworkSpec:
        return NetworkSpec((input_dim, *self.hidden_widths, output_dim), Activation.RELU)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['variant'] = self.variant.value
        data['hidden_widths'] = list(self.hidden_widths)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'TrainConfig':
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ContractViolationError(f"Unknown training options: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True, eq=False)
class AdamState:
    t: int
    m: Dict[str, torch.Tensor]
    v: Dict[str, torch.Tensor]

    @classmethod
    def zeros(cls, params: Dict[str, torch.Tensor]) -> 'AdamState':
        return cls(0, {name: torch.zeros_like(value) for name, value in params.items()},
                   {name: torch.zeros_like(value) for name, value in params.items()})

    def to_arrays(self) -> Dict[str, Any]:
        return {'t': self.t,
                'm': {name: value.numpy() for name, value in self.m.items()},
                'v': {name: value.numpy() for name, value in self.v.items()}}

    @classmethod
    def from_arrays(cls, data: Dict[str, Any]) -> 'AdamState':
        return cls(int(data['t']),
                   {name: torch.as_tensor(value, dtype=DTYPE) for name, value in data['m'].items()},
                   {name: torch.as_tensor(value, dtype=DTYPE) for name, value in data['v'].items()})


def adam_step(params: Dict[str, torch.Tensor], grads: Dict[str, torch.Tensor], state: AdamState,
              lr: float) -> Tuple[Dict[str, torch.Tensor], AdamState]:
    """
    One Adam update with bias correction

    Args:
        params (dict): Parameter tensors by name
        grads (dict): Gradients with the same names and shapes
        state (AdamState): Moments after the previous step
        lr (float): Learning rate

    Returns:
        tuple: (updated parameters, updated state)
    """
    if set(params) != set(grads) or set(params) != set(state.m):
        raise ContractViolationError(f"Adam state covers {sorted(state.m)}, got params {sorted(params)}")
    t = state.t + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, value in params.items():
        grad = grads[name]
        if grad.shape != value.shape or state.m[name].shape != value.shape:
            raise ContractViolationError(f"Shape mismatch for '{name}' in Adam step")
        m = ADAM_BETA1 * state.m[name] + (1.0 - ADAM_BETA1) * grad
        v = ADAM_BETA2 * state.v[name] + (1.0 - ADAM_BETA2) * grad * grad
        m_hat = m / (1.0 - ADAM_BETA1 ** t)
        v_hat = v / (1.0 - ADAM_BETA2 ** t)
        new_params[name] = value - lr * m_hat / (torch.sqrt(v_hat) + ADAM_EPS)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(t, new_m, new_v)


def build_model(params: Dict[str, torch.Tensor], spec: NetworkSpec, Q: Optional[torch.Tensor],
                sigma_eps: float) -> MixtureModel:
    """MixtureModel over the trainable tensors; Q = None means the identity covariance"""
    mu = params['mu']
    s_vec = params.get('s')
    clusters = [ClusterParams(mu[j], None if s_vec is None else s_vec[j]) for j in range(mu.shape[0])]
    return MixtureModel(ParamVector(params['theta0'], spec), Q, clusters, sigma_eps)


def loss_and_grad(params: Dict[str, torch.Tensor], tasks: Sequence[TaskData], spec: NetworkSpec,
                  Q: Optional[torch.Tensor], sigma_eps: float) -> Tuple[float, Dict[str, torch.Tensor]]:
    """
    Summed NLL of a task batch and its gradient over theta0, mu and (when present) s.

    One Jacobian is evaluated for the whole batch and split per task. Gradients reach theta0
    through the Jacobian feature map; Q is a constant.
    """
    if not tasks:
        raise ContractViolationError("Empty task batch")
    leaves = {name: value.detach().clone().requires_grad_(True) for name, value in params.items()}
    model = build_model(leaves, spec, Q, sigma_eps)

    inputs = np.concatenate([np.asarray(task.X, dtype=np.float64).reshape(spec.input_dim, -1) for task in tasks],
                            axis=1)
    J = jacobian(model.theta0, inputs)

    loss = torch.zeros((), dtype=DTYPE)
    offset = 0
    for task in tasks:
        rows = np.asarray(task.X).reshape(spec.input_dim, -1).shape[1] * spec.output_dim
        J_task = J[offset:offset + rows]
        offset += rows
        loss = loss + mixture_nll_from_jacobian(model, J_task, as_targets(task.Y, rows))

    names = list(leaves)
    grads = torch.autograd.grad(loss, [leaves[name] for name in names], allow_unused=True)
    gradients = {name: torch.zeros_like(leaves[name]) if grad is None else grad.detach()
                 for name, grad in zip(names, grads)}
    return float(loss.detach()), gradients


def moving_average(trace: Sequence[Tuple[int, float]], window: int = MOVING_AVERAGE_WINDOW) -> np.ndarray:
    """Trailing mean of the NLL values over the last `window` recorded epochs"""
    values = np.array([value for _, value in trace], dtype=np.float64)
    if values.size == 0:
        return values
    cumulative = np.concatenate([[0.0], np.cumsum(values)])
    ends = np.arange(1, values.size + 1)
    starts = np.maximum(0, ends - window)
    return (cumulative[ends] - cumulative[starts]) / (ends - starts)


@dataclass(frozen=True, eq=False)
class TrainResult:
    checkpoint: Checkpoint
    nll_trace: List[Tuple[int, float]]
    boundary_checkpoint: Optional[Checkpoint] = None


class MetaTrainer:
    """
    Owns the mutable meta-training state: parameters, Adam moments, epoch, phase, Q and
    the datasets' generator states. One dataset per cluster; each epoch draws
    tasks_per_epoch / alpha tasks from every cluster's dataset.
    """

    def __init__(self, config: TrainConfig, datasets: Sequence[Any]):
        if len(datasets) != config.alpha:
            raise ContractViolationError(f"Need one dataset per cluster: alpha={config.alpha}, got {len(datasets)}")
        self.config = config
        self.datasets = list(datasets)
        self.spec = config.network_spec()
        self.P = self.spec.param_count
        if config.variant != Variant.IDENTITY and not config.subspace_size <= self.P:
            raise ContractViolationError(f"Subspace size s={config.subspace_size} exceeds P={self.P}")
        if config.variant == Variant.FIM and 6 * config.subspace_size + 4 > self.P:
            raise ContractViolationError(
                f"Subspace size s={config.subspace_size} too large for the FIM sketch with P={self.P}")

        self.epoch = 0
        self.nll_trace: List[Tuple[int, float]] = []
        self.consecutive_failures = 0
        self.eigenvalues: Optional[np.ndarray] = None
        self.fim_points: Optional[int] = None
        self.boundary_checkpoint: Optional[Checkpoint] = None

        theta0 = init_params(self.spec, config.seed).values
        if config.variant == Variant.RANDOM:
            projection_seed = config.seed if config.proj_seed is None else config.proj_seed
            self.Q = random_projection(self.P, config.subspace_size, projection_seed)
            self.phase = PHASE_PROJECTED
            self.params = {'theta0': theta0,
                           'mu': torch.zeros(config.alpha, self.P, dtype=DTYPE),
                           's': self._initial_s()}
        else:
            self.Q = None
            self.phase = PHASE_IDENTITY
            self.params = {'theta0': theta0, 'mu': torch.zeros(1, self.P, dtype=DTYPE)}
        self.adam = AdamState.zeros(self.params)

    def _initial_s(self) -> torch.Tensor:
        config = self.config
        if config.alpha == 1:
            return torch.ones(1, config.subspace_size, dtype=DTYPE)
        # identical clusters would receive identical gradients and never separate
        rng = np.random.default_rng([config.seed, S_INIT_STREAM])
        draws = rng.normal(0.0, math.sqrt(MIXTURE_S_INIT_VAR), size=(config.alpha, config.subspace_size))
        return torch.as_tensor(draws, dtype=DTYPE)

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint, datasets: Sequence[Any]) -> 'MetaTrainer':
        """Restore parameters, optimizer, phase and generator states for a bit-exact resume"""
        if checkpoint.model_kind != 'unlimitd':
            raise ContractViolationError(f"Cannot resume UnLiMiTD training from a {checkpoint.model_kind} checkpoint")
        trainer = cls(TrainConfig.from_dict(checkpoint.config), datasets)
        if checkpoint.network != trainer.spec:
            raise ContractViolationError("Checkpoint network does not match its training config")
        trainer.epoch = checkpoint.epoch
        trainer.phase = checkpoint.phase
        trainer.nll_trace = list(checkpoint.nll_trace)
        trainer.consecutive_failures = checkpoint.consecutive_failures
        trainer.fim_points = checkpoint.fim_points
        trainer.eigenvalues = checkpoint.eigenvalues
        trainer.Q = None if checkpoint.Q is None else torch.as_tensor(checkpoint.Q, dtype=DTYPE)
        trainer.params = {'theta0': torch.as_tensor(checkpoint.theta0, dtype=DTYPE),
                          'mu': torch.as_tensor(checkpoint.mu, dtype=DTYPE)}
        if checkpoint.s_vec is not None:
            trainer.params['s'] = torch.as_tensor(checkpoint.s_vec, dtype=DTYPE)
        trainer.adam = AdamState.from_arrays(checkpoint.adam)
        if checkpoint.data.get(BOUNDARY_KEY) is not None:
            trainer.boundary_checkpoint = checkpoint_from_dict(checkpoint.data[BOUNDARY_KEY])
        if len(checkpoint.rng_states) != len(datasets):
            raise ContractViolationError("Checkpoint generator states do not match the datasets")
        for dataset, state in zip(trainer.datasets, checkpoint.rng_states):
            dataset.set_state(state)
        logger.info(f"Resuming {trainer.config.variant.value.upper()} training at epoch {trainer.epoch} "
                    f"({trainer.phase} phase)")
        return trainer

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            model_kind='unlimitd',
            network=self.spec,
            theta0=self.params['theta0'].numpy().copy(),
            sigma_eps=self.config.sigma_eps,
            epoch=self.epoch,
            phase=self.phase,
            config=self.config.to_dict(),
            variant=self.config.variant.value,
            mu=self.params['mu'].numpy().copy(),
            Q=None if self.Q is None else self.Q.numpy().copy(),
            s_vec=self.params['s'].numpy().copy() if 's' in self.params else None,
            eigenvalues=None if self.eigenvalues is None else np.array(self.eigenvalues),
            adam=self.adam.to_arrays(),
            rng_states=[dataset.get_state() for dataset in self.datasets],
            nll_trace=list(self.nll_trace),
            consecutive_failures=self.consecutive_failures,
            fim_points=self.fim_points,
            data=({} if self.boundary_checkpoint is None
                  else {BOUNDARY_KEY: checkpoint_to_dict(self.boundary_checkpoint)}),
        )

    def _fim_task_inputs(self) -> List[np.ndarray]:
        finite = [dataset for dataset in self.datasets if dataset.mode == 'finite']
        if finite:
            return [X for dataset in finite for X in dataset.fim_inputs(self.P)]
        return self.datasets[0].fim_inputs(self.P, self.config.fim_tasks, self.config.fim_points_cap)

    def _enter_projected_phase(self) -> None:
        """Freeze Q from the FIM at the intermediate theta0 and give every cluster the intermediate mu"""
        config = self.config
        self.boundary_checkpoint = self.checkpoint()
        task_inputs = self._fim_task_inputs()
        self.fim_points = int(task_inputs[0].shape[1])
        logger.info(f"Phase boundary at epoch {self.epoch}: sketching FIM over {len(task_inputs)} tasks "
                    f"({self.fim_points} points each)")
        basis = fim_projection(ParamVector(self.params['theta0'], self.spec), task_inputs,
                               config.subspace_size, config.seed)
        self.Q = basis.as_tensor()
        self.eigenvalues = basis.eigenvalues
        self.params = {'theta0': self.params['theta0'],
                       'mu': self.params['mu'][0].repeat(config.alpha, 1),
                       's': self._initial_s()}
        # s is a new parameter, so the optimizer starts over
        self.adam = AdamState.zeros(self.params)
        self.phase = PHASE_PROJECTED

    def _sample_batch(self) -> List[TaskData]:
        per_cluster = self.config.tasks_per_epoch // self.config.alpha
        tasks = []
        for dataset in self.datasets:
            tasks.extend(dataset.sample_tasks(per_cluster, self.config.context_size))
        return tasks

    def step(self) -> Optional[float]:
        """Run one epoch; returns the summed NLL, or None when the batch was skipped"""
        config = self.config
        if (config.variant == Variant.FIM and self.phase == PHASE_IDENTITY
                and self.epoch == config.phase1_epochs):
            self._enter_projected_phase()

        batch = self._sample_batch()
        self.epoch += 1
        try:
            loss, grads = loss_and_grad(self.params, batch, self.spec, self.Q, config.sigma_eps)
        except NumericalConditioningError as e:
            self.consecutive_failures += 1
            if self.consecutive_failures >= 2:
                logger.error(f"Aborting training at epoch {self.epoch}: two consecutive conditioning failures")
                raise TrainingAbortedError(f"Training aborted at epoch {self.epoch}: {str(e)}",
                                           jitter_levels=e.jitter_levels)
            logger.warning(f"Skipping batch at epoch {self.epoch}: {str(e)}")
            return None

        self.consecutive_failures = 0
        self.params, self.adam = adam_step(self.params, grads, self.adam, config.learning_rate)
        self.nll_trace.append((self.epoch, loss))
        return loss

    def run(self, on_checkpoint: Optional[Callable[[Checkpoint], Any]] = None) -> TrainResult:
        """Train until config.epochs, calling on_checkpoint every checkpoint_every epochs"""
        config = self.config
        logger.info(f"Training UnLiMiTD-{config.variant.value.upper()} (alpha={config.alpha}, P={self.P}) "
                    f"for {config.epochs} epochs starting at {self.epoch}")
        while self.epoch < config.epochs:
            self.step()
            if self.epoch % config.log_every == 0 and self.nll_trace:
                smoothed = moving_average(self.nll_trace)[-1]
                logger.info(f"Epoch {self.epoch}/{config.epochs}: NLL {self.nll_trace[-1][1]:.4f} "
                            f"(moving average {smoothed:.4f})")
            if on_checkpoint is not None and config.checkpoint_every and self.epoch % config.checkpoint_every == 0:
                on_checkpoint(self.checkpoint())

        return TrainResult(self.checkpoint(), list(self.nll_trace), self.boundary_checkpoint)


def _require(config: TrainConfig, variant: Variant, single: bool = True) -> None:
    if config.variant != variant:
        raise ContractViolationError(f"Expected variant {variant.value}, got {config.variant.value}")
    if single and config.alpha != 1:
        raise ContractViolationError("Use train_mixture for alpha > 1")


def train_unlimitd_i(config: TrainConfig, dataset: Any) -> TrainResult:
    """Identity prior covariance: updates theta0 and mu"""
    _require(config, Variant.IDENTITY)
    return MetaTrainer(config, [dataset]).run()


def train_unlimitd_r(config: TrainConfig, dataset: Any) -> TrainResult:
    """Random orthonormal projection Q: updates theta0, mu and s"""
    _require(config, Variant.RANDOM)
    return MetaTrainer(config, [dataset]).run()


def train_unlimitd_f(config: TrainConfig, dataset: Any) -> TrainResult:
    """Identity phase, FIM projection at the intermediate theta0, then the projected phase"""
    _require(config, Variant.FIM)
    return MetaTrainer(config, [dataset]).run()


def train_mixture(config: TrainConfig, datasets: Sequence[Any]) -> TrainResult:
    """Mixture of alpha GPs sharing theta0 and Q, trained on the unlabeled mixture NLL"""
    if config.alpha < 2:
        raise ContractViolationError(f"train_mixture needs alpha >= 2, got {config.alpha}")
    if config.variant == Variant.IDENTITY:
        raise ContractViolationError("Mixtures need variant r or f")
    return MetaTrainer(config, datasets).run()


def train(config: TrainConfig, datasets: Sequence[Any],
          on_checkpoint: Optional[Callable[[Checkpoint], Any]] = None,
          resume: Optional[Checkpoint] = None) -> TrainResult:
    """Dispatch on variant and cluster count, optionally resuming from a checkpoint"""
    trainer = MetaTrainer.from_checkpoint(resume, datasets) if resume is not None else MetaTrainer(config, datasets)
    return trainer.run(on_checkpoint)


def train_projection_seeds(config: TrainConfig, make_datasets: Callable[[], Sequence[Any]],
                           seeds: Sequence[int]) -> List[TrainResult]:
    """One UnLiMiTD-R model per projection seed, each on freshly built datasets"""
    if config.variant != Variant.RANDOM:
        raise ContractViolationError("Projection seeds only apply to variant r")
    results = []
    for seed in seeds:
        logger.info(f"Training with projection seed {seed}")
        results.append(MetaTrainer(replace(config, proj_seed=seed), make_datasets()).run())
    return results
