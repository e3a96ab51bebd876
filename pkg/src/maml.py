import logging
from dataclasses import asdict, dataclass, fields
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import torch

from config import defaults
from .checkpoint_store import PHASE_MAML, Checkpoint
from .diffnet import DTYPE, Activation, NetworkSpec, ParamVector, forward, init_params, vectorize
from .errors import CheckpointError, ContractViolationError
from .gp import as_targets
from .taskgen import Episode
from .trainer import AdamState, adam_step, moving_average

# Configure logging
logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MamlConfig:
    inner_lr: float = 1e-3
    inner_steps_train: int = 5
    inner_steps_test: int = 10
    meta_lr: float = 1e-3
    epochs: int = 4000
    tasks_per_epoch: int = 24
    context_size: int = 10
    query_size: int = 10
    seed: int = 0
    alpha: int = 1
    hidden_widths: Tuple[int, ...] = (40, 40)
    log_every: int = 100
    checkpoint_every: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'hidden_widths', tuple(int(w) for w in self.hidden_widths))
        for name in ('epochs', 'tasks_per_epoch', 'context_size', 'query_size', 'alpha', 'log_every'):
            if getattr(self, name) < 1:
                raise ContractViolationError(f"{name} must be positive, got {getattr(self, name)}")
        # zero rates and zero steps are allowed: they leave the parameters untouched
        for name in ('inner_lr', 'meta_lr', 'inner_steps_train', 'inner_steps_test', 'checkpoint_every'):
            if getattr(self, name) < 0:
                raise ContractViolationError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.tasks_per_epoch % self.alpha:
            raise ContractViolationError(
                f"tasks_per_epoch={self.tasks_per_epoch} must split evenly over alpha={self.alpha} clusters")

    def network_spec(self, input_dim: int = 1, output_dim: int = 1) -> NetworkSpec:
        return NetworkSpec((input_dim, *self.hidden_widths, output_dim), Activation.RELU)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['hidden_widths'] = list(self.hidden_widths)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'MamlConfig':
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ContractViolationError(f"Unknown MAML options: {sorted(unknown)}")
        return cls(**data)


def mse_loss(theta: ParamVector, X: Any, Y: Any) -> torch.Tensor:
    """Mean squared error of the network over every output entry"""
    outputs = vectorize(forward(theta, X))
    return torch.mean((outputs - as_targets(Y, outputs.shape[0])) ** 2)


def _mse_grad(values: torch.Tensor, spec: NetworkSpec, X: Any, Y: Any) -> Tuple[float, torch.Tensor]:
    leaf = values.detach().clone().requires_grad_(True)
    loss = mse_loss(ParamVector(leaf, spec), X, Y)
    (grad,) = torch.autograd.grad(loss, leaf)
    return float(loss.detach()), grad


def inner_adapt(theta: ParamVector, Xc: Any, Yc: Any, steps: int, inner_lr: float) -> ParamVector:
    """`steps` plain gradient-descent updates on the context MSE"""
    if steps < 0:
        raise ContractViolationError(f"Inner steps must be non-negative, got {steps}")
    values = theta.values.detach()
    for _ in range(steps):
        _, grad = _mse_grad(values, theta.spec, Xc, Yc)
        values = values - inner_lr * grad
    return ParamVector(values, theta.spec)


def predict(theta: ParamVector, Xc: Any, Yc: Any, Xq: Any, config: MamlConfig) -> torch.Tensor:
    """Adapt with the test-time step count, then evaluate at the queries (vectorized point predictions)"""
    adapted = inner_adapt(theta, Xc, Yc, config.inner_steps_test, config.inner_lr)
    with torch.no_grad():
        return vectorize(forward(adapted, Xq))


def meta_gradient(theta: ParamVector, episodes: Sequence[Episode], config: MamlConfig) -> Tuple[float, torch.Tensor]:
    """
    First-order meta-gradient: mean over episodes of the query-MSE gradient at the adapted parameters.

    Returns:
        tuple: (mean query MSE after adaptation, gradient)
    """
    total_loss = 0.0
    total_grad = torch.zeros_like(theta.values)
    for episode in episodes:
        adapted = inner_adapt(theta, episode.Xc, episode.Yc, config.inner_steps_train, config.inner_lr)
        loss, grad = _mse_grad(adapted.values, theta.spec, episode.Xq, episode.Yq)
        total_loss += loss
        total_grad = total_grad + grad
    return total_loss / len(episodes), total_grad / len(episodes)


@dataclass(frozen=True, eq=False)
class MamlResult:
    checkpoint: Checkpoint
    loss_trace: List[Tuple[int, float]]


class MamlTrainer:
    """First-order MAML meta-training with Adam on the meta-initialization"""

    def __init__(self, config: MamlConfig, datasets: Sequence[Any]):
        if len(datasets) != config.alpha:
            raise ContractViolationError(f"Need one dataset per cluster: alpha={config.alpha}, got {len(datasets)}")
        self.config = config
        self.datasets = list(datasets)
        self.spec = config.network_spec()
        self.theta = init_params(self.spec, config.seed).values
        self.adam = AdamState.zeros({'theta': self.theta})
        self.epoch = 0
        self.loss_trace: List[Tuple[int, float]] = []

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint, datasets: Sequence[Any]) -> 'MamlTrainer':
        if checkpoint.model_kind != 'maml':
            raise ContractViolationError(f"Cannot resume MAML training from a {checkpoint.model_kind} checkpoint")
        trainer = cls(MamlConfig.from_dict(checkpoint.config), datasets)
        trainer.theta = torch.as_tensor(checkpoint.theta0, dtype=DTYPE)
        trainer.adam = AdamState.from_arrays(checkpoint.adam)
        trainer.epoch = checkpoint.epoch
        trainer.loss_trace = list(checkpoint.nll_trace)
        for dataset, state in zip(trainer.datasets, checkpoint.rng_states):
            dataset.set_state(state)
        logger.info(f"Resuming MAML training at epoch {trainer.epoch}")
        return trainer

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            model_kind='maml',
            network=self.spec,
            theta0=self.theta.numpy().copy(),
            sigma_eps=defaults.SIGMA_EPS,
            epoch=self.epoch,
            phase=PHASE_MAML,
            config=self.config.to_dict(),
            adam=self.adam.to_arrays(),
            rng_states=[dataset.get_state() for dataset in self.datasets],
            nll_trace=list(self.loss_trace),
        )

    def step(self) -> float:
        config = self.config
        per_cluster = config.tasks_per_epoch // config.alpha
        episodes = []
        for dataset in self.datasets:
            episodes.extend(dataset.sample_episodes(per_cluster, config.context_size, config.query_size))
        loss, grad = meta_gradient(ParamVector(self.theta, self.spec), episodes, config)
        params, self.adam = adam_step({'theta': self.theta}, {'theta': grad}, self.adam, config.meta_lr)
        self.theta = params['theta']
        self.epoch += 1
        self.loss_trace.append((self.epoch, loss))
        return loss

    def run(self, on_checkpoint: Optional[Callable[[Checkpoint], Any]] = None) -> MamlResult:
        config = self.config
        logger.info(f"Training first-order MAML (alpha={config.alpha}, P={self.spec.param_count}) "
                    f"for {config.epochs} epochs starting at {self.epoch}")
        while self.epoch < config.epochs:
            loss = self.step()
            if self.epoch % config.log_every == 0:
                logger.info(f"Epoch {self.epoch}/{config.epochs}: query MSE {loss:.4f} "
                            f"(moving average {moving_average(self.loss_trace)[-1]:.4f})")
            if on_checkpoint is not None and config.checkpoint_every and self.epoch % config.checkpoint_every == 0:
                on_checkpoint(self.checkpoint())
        return MamlResult(self.checkpoint(), list(self.loss_trace))


def meta_train(config: MamlConfig, datasets: Sequence[Any],
               on_checkpoint: Optional[Callable[[Checkpoint], Any]] = None,
               resume: Optional[Checkpoint] = None) -> MamlResult:
    """Meta-train the initialization; one dataset per cluster"""
    if not isinstance(datasets, (list, tuple)):
        datasets = [datasets]
    trainer = MamlTrainer.from_checkpoint(resume, datasets) if resume is not None else MamlTrainer(config, datasets)
    return trainer.run(on_checkpoint)


def theta_from_checkpoint(checkpoint: Checkpoint) -> Tuple[ParamVector, MamlConfig]:
    if checkpoint.model_kind != 'maml':
        raise CheckpointError(f"Checkpoint holds a {checkpoint.model_kind} model, not MAML")
    return checkpoint.theta, MamlConfig.from_dict(checkpoint.config)
