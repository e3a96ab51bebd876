import logging
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Dict, List, Tuple

import numpy as np
import torch

from .errors import ContractViolationError

# Configure logging
logger = logging.getLogger(__name__)

# All numerics run in double precision
DTYPE = torch.float64


class Activation(str, Enum):
    RELU = 'relu'
    IDENTITY = 'identity'


@dataclass(frozen=True)
class NetworkSpec:
    """Fully-connected regressor architecture: (N_x, hidden..., N_y) and one activation"""
    layer_widths: Tuple[int, ...]
    activation: Activation = Activation.RELU

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, 'layer_widths', widths)
        try:
            object.__setattr__(self, 'activation', Activation(self.activation))
        except ValueError:
            raise ContractViolationError(f"Unsupported activation: {self.activation}")

        if len(widths) < 2:
            raise ContractViolationError(f"Need at least input and output widths, got {widths}")
        if any(w < 1 for w in widths):
            raise ContractViolationError(f"Layer widths must be positive, got {widths}")
        if self.activation == Activation.RELU and len(widths) < 3:
            raise ContractViolationError("ReLU networks need at least one hidden layer")

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def output_dim(self) -> int:
        return self.layer_widths[-1]

    def layer_shapes(self) -> List[Tuple[int, int]]:
        """(fan_in, fan_out) of every affine layer"""
        return list(zip(self.layer_widths[:-1], self.layer_widths[1:]))

    @property
    def param_count(self) -> int:
        return sum(fan_in * fan_out + fan_out for fan_in, fan_out in self.layer_shapes())

    def to_dict(self) -> Dict[str, Any]:
        return {'layer_widths': list(self.layer_widths), 'activation': self.activation.value}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'NetworkSpec':
        return cls(tuple(data['layer_widths']), Activation(data['activation']))


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flattened network parameters theta in R^P, weights stored as vec(W) then bias, layer by layer"""
    values: torch.Tensor
    spec: NetworkSpec

    def __post_init__(self):
        values = torch.as_tensor(self.values, dtype=DTYPE)
        if values.ndim != 1 or values.shape[0] != self.spec.param_count:
            raise ContractViolationError(
                f"Parameter vector has shape {tuple(values.shape)}, expected ({self.spec.param_count},)")
        object.__setattr__(self, 'values', values)

    def detach(self) -> 'ParamVector':
        return ParamVector(self.values.detach(), self.spec)


def reference_network(input_dim: int = 1, output_dim: int = 1) -> NetworkSpec:
    """Two hidden layers of 40 ReLU units"""
    return NetworkSpec((input_dim, 40, 40, output_dim), Activation.RELU)


def unflatten(theta: ParamVector) -> List[Tuple[torch.Tensor, torch.Tensor]]:
    """Split theta into per-layer (W, b) with W of shape fan_out x fan_in"""
    layers = []
    offset = 0
    for fan_in, fan_out in theta.spec.layer_shapes():
        weight = theta.values[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out).T
        offset += fan_in * fan_out
        bias = theta.values[offset:offset + fan_out]
        offset += fan_out
        layers.append((weight, bias))
    return layers


def flatten(layers: List[Tuple[Any, Any]], spec: NetworkSpec) -> ParamVector:
    """Inverse of unflatten"""
    if len(layers) != len(spec.layer_shapes()):
        raise ContractViolationError(f"Expected {len(spec.layer_shapes())} layers, got {len(layers)}")
    chunks = []
    for (weight, bias), (fan_in, fan_out) in zip(layers, spec.layer_shapes()):
        weight = torch.as_tensor(weight, dtype=DTYPE)
        bias = torch.as_tensor(bias, dtype=DTYPE)
        if tuple(weight.shape) != (fan_out, fan_in) or tuple(bias.shape) != (fan_out,):
            raise ContractViolationError(
                f"Layer shapes {tuple(weight.shape)}, {tuple(bias.shape)} do not match ({fan_out}, {fan_in})")
        chunks.append(weight.T.reshape(-1))
        chunks.append(bias)
    return ParamVector(torch.cat(chunks), spec)


def init_params(spec: NetworkSpec, seed: int) -> ParamVector:
    """He initialization: weights ~ N(0, 2 / fan_in), biases 0"""
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in spec.layer_shapes():
        weight = rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in)
        layers.append((weight, np.zeros(fan_out)))
    return flatten(layers, spec)


def as_inputs(X: Any, spec: NetworkSpec) -> torch.Tensor:
    """Validate a batch of inputs as an N_x x K float64 tensor"""
    inputs = torch.as_tensor(np.asarray(X, dtype=np.float64) if not torch.is_tensor(X) else X, dtype=DTYPE)
    if inputs.ndim == 1 and spec.input_dim == 1:
        inputs = inputs.reshape(1, -1)
    if inputs.ndim != 2 or inputs.shape[0] != spec.input_dim:
        raise ContractViolationError(
            f"Inputs have shape {tuple(inputs.shape)}, expected ({spec.input_dim}, K)")
    if inputs.shape[1] < 1:
        raise ContractViolationError("Input batch is empty")
    if not torch.isfinite(inputs).all():
        raise ContractViolationError("Inputs contain non-finite entries")
    return inputs


def vectorize(Y: torch.Tensor) -> torch.Tensor:
    """N_y x K outputs -> length N_y*K vector, output-dimension-major per input"""
    return Y.T.reshape(-1)


def devectorize(y: torch.Tensor, output_dim: int) -> torch.Tensor:
    """Inverse of vectorize"""
    return y.reshape(-1, output_dim).T


def _activate(z: torch.Tensor, activation: Activation) -> torch.Tensor:
    if activation == Activation.RELU:
        return torch.relu(z)
    if activation == Activation.IDENTITY:
        return z
    raise ContractViolationError(f"Unsupported activation: {activation}")


def _slope(z: torch.Tensor, activation: Activation) -> torch.Tensor:
    # ReLU slope at exactly 0 is 0; the mask carries no gradient (second derivative 0 a.e.)
    if activation == Activation.RELU:
        return (z > 0).to(DTYPE)
    if activation == Activation.IDENTITY:
        return torch.ones_like(z)
    raise ContractViolationError(f"Unsupported activation: {activation}")


def forward(theta: ParamVector, X: Any) -> torch.Tensor:
    """Evaluate g(theta, X); returns N_y x K"""
    spec = theta.spec
    inputs = as_inputs(X, spec)
    layers = unflatten(theta)
    h = inputs.T
    for index, (weight, bias) in enumerate(layers):
        z = h @ weight.T + bias
        h = z if index == len(layers) - 1 else _activate(z, spec.activation)
    return h.T


def jacobian(theta: ParamVector, X: Any) -> torch.Tensor:
    """
    Exact Jacobian of vec(g(theta, X)) with respect to theta.

    Computed layer by layer from the forward activations and the backward output
    sensitivities, so the result stays differentiable in theta through autograd.

    Returns:
        torch.Tensor: (N_y*K) x P, row t*N_y + d is the gradient of output d at input t
    """
    spec = theta.spec
    inputs = as_inputs(X, spec)
    layers = unflatten(theta)
    batch = inputs.shape[1]
    n_y = spec.output_dim

    layer_inputs = []
    slopes = []
    h = inputs.T
    for index, (weight, bias) in enumerate(layers):
        layer_inputs.append(h)
        z = h @ weight.T + bias
        if index < len(layers) - 1:
            slopes.append(_slope(z, spec.activation))
            h = _activate(z, spec.activation)

    # sens[k, d, a]: derivative of output d at input k w.r.t. pre-activation a of the current layer
    sens = torch.eye(n_y, dtype=DTYPE).expand(batch, n_y, n_y)
    blocks = []
    for index in reversed(range(len(layers))):
        weight, _ = layers[index]
        d_weight = torch.einsum('kya,kj->kyja', sens, layer_inputs[index]).reshape(batch, n_y, -1)
        blocks.append(torch.cat([d_weight, sens], dim=2))
        if index > 0:
            sens = (sens @ weight) * slopes[index - 1].unsqueeze(1)
    blocks.reverse()
    return torch.cat(blocks, dim=2).reshape(batch * n_y, spec.param_count)


def linearized_predict(theta0: ParamVector, theta: ParamVector, X: Any) -> torch.Tensor:
    """g(theta0, X) + J(theta0, X)(theta - theta0), returned as N_y x K"""
    if theta.spec != theta0.spec:
        raise ContractViolationError("Linearization point and parameters use different network specs")
    base = forward(theta0, X)
    delta = jacobian(theta0, X) @ (theta.values - theta0.values)
    return base + devectorize(delta, theta0.spec.output_dim)


def grad_through_jacobian(theta0: ParamVector,
                          scalar_fn: Callable[[torch.Tensor], Any],
                          X: Any) -> torch.Tensor:
    """Gradient of scalar_fn(J(theta0, X)) with respect to theta0"""
    values = theta0.values.detach().clone().requires_grad_(True)
    jac = jacobian(ParamVector(values, theta0.spec), X)
    value = torch.as_tensor(scalar_fn(jac), dtype=DTYPE)
    if value.ndim != 0:
        raise ContractViolationError(f"scalar_fn must return a scalar, got shape {tuple(value.shape)}")
    if not value.requires_grad:
        return torch.zeros_like(values).detach()
    (grad,) = torch.autograd.grad(value, values, allow_unused=True)
    if grad is None:
        return torch.zeros_like(values).detach()
    return grad
