"""Parameter containers, basic layers and the optimizer."""

from __future__ import annotations

import logging
from typing import Dict, Iterator, List, Mapping, Optional, Tuple, TypeVar

import numpy as np

from tamba.errors import CheckpointError, ContractError
from tamba.tensor import Tensor, affine, gelu, layer_norm, sigmoid, tanh

logger = logging.getLogger(__name__)

M = TypeVar("M", bound="Module")


class Module:
    """Base class that names every parameter by its attribute path.

    Tensors with ``requires_grad`` and sub-modules assigned as attributes are registered in
    assignment order. A tensor reachable under several paths keeps its first name.
    """

    def __init__(self) -> None:
        object.__setattr__(self, "_parameters", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name: str, value: object) -> None:
        if isinstance(value, Tensor) and value.requires_grad:
            self._parameters[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def add_module(self, name: str, module: M) -> M:
        self._modules[name] = module
        object.__setattr__(self, name, module)
        return module

    def parameter(self, name: str, data: np.ndarray) -> Tensor:
        tensor = Tensor(data, requires_grad=True, name=name)
        setattr(self, name, tensor)
        return tensor

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        return iter(self._modules.items())

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        seen = set()
        for name, tensor in self._walk(prefix):
            if id(tensor) in seen:
                continue
            seen.add(id(tensor))
            yield name, tensor

    def _walk(self, prefix: str) -> Iterator[Tuple[str, Tensor]]:
        for name, tensor in self._parameters.items():
            yield f"{prefix}{name}", tensor
        for name, module in self._modules.items():
            yield from module._walk(f"{prefix}{name}.")

    def parameters(self) -> List[Tensor]:
        return [tensor for _, tensor in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(tensor.size for tensor in self.parameters())

    def zero_grad(self) -> None:
        for tensor in self.parameters():
            tensor.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: tensor.data.copy() for name, tensor in self.named_parameters()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        """Copy values into the existing parameter tensors.

        Raises
        ------
        CheckpointError
            If a name is missing on either side or a shape differs.
        """
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise CheckpointError(
                f"parameter names differ: missing {missing}, unexpected {unexpected}"
            )
        for name, tensor in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != tensor.shape:
                raise CheckpointError(
                    f"parameter {name} has shape {value.shape}, model expects {tensor.shape}"
                )
            tensor.data[...] = value


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True) -> None:
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.parameter("weight", rng.standard_normal((d_in, d_out)) / np.sqrt(d_in))
        self.bias: Optional[Tensor] = None
        if bias:
            self.parameter("bias", np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return affine(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5) -> None:
        super().__init__()
        self.eps = eps
        self.parameter("gain", np.ones(d))
        self.parameter("bias", np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)


class FeedForward(Module):
    """affine(d -> d_ff), GELU, affine(d_ff -> d)."""

    def __init__(self, d: int, d_ff: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.fc1 = Linear(d, d_ff, rng)
        self.fc2 = Linear(d_ff, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class GRUCell(Module):
    """Gated recurrent update ``h' = (1 - z) * n + z * h``."""

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.hidden = hidden
        self.input_map = Linear(d_in, 3 * hidden, rng)
        self.hidden_map = Linear(hidden, 3 * hidden, rng)

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        size = self.hidden
        gates_x = self.input_map(x)
        gates_h = self.hidden_map(h)
        update = sigmoid(gates_x[..., :size] + gates_h[..., :size])
        reset = sigmoid(gates_x[..., size : 2 * size] + gates_h[..., size : 2 * size])
        candidate = tanh(gates_x[..., 2 * size :] + reset * gates_h[..., 2 * size :])
        return (1.0 - update) * candidate + update * h


class Adam:
    """Adam with bias correction; updates parameter arrays in place."""

    def __init__(
        self,
        named_parameters: List[Tuple[str, Tensor]],
        lr: float = 1e-3,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ) -> None:
        if lr <= 0:
            raise ContractError(f"learning rate must be positive, got {lr}")
        self.named_parameters = list(named_parameters)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.steps = 0
        self.first = {name: np.zeros_like(tensor.data) for name, tensor in self.named_parameters}
        self.second = {name: np.zeros_like(tensor.data) for name, tensor in self.named_parameters}

    def step(self, grads: Optional[Mapping[str, np.ndarray]] = None) -> None:
        """Apply one update from ``grads`` (by name) or from each parameter's ``.grad``."""
        self.steps += 1
        correction1 = 1.0 - self.beta1**self.steps
        correction2 = 1.0 - self.beta2**self.steps
        for name, tensor in self.named_parameters:
            value = grads.get(name) if grads is not None else tensor.grad
            if value is None:
                value = np.zeros_like(tensor.data)
            self.first[name] = self.beta1 * self.first[name] + (1.0 - self.beta1) * value
            self.second[name] = self.beta2 * self.second[name] + (1.0 - self.beta2) * value * value
            update = (self.first[name] / correction1) / (
                np.sqrt(self.second[name] / correction2) + self.eps
            )
            tensor.data -= self.lr * update

    def zero_grad(self) -> None:
        for _, tensor in self.named_parameters:
            tensor.grad = None


class ReduceLROnPlateau:
    """Multiply the optimizer's lr by ``factor`` after ``patience`` epochs without improvement.

    An epoch improves when the metric drops below the best seen by more than ``threshold``.
    """

    def __init__(
        self,
        optimizer: Adam,
        factor: float = 0.1,
        patience: int = 5,
        threshold: float = 1e-4,
    ) -> None:
        if not 0.0 < factor < 1.0:
            raise ContractError(f"plateau factor must lie in (0, 1), got {factor}")
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.best = float("inf")
        self.bad_epochs = 0

    def step(self, metric: float) -> bool:
        """Record one validation value; return True when the lr was reduced."""
        if metric < self.best - self.threshold:
            self.best = metric
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs < self.patience:
            return False
        self.bad_epochs = 0
        self.optimizer.lr *= self.factor
        logger.info("Validation plateau, learning rate reduced to %g", self.optimizer.lr)
        return True
