"""Central finite-difference oracle for analytic gradients."""

from __future__ import annotations

from typing import Callable, Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
from camel_converter.pydantic_base import CamelBase
from pydantic import Field

from tamba.errors import ContractError, OracleError
from tamba.tensor import StoppedValues, Tensor, grad, no_grad


class GradCheckReport(CamelBase):
    max_relative_error: Dict[str, float]
    tolerance: float
    passed: bool
    checked: Dict[str, int] = Field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_relative_error.values(), default=0.0)

    def failures(self) -> Dict[str, float]:
        return {
            name: error
            for name, error in self.max_relative_error.items()
            if not error < self.tolerance
        }


def grad_check(
    f: Callable[..., Tensor],
    inputs: Union[Sequence[Tensor], Mapping[str, Tensor]],
    h: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-4,
    samples: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare the analytic gradient of ``f(*inputs)`` with central differences.

    The analytic pass records every ``stop_gradient`` output and the perturbed passes replay
    them, so paths cut from the gradient are held constant on both sides of the comparison.

    Parameters
    ----------
    f:
        Deterministic scalar function; called with the input tensors in order.
    inputs:
        Tensors to perturb. Mapping keys name the report entries; sequences are named by index.
    h:
        Central-difference step.
    tol:
        Largest accepted elementwise relative error.
    floor:
        Lower bound on the denominator of the relative error, so gradients that are exactly
        zero are compared in absolute terms.
    samples (optional):
        Number of elements checked per input, drawn without replacement with ``seed``.
        Every element is checked when omitted.

    Raises
    ------
    ContractError
        If ``h`` is not positive or ``samples`` is below one.
    OracleError
        If two evaluations of ``f`` at the same point differ, or if ``f`` calls
        ``stop_gradient`` a different number of times between passes.
    """
    if h <= 0:
        raise ContractError(f"finite-difference step must be positive, got {h}")
    if samples is not None and samples < 1:
        raise ContractError(f"at least one sample per input is needed, got {samples}")
    if isinstance(inputs, Mapping):
        names: List[str] = list(inputs.keys())
        tensors = list(inputs.values())
    else:
        tensors = list(inputs)
        names = [str(i) for i in range(len(tensors))]

    stopped = StoppedValues()
    with stopped.record():
        analytic = grad(f(*tensors), tensors)

    def evaluate() -> float:
        with no_grad(), stopped.replay():
            return f(*tensors).item()

    first, second = evaluate(), evaluate()
    if first != second:
        raise OracleError(f"function is not deterministic ({first!r} != {second!r})")

    rng = np.random.default_rng(seed)
    errors: Dict[str, float] = {}
    checked: Dict[str, int] = {}
    for name, tensor, exact in zip(names, tensors, analytic):
        positions = _positions(tensor.size, samples, rng)
        numeric = numeric_gradient(evaluate, tensor.data, h, positions).reshape(-1)[positions]
        wanted = exact.reshape(-1)[positions]
        scale = np.maximum(np.maximum(np.abs(numeric), np.abs(wanted)), floor)
        errors[name] = float(np.max(np.abs(numeric - wanted) / scale, initial=0.0))
        checked[name] = int(positions.size)
    return GradCheckReport(
        max_relative_error=errors,
        tolerance=tol,
        passed=all(value < tol for value in errors.values()),
        checked=checked,
    )


def _positions(size: int, samples: Optional[int], rng: np.random.Generator) -> np.ndarray:
    if samples is None or samples >= size:
        return np.arange(size)
    return np.sort(rng.choice(size, size=samples, replace=False))


def numeric_gradient(
    f: Callable[[], float],
    array: np.ndarray,
    h: float = 1e-5,
    positions: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Central differences of ``f`` with respect to ``array`` (perturbed in place).

    Only the flat ``positions`` are differenced when given; the other entries stay zero.
    """
    out = np.zeros_like(array)
    flat, flat_out = array.reshape(-1), out.reshape(-1)
    for position in range(flat.size) if positions is None else positions:
        original = flat[position]
        flat[position] = original + h
        upper = f()
        flat[position] = original - h
        lower = f()
        flat[position] = original
        flat_out[position] = (upper - lower) / (2.0 * h)
    return out
