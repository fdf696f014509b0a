from __future__ import annotations

from functools import wraps
from typing import Any, Callable, Optional, Sequence, TypeVar

T = TypeVar("T")


class TambaError(Exception):
    """Generic class for Tamba error handling"""

    def __init__(self, message: str) -> None:
        self.message = message
        super().__init__(self.message)

    def __str__(self) -> str:
        return f"{self.__class__.__name__}. Error message: {self.message}"


class DimensionError(TambaError):
    """Error raised when tensor shapes are incompatible"""

    def __init__(
        self,
        message: str,
        left: Optional[Sequence[int]] = None,
        right: Optional[Sequence[int]] = None,
    ) -> None:
        self.left = tuple(left) if left is not None else None
        self.right = tuple(right) if right is not None else None
        if self.left is not None and self.right is not None:
            message = f"{message} (shapes {self.left} and {self.right})"
        super().__init__(message)


class ContractError(TambaError):
    """Error raised when an operation is called outside of its preconditions"""


class NumericError(TambaError):
    """Error raised when a value stops being finite"""

    def __init__(self, message: str, step: Optional[int] = None) -> None:
        self.step = step
        if step is not None:
            message = f"{message} at step {step}"
        super().__init__(message)


class OracleError(TambaError):
    """Error raised when the finite-difference oracle cannot be trusted"""


class ScenarioParseError(TambaError):
    """Error raised when a scenario document cannot be parsed against the schema"""


class ScenarioValidationError(TambaError):
    """Error raised when a parsed scenario breaks one of its invariants"""


class TargetNotFoundError(TambaError):
    """Error raised when a target id is not part of the scenario"""


class RoutingError(TambaError):
    """Error raised when a category has no embedder"""


class GenerationError(TambaError):
    """Error raised when the synthetic generator is given infeasible settings"""


class ConfigurationError(TambaError):
    """Error raised when configuration values cannot be honoured"""


class CheckpointError(TambaError):
    """Error raised when a checkpoint is malformed or incompatible"""


def numeric_context(func: Callable[..., T]) -> Callable[..., T]:
    @wraps(func)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return func(*args, **kwargs)
        except NumericError as exc:
            exc.message = f"{exc.message}. Raised inside {func.__name__}"
            raise exc

    return wrapper
