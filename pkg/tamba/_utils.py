import math
from typing import Sequence, Tuple

import numpy as np


def normalize_angle(angle: float) -> float:
    """Wrap an angle in radians into [-pi, pi).

    The modulo can land exactly on pi for inputs a hair below -pi, so that case is folded
    back onto -pi.
    """
    wrapped = math.fmod(angle + math.pi, 2.0 * math.pi)
    if wrapped < 0.0:
        wrapped += 2.0 * math.pi
    wrapped -= math.pi
    if wrapped >= math.pi:
        wrapped -= 2.0 * math.pi
    return wrapped


def rotation(angle: float) -> np.ndarray:
    cos, sin = math.cos(angle), math.sin(angle)
    return np.array([[cos, -sin], [sin, cos]], dtype=np.float64)


def as_float64(values: Sequence) -> np.ndarray:
    return np.asarray(values, dtype=np.float64)


def fit_loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Least-squares slope of log(ys) against log(xs)."""
    if len(xs) < 2:
        return float("nan")
    slope, _ = np.polyfit(np.log(as_float64(xs)), np.log(as_float64(ys)), 1)
    return float(slope)


def split_counts(total: int, fraction: float) -> Tuple[int, int]:
    first = int(round(total * fraction))
    return first, total - first
