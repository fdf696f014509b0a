"""Motion-forecasting metrics, parameter counting and analytic FLOP totals."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
from camel_converter.pydantic_base import CamelBase
from pydantic import Field, model_validator

from tamba.checkpoint import Checkpoint, read_manifest
from tamba.errors import ContractError, DimensionError
from tamba.flops import ScenarioSize, forward_flops
from tamba.models.config import ModelConfig

MISS_THRESHOLD = 2.0
EVAL_KS = (6, 1)


def _check_shapes(predictions: np.ndarray, gt: np.ndarray) -> None:
    if predictions.ndim != 3 or predictions.shape[1:] != gt.shape:
        raise DimensionError(
            "predictions must be (M, T', 2) against a (T', 2) truth", predictions.shape, gt.shape
        )


def top_k(
    predictions: np.ndarray,
    k: int,
    probabilities: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """The ``k`` most probable modes and their mixing coefficients, most probable first.

    Without probabilities every mode is equally likely and the first ``k`` are kept. Ties keep
    the lower mode index.

    Raises
    ------
    ContractError
        If ``k`` is not positive or exceeds the number of modes.
    """
    modes = np.asarray(predictions, dtype=np.float64)
    n_modes = modes.shape[0]
    if k < 1 or k > n_modes:
        raise ContractError(f"cannot select {k} modes out of {n_modes}")
    if probabilities is None:
        pi = np.full(n_modes, 1.0 / n_modes)
    else:
        pi = np.asarray(probabilities, dtype=np.float64)
    if pi.shape != (n_modes,):
        raise DimensionError("one probability per mode is required", pi.shape, (n_modes,))
    order = np.argsort(-pi, kind="stable")[:k]
    return modes[order], pi[order]


def _displacements(predictions: np.ndarray, gt: np.ndarray) -> np.ndarray:
    modes, truth = np.asarray(predictions, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    _check_shapes(modes, truth)
    return np.linalg.norm(modes - truth[None], axis=-1)


def min_ade(
    predictions: np.ndarray,
    gt: np.ndarray,
    k: int,
    probabilities: Optional[np.ndarray] = None,
) -> float:
    """Smallest mean-over-steps L2 error among the top-``k`` modes, in meters."""
    modes, _ = top_k(predictions, k, probabilities)
    return float(_displacements(modes, gt).mean(axis=-1).min())


def min_fde(
    predictions: np.ndarray,
    gt: np.ndarray,
    k: int,
    probabilities: Optional[np.ndarray] = None,
) -> float:
    """Smallest final-step L2 error among the top-``k`` modes, in meters."""
    modes, _ = top_k(predictions, k, probabilities)
    return float(_displacements(modes, gt)[:, -1].min())


def b_min_fde(
    predictions: np.ndarray,
    gt: np.ndarray,
    k: int,
    probabilities: Optional[np.ndarray] = None,
) -> float:
    """``minFDE + (1 - pi)^2`` where ``pi`` is the renormalized probability of the best mode."""
    modes, pi = top_k(predictions, k, probabilities)
    final = _displacements(modes, gt)[:, -1]
    best = int(np.argmin(final))
    total = float(pi.sum())
    confidence = float(pi[best] / total) if total > 0 else 1.0 / k
    return float(final[best]) + (1.0 - confidence) ** 2


def miss_rate(
    predictions: Sequence[np.ndarray],
    gts: Sequence[np.ndarray],
    k: int,
    probabilities: Optional[Sequence[Optional[np.ndarray]]] = None,
) -> float:
    """Fraction of targets whose best final-step error among the top-``k`` exceeds 2 m.

    Raises
    ------
    ContractError
        If the batch is empty or the sequences differ in length.
    """
    if len(predictions) == 0:
        raise ContractError("miss rate needs at least one target")
    if len(predictions) != len(gts):
        raise ContractError(f"{len(predictions)} predictions for {len(gts)} ground truths")
    pis = probabilities if probabilities is not None else [None] * len(predictions)
    misses = [
        min_fde(pred, gt, k, pi) > MISS_THRESHOLD for pred, gt, pi in zip(predictions, gts, pis)
    ]
    return float(np.mean(misses))


class KMetrics(CamelBase):
    min_ade: float = Field(alias="minADE", ge=0.0)
    min_fde: float = Field(alias="minFDE", ge=0.0)
    b_min_fde: float = Field(alias="b_minFDE", ge=0.0)
    miss_rate: float = Field(alias="MR", ge=0.0, le=1.0)

    @model_validator(mode="after")
    def check_brier(self) -> "KMetrics":
        if self.b_min_fde < self.min_fde:
            raise ValueError("b_minFDE cannot be below minFDE")
        return self


class MetricReport(CamelBase):
    """Dataset-level metrics at K = 6 and K = 1 with the model's size and cost."""

    k6: KMetrics = Field(alias="K6")
    k1: KMetrics = Field(alias="K1")
    params_m: float = Field(alias="params_M", ge=0.0)
    flops_g: float = Field(alias="flops_G", ge=0.0)
    n_targets: int = Field(alias="n_targets", ge=0)

    def at(self, k: int) -> KMetrics:
        if k == 6:
            return self.k6
        if k == 1:
            return self.k1
        raise ContractError(f"reports carry K=6 and K=1 only, not K={k}")

    def to_json(self) -> str:
        return self.model_dump_json(by_alias=True, indent=2)


def summarize(
    predictions: Sequence[np.ndarray],
    gts: Sequence[np.ndarray],
    probabilities: Sequence[np.ndarray],
    k: int,
) -> KMetrics:
    """Average every metric at ``k`` over a batch of targets."""
    if len(predictions) == 0:
        raise ContractError("metrics need at least one target")
    rows = list(zip(predictions, gts, probabilities))
    return KMetrics(
        minADE=float(np.mean([min_ade(pred, gt, k, pi) for pred, gt, pi in rows])),
        minFDE=float(np.mean([min_fde(pred, gt, k, pi) for pred, gt, pi in rows])),
        b_minFDE=float(np.mean([b_min_fde(pred, gt, k, pi) for pred, gt, pi in rows])),
        MR=miss_rate(predictions, gts, k, probabilities),
    )


def build_report(
    predictions: Sequence[np.ndarray],
    gts: Sequence[np.ndarray],
    probabilities: Sequence[np.ndarray],
    params_m: float,
    flops_g: float,
) -> MetricReport:
    per_k: Dict[str, KMetrics] = {
        f"K{k}": summarize(predictions, gts, probabilities, k) for k in EVAL_KS
    }
    return MetricReport(**per_k, params_M=params_m, flops_G=flops_g, n_targets=len(predictions))


def count_params(checkpoint: Union[str, Path, Checkpoint]) -> float:
    """Total element count over every stored parameter tensor, in millions."""
    manifest = checkpoint if isinstance(checkpoint, Checkpoint) else read_manifest(checkpoint)
    return manifest.num_parameters / 1e6


def estimate_flops(config: ModelConfig, size: ScenarioSize) -> float:
    """Analytic matrix-product cost of one forward pass on a scene of ``size``, in GigaOps."""
    return forward_flops(config, size) / 1e9

