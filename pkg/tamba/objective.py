"""Training losses with winner-takes-all selection."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence, Union

import numpy as np

from tamba.decoder import DecoderOutput
from tamba.errors import ContractError, DimensionError
from tamba.models.config import LossConfig, WinnerCriterion
from tamba.tensor import Tensor, log, log_softmax, logsumexp, stop_gradient

ArrayOrTensor = Union[np.ndarray, Tensor]


def _values(x: ArrayOrTensor) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def winner_takes_all(
    predictions: ArrayOrTensor,
    gt: ArrayOrTensor,
    criterion: WinnerCriterion = WinnerCriterion.MIN_ADE,
) -> int:
    """Index of the mode closest to ``gt``; ties go to the lowest index."""
    modes, truth = _values(predictions), _values(gt)
    if modes.shape[1:] != truth.shape:
        raise DimensionError("predictions and ground truth disagree", modes.shape, truth.shape)
    distances = np.linalg.norm(modes - truth[None], axis=-1)
    if criterion is WinnerCriterion.MIN_FDE:
        errors = distances[:, -1]
    else:
        errors = distances.mean(axis=-1)
    return int(np.argmin(errors))


def proposal_loss(proposals: Tensor, gt: ArrayOrTensor, winner: int) -> Tensor:
    """Mean squared error of the winner mode over steps and coordinates."""
    diff = proposals[winner] - _values(gt)
    return (diff * diff).mean()


def _laplace_terms(gt: np.ndarray, loc: Tensor, scale: Tensor) -> Tensor:
    if np.any(scale.data <= 0):
        raise ContractError("Laplace scales must be strictly positive")
    return log(scale * 2.0) + (gt - loc).abs() / scale


def laplace_nll(gt: ArrayOrTensor, loc: Tensor, scale: Tensor) -> Tensor:
    """Negative log-likelihood of independent per-coordinate Laplace densities.

    Summed over the two coordinates and averaged over steps.
    """
    return _laplace_terms(_values(gt), loc, scale).sum(axis=-1).mean()


def classification_loss(scores: Tensor, gt: ArrayOrTensor, loc: Tensor, scale: Tensor) -> Tensor:
    """Mixture negative log-likelihood over all modes with location and scale held fixed.

    ``scores`` are the raw mode confidences whose softmax gives the mixing coefficients; the
    mixture is evaluated in log space, so a vanishing coefficient stays finite. Only the
    scores receive a gradient.
    """
    per_mode = _laplace_terms(_values(gt), stop_gradient(loc), stop_gradient(scale))
    nll = per_mode.sum(axis=-1).mean(axis=-1)
    return -logsumexp(log_softmax(scores, axis=-1) - nll, axis=-1)


@dataclass
class LossReport:
    proposal: Tensor
    refine: Tensor
    cls: Tensor
    winner: int
    cls_weight: float = 1.0

    @property
    def total(self) -> Tensor:
        return self.proposal + self.refine + self.cls * self.cls_weight

    def values(self) -> Dict[str, float]:
        return {
            "L_proposal": self.proposal.item(),
            "L_refine": self.refine.item(),
            "L_cls": self.cls.item(),
            "L_total": self.total.item(),
        }


def target_losses(output: DecoderOutput, gt: ArrayOrTensor, config: LossConfig) -> LossReport:
    """All loss terms for one target; ``gt`` is in the same frame as ``output``."""
    truth = _values(gt)
    winner = winner_takes_all(output.proposals, truth, config.winner)
    return LossReport(
        proposal=proposal_loss(output.proposals, truth, winner),
        refine=laplace_nll(truth, output.loc[winner], output.scale[winner]),
        cls=classification_loss(output.scores, truth, output.loc, output.scale),
        winner=winner,
        cls_weight=config.cls_weight,
    )


def total_loss(reports: Sequence[LossReport], cls_weight: float = 1.0) -> Tensor:
    """``L_proposal + L_refine + cls_weight * L_cls`` averaged over targets."""
    if not reports:
        raise ContractError("total loss needs at least one target")
    if cls_weight < 0:
        raise ContractError(f"classification weight must be non-negative, got {cls_weight}")
    terms: List[Tensor] = [
        report.proposal + report.refine + report.cls * cls_weight for report in reports
    ]
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total * (1.0 / len(terms))
