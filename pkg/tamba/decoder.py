"""Multi-modal decoding: recursive proposals, recurrent scoring and Laplace refinement."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from tamba.blocks import BlockState, build_block
from tamba.encoder import SceneMemory
from tamba.errors import ContractError
from tamba.models.config import ModelConfig
from tamba.nn import GRUCell, LayerNorm, Linear, Module
from tamba.scenario import FrameTransform
from tamba.tensor import (
    MASK_VALUE,
    Tensor,
    concat,
    gelu,
    softmax,
    softplus,
    stop_gradient,
)

logger = logging.getLogger(__name__)

EXPORT_COLUMNS = ("mode", "step", "x", "y", "scale_x", "scale_y", "pi")


class ContextAttention(Module):
    """Scaled dot-product attention of queries over a fixed context.

    With ``self_term`` every query also attends to its own key and value, which is how a query
    state sees its previous recursive step.
    """

    def __init__(self, d: int, d_key: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.d, self.d_key = d, d_key
        self.scale = 1.0 / np.sqrt(d_key)
        self.q_proj = Linear(d, d_key, rng)
        self.k_proj = Linear(d, d_key, rng)
        self.v_proj = Linear(d, d, rng)

    def project_context(self, context: Tensor) -> Tuple[Tensor, Tensor]:
        return self.k_proj(context), self.v_proj(context)

    def __call__(
        self,
        queries: Tensor,
        keys: Tensor,
        values: Tensor,
        mask: np.ndarray,
        self_term: bool = False,
    ) -> Tensor:
        q = self.q_proj(queries)
        logits = (q @ keys.swapaxes(0, 1)) * self.scale
        logits = logits + (1.0 - np.asarray(mask, dtype=np.float64)) * MASK_VALUE
        if not self_term:
            return softmax(logits, axis=-1) @ values
        own_key, own_value = self.k_proj(queries), self.v_proj(queries)
        own_logit = (q * own_key).sum(axis=-1, keepdims=True) * self.scale
        weights = softmax(concat([logits, own_logit], axis=-1), axis=-1)
        n_context = keys.shape[0]
        return weights[..., :n_context] @ values + weights[..., n_context:] * own_value


@dataclass
class DecoderOutput:
    """Target-frame decoder tensors for one target."""

    proposals: Tensor
    loc: Tensor
    scale: Tensor
    pi: Tensor
    scores: Tensor

    def to_prediction(self, target_id: str) -> "PredictionSet":
        return PredictionSet(
            target_id=target_id,
            proposals=self.proposals.data.copy(),
            loc=self.loc.data.copy(),
            scale=self.scale.data.copy(),
            pi=self.pi.data.copy(),
            scores=self.scores.data.copy(),
        )


@dataclass
class PredictionSet:
    """K candidate futures of one target with their Laplace parameters.

    Scales stay expressed along the axes of the frame the prediction was made in.
    """

    target_id: str
    proposals: np.ndarray
    loc: np.ndarray
    scale: np.ndarray
    pi: np.ndarray
    scores: np.ndarray

    @property
    def k_modes(self) -> int:
        return int(self.pi.shape[0])

    @property
    def future(self) -> int:
        return int(self.loc.shape[1])

    def check(self) -> "PredictionSet":
        if not np.all(np.isfinite(self.loc)) or not np.all(np.isfinite(self.proposals)):
            raise ContractError(f"prediction for '{self.target_id}' is not finite")
        if np.any(self.scale <= 0):
            raise ContractError(f"prediction for '{self.target_id}' has non-positive scales")
        if np.any(self.pi < 0) or abs(float(self.pi.sum()) - 1.0) > 1e-9:
            raise ContractError(f"mixing coefficients of '{self.target_id}' are not a distribution")
        return self

    def to_world(self, transform: FrameTransform) -> "PredictionSet":
        return replace(
            self,
            proposals=transform.invert_points(self.proposals),
            loc=transform.invert_points(self.loc),
        )


def export_predictions(
    prediction: PredictionSet, target_id: str, out_dir: Union[str, Path]
) -> Path:
    """Write ``<target_id>.csv`` (one row per mode and step) and ``<target_id>.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{target_id}.csv"
    with csv_path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(EXPORT_COLUMNS)
        for mode in range(prediction.k_modes):
            for step in range(prediction.future):
                writer.writerow(
                    [
                        mode,
                        step,
                        repr(float(prediction.loc[mode, step, 0])),
                        repr(float(prediction.loc[mode, step, 1])),
                        repr(float(prediction.scale[mode, step, 0])),
                        repr(float(prediction.scale[mode, step, 1])),
                        repr(float(prediction.pi[mode])),
                    ]
                )
    summary = {
        "target": target_id,
        "scores": [float(value) for value in prediction.scores],
        "pi": [float(value) for value in prediction.pi],
    }
    (out / f"{target_id}.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8"
    )
    return csv_path


class Scorer(Module):
    """Per-mode confidence: embed waypoints, attend to the scene context, run a GRU, read out."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator) -> None:
        super().__init__()
        self.hidden = config.scorer_hidden
        self.embed = Linear(2, config.d, rng)
        self.cross = ContextAttention(config.d, config.d_inner, rng)
        self.rnn = GRUCell(config.d, config.scorer_hidden, rng)
        self.out = Linear(config.scorer_hidden, 1, rng)

    def __call__(self, proposals: Tensor, keys: Tensor, values: Tensor, mask: np.ndarray) -> Tensor:
        k_modes, future = proposals.shape[0], proposals.shape[1]
        tokens = self.embed(proposals)
        fused = tokens + self.cross(tokens, keys, values, mask)
        h = Tensor(np.zeros((k_modes, self.hidden)))
        for step in range(future):
            h = self.rnn(fused[:, step, :], h)
        score = gelu(self.out(h))
        return score.reshape(k_modes)


class Decoder(Module):
    """Cross-Tamba decoder with learned queries shared across scenarios."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator) -> None:
        super().__init__()
        self.config = config
        self.parameter("queries", rng.standard_normal((config.k_modes, config.d)))
        self.cross = ContextAttention(config.d, config.d_inner, rng)
        self.cross_norm = LayerNorm(config.d)
        self.block = build_block(config, rng, causal=True)
        self.head = Linear(config.d, 2 * config.chunk, rng)
        self.scorer = Scorer(config, rng)
        self.refine_embed = Linear(2, config.d, rng)
        self.refine_block = build_block(config, rng, causal=True)
        self.loc_head = Linear(config.d, 2, rng)
        self.scale_head = Linear(config.d, 2, rng)

    def proposal_parameters(self) -> List[str]:
        """Names of the parameters that only the proposal path uses."""
        modules = (
            ("cross", self.cross),
            ("cross_norm", self.cross_norm),
            ("block", self.block),
            ("head", self.head),
        )
        return ["queries"] + [
            f"{prefix}.{name}"
            for prefix, module in modules
            for name, _ in module.named_parameters()
        ]

    def context(self, memory: SceneMemory, target_id: str) -> Tuple[Tensor, np.ndarray]:
        """Memory row of the target followed by its per-step encoder outputs, (L + 1, d)."""
        row = memory.row(target_id)
        context = concat([memory.memory[row : row + 1], memory.steps[row]], axis=0)
        mask = np.concatenate([[True], memory.step_mask[row]])
        return context, mask

    def decode_proposals(
        self,
        memory: SceneMemory,
        target_id: str,
        context: Optional[Tuple[Tensor, np.ndarray]] = None,
    ) -> Tensor:
        """Recursively emit (K, T', 2) waypoints starting at the target-frame origin."""
        tokens, mask = context if context is not None else self.context(memory, target_id)
        keys, values = self.cross.project_context(tokens)
        config = self.config
        query: Tensor = self.queries
        state: BlockState = self.block.initial_state((config.k_modes,))
        position = Tensor(np.zeros((config.k_modes, 2)))
        waypoints: List[Tensor] = []
        for _ in range(config.future // config.chunk):
            attended = self.cross(query, keys, values, mask, self_term=True)
            query, state = self.block.step(self.cross_norm(query + attended), state)
            deltas = self.head(query).reshape(config.k_modes, config.chunk, 2)
            for offset in range(config.chunk):
                position = position + deltas[:, offset, :]
                waypoints.append(position.unsqueeze(1))
        return concat(waypoints, axis=1)

    def score_proposals(
        self,
        memory: SceneMemory,
        proposals: Tensor,
        target_id: str,
        context: Optional[Tuple[Tensor, np.ndarray]] = None,
    ) -> Tensor:
        """Raw confidence per mode, computed from the proposals with their gradient stopped."""
        tokens, mask = context if context is not None else self.context(memory, target_id)
        keys, values = self.scorer.cross.project_context(tokens)
        return self.scorer(stop_gradient(proposals), keys, values, mask)

    def refine(
        self,
        memory: SceneMemory,
        proposals: Tensor,
        scores: Tensor,
        target_id: str,
    ) -> Tuple[Tensor, Tensor, Tensor]:
        """Laplace location, scale and mixing coefficients on top of the stopped proposals."""
        anchor = stop_gradient(proposals)
        row = memory.row(target_id)
        hidden = self.refine_embed(anchor) + memory.memory[row]
        hidden = self.refine_block(hidden)
        loc = anchor + self.loc_head(hidden)
        scale = softplus(self.scale_head(hidden)) + self.config.scale_floor
        return loc, scale, softmax(scores, axis=-1)

    def __call__(self, memory: SceneMemory, target_id: str) -> DecoderOutput:
        context = self.context(memory, target_id)
        proposals = self.decode_proposals(memory, target_id, context)
        scores = self.score_proposals(memory, proposals, target_id, context)
        loc, scale, pi = self.refine(memory, proposals, scores, target_id)
        return DecoderOutput(proposals=proposals, loc=loc, scale=scale, pi=pi, scores=scores)
