"""Three parallel encoders (temporal, scene, traffic) and the shared scene memory."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from tamba.blocks import SequenceBlock, build_block
from tamba.embedding import EncodedScene, masked_mean
from tamba.errors import ContractError, DimensionError
from tamba.models.config import ModelConfig
from tamba.nn import Linear, Module
from tamba.tensor import MASK_VALUE, Tensor, concat, softmax, where


class BlockStack(Module):
    """``depth`` blocks applied in order; masked steps are zeroed before and after each block."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator) -> None:
        super().__init__()
        self.blocks: List[SequenceBlock] = []
        for index in range(config.depth):
            self.blocks.append(self.add_module(f"block{index}", build_block(config, rng)))

    def __call__(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        keep = None if mask is None else np.asarray(mask)[..., None]
        for block in self.blocks:
            if keep is not None:
                x = where(keep, x)
            x = block(x)
        return x if keep is None else where(keep, x)


class CrossAttention(Module):
    """``Z_i = sum_j softmax_j(q(A_i) . k(S_j)) v(S_j)``, unscaled dot products."""

    def __init__(self, d: int, d_key: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.d, self.d_key = d, d_key
        self.q_proj = Linear(d, d_key, rng)
        self.k_proj = Linear(d, d_key, rng)
        self.v_proj = Linear(d, d, rng)

    def weights(self, queries: Tensor, keys: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        if queries.shape[-1] != self.d or keys.shape[-1] != self.d:
            raise DimensionError(
                "cross-attention inputs must have the model width", queries.shape, keys.shape
            )
        logits = self.q_proj(queries) @ self.k_proj(keys).swapaxes(-1, -2)
        if mask is not None:
            logits = logits + (1.0 - np.asarray(mask, dtype=np.float64)) * MASK_VALUE
        return softmax(logits, axis=-1)

    def __call__(self, queries: Tensor, keys: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        return self.weights(queries, keys, mask) @ self.v_proj(keys)


@dataclass
class SceneMemory:
    """Per-agent context shared by every decoder query.

    Rows follow the scenario's agent order. ``steps`` keeps each agent's per-step encoder output
    for decoder cross-attention.
    """

    agent_ids: List[str]
    z_time: Tensor
    z_scene: Tensor
    z_traffic: Tensor
    memory: Tensor
    steps: Tensor
    step_mask: np.ndarray

    def row(self, agent_id: str) -> int:
        try:
            return self.agent_ids.index(agent_id)
        except ValueError as exc:
            raise ContractError(f"agent '{agent_id}' has no row in the scene memory") from exc

    @property
    def concatenated(self) -> Tensor:
        return concat([self.z_time, self.z_scene, self.z_traffic], axis=-1)


class EncoderStack(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator) -> None:
        super().__init__()
        self.config = config
        self.temporal = BlockStack(config, rng)
        self.scene = BlockStack(config, rng)
        self.traffic = BlockStack(config, rng)
        self.scene_cross = CrossAttention(config.d, config.d_inner, rng)
        self.traffic_cross = CrossAttention(config.d, config.d_inner, rng)
        self.memory_proj = Linear(3 * config.d, config.d, rng)

    def encode_temporal(self, agent_tokens: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        return self.temporal(agent_tokens, mask)

    def encode_scene(self, scene_points: Tensor, point_mask: np.ndarray) -> Tensor:
        """Run the scene stack over each polyline's points, then pool to one token each."""
        return masked_mean(self.scene(scene_points, point_mask), point_mask)

    def encode_scene_cross(self, agent_summary: Tensor, scene_tokens: Tensor) -> Tensor:
        """Scene context per agent.

        Raises
        ------
        ContractError
            If there is no scene element to attend to.
        """
        if scene_tokens.shape[0] == 0:
            raise ContractError("scene cross-attention needs at least one scene element")
        return self.scene_cross(agent_summary, scene_tokens)

    def encode_traffic_cross(
        self,
        dyn_summary: Tensor,
        traffic_summary: Tensor,
        mask: Optional[np.ndarray] = None,
    ) -> Tensor:
        """Traffic-control context per vehicle; zero when no traffic-control token is present."""
        if mask is None:
            present = np.ones(traffic_summary.shape[0], dtype=bool)
        else:
            present = np.asarray(mask, dtype=bool)
        if not present.any():
            return Tensor(np.zeros((dyn_summary.shape[0], self.config.d)))
        return self.traffic_cross(dyn_summary, traffic_summary, present)

    def build_scene_memory(self, encoded: EncodedScene) -> SceneMemory:
        d = self.config.d
        if encoded.n_scene == 0:
            raise ContractError("scene cross-attention needs at least one scene element")
        temporal = self.encode_temporal(encoded.agent_tokens, encoded.agent_mask)
        traffic = self.traffic(encoded.traffic_tokens, encoded.traffic_mask)
        scene_tokens = self.encode_scene(encoded.scene_points, encoded.scene_point_mask)

        n_ped = encoded.n_pedestrians
        vehicle_summary = temporal[:, -1, :]
        pedestrian_steps = traffic[:n_ped]
        traffic_summary = traffic[:, -1, :]

        # Stream order (vehicles, then pedestrians) mapped back to scenario order.
        stream_ids = encoded.agent_ids + encoded.traffic_ids[:n_ped]
        order = np.array(
            [stream_ids.index(agent_id) for agent_id in encoded.dynamic_ids], dtype=np.int64
        )

        summary = concat([vehicle_summary, pedestrian_steps[:, -1, :]], axis=0)[order]
        z_scene = self.encode_scene_cross(summary, scene_tokens)
        vehicle_traffic = self.encode_traffic_cross(
            vehicle_summary, traffic_summary, encoded.traffic_mask[:, -1]
        )
        z_traffic = concat([vehicle_traffic, Tensor(np.zeros((n_ped, d)))], axis=0)[order]
        z_time = summary
        memory = self.memory_proj(concat([z_time, z_scene, z_traffic], axis=-1))
        if memory.shape[-1] != d:
            raise DimensionError(
                "memory projection width differs from the model width", memory.shape, (d,)
            )

        steps = concat([temporal, pedestrian_steps], axis=0)[order]
        step_mask = np.concatenate([encoded.agent_mask, encoded.traffic_mask[:n_ped]], axis=0)
        step_mask = step_mask[order]
        return SceneMemory(
            agent_ids=list(encoded.dynamic_ids),
            z_time=z_time,
            z_scene=z_scene,
            z_traffic=z_traffic,
            memory=memory,
            steps=steps,
            step_mask=step_mask,
        )

    def __call__(self, encoded: EncodedScene) -> SceneMemory:
        return self.build_scene_memory(encoded)
