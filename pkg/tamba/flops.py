"""Analytic forward cost of the network, computed from a model config and a scene size.

Counts follow what ``FlopCounter`` charges: ``2 * m * k * n`` per matrix product and the dense
``2 * n * n`` per token and step of a state-space scan. Elementwise work is free.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from tamba.embedding import POINT_WIDTH, TRACK_WIDTH
from tamba.models.config import BlockKind, ModelConfig
from tamba.scenario import VEHICULAR, Category, Scenario


@dataclass(frozen=True)
class ScenarioSize:
    n_vehicles: int
    n_pedestrians: int
    n_lights: int
    n_scene: int
    n_points: int
    observed: int
    # Traffic-control tokens valid at the last observed step; all of them when None.
    n_traffic_final: Optional[int] = None

    @property
    def n_agents(self) -> int:
        return self.n_vehicles + self.n_pedestrians

    @property
    def n_traffic(self) -> int:
        return self.n_pedestrians + self.n_lights

    @classmethod
    def of(cls, scenario: Scenario) -> "ScenarioSize":
        static = [poly for poly in scenario.map if poly.category.is_static]
        pedestrians = [agent for agent in scenario.agents if agent.category is Category.PEDESTRIAN]
        n_lights = sum(poly.category is Category.TRAFFIC_LIGHT for poly in scenario.map)
        return cls(
            n_vehicles=sum(agent.category in VEHICULAR for agent in scenario.agents),
            n_pedestrians=len(pedestrians),
            n_lights=n_lights,
            n_scene=len(static),
            n_points=max((len(poly.points) for poly in static), default=0),
            observed=scenario.observed,
            n_traffic_final=n_lights + sum(bool(agent.valid_mask()[-1]) for agent in pedestrians),
        )


def linear_flops(d_in: int, d_out: int) -> int:
    return 2 * d_in * d_out


def feedforward_flops(d: int, d_ff: int) -> int:
    return linear_flops(d, d_ff) + linear_flops(d_ff, d)


def gru_flops(d_in: int, hidden: int) -> int:
    return linear_flops(d_in, 3 * hidden) + linear_flops(hidden, 3 * hidden)


def embedder_flops(d_raw: int, d: int) -> int:
    return linear_flops(d_raw, d) + linear_flops(d, d)


def _skeleton_flops(config: ModelConfig) -> int:
    return linear_flops(config.d_inner, config.d) + feedforward_flops(config.d, config.d_ff)


def _state_space_token_flops(config: ModelConfig) -> int:
    d, m, n = config.d, config.d_inner, config.n_state
    p = m
    scan = 2 * (n * n + n * m + p * n + p * m)
    projections = 0
    if config.block_kind is BlockKind.TAMBA:
        projections = (
            linear_flops(m, n)
            + linear_flops(m, n * m)
            + linear_flops(m, p * n)
            + linear_flops(m, p * m)
        )
    return linear_flops(d, m) + projections + scan + _skeleton_flops(config)


def _attention_token_flops(config: ModelConfig) -> int:
    return 3 * linear_flops(config.d, config.d_inner) + _skeleton_flops(config)


def block_flops(config: ModelConfig, length: int) -> int:
    """One block of ``config.block_kind`` over a sequence of ``length`` tokens."""
    if config.block_kind is BlockKind.ATTENTION:
        return length * _attention_token_flops(config) + 4 * length * length * config.d_inner
    return length * _state_space_token_flops(config)


def block_step_flops(config: ModelConfig, position: int) -> int:
    """One recurrent block step for the token at 1-based ``position``."""
    if config.block_kind is BlockKind.ATTENTION:
        return _attention_token_flops(config) + 4 * position * config.d_inner
    return block_flops(config, 1)


def cross_attention_flops(d: int, d_key: int, n_queries: int, n_keys: int) -> int:
    """Queries, keys and values projected, then attended."""
    projections = n_queries * linear_flops(d, d_key)
    projections += n_keys * (linear_flops(d, d_key) + linear_flops(d, d))
    return projections + 2 * n_queries * n_keys * (d_key + d)


def context_attention_flops(
    d: int, d_key: int, n_queries: int, n_context: int, self_term: bool = False
) -> int:
    """Queries over an already projected context, optionally attending to themselves too."""
    total = n_queries * linear_flops(d, d_key)
    if self_term:
        total += n_queries * (linear_flops(d, d_key) + linear_flops(d, d))
    return total + 2 * n_queries * n_context * (d_key + d)


def context_projection_flops(d: int, d_key: int, n_context: int) -> int:
    return n_context * (linear_flops(d, d_key) + linear_flops(d, d))


def embedding_flops(config: ModelConfig, size: ScenarioSize) -> int:
    d, length = config.d, size.observed
    track = embedder_flops(TRACK_WIDTH, d)
    fusion = linear_flops(2 * d, d) if config.joint else 0
    total = size.n_vehicles * length * track
    total += size.n_traffic * length * (track + fusion)
    return total + size.n_scene * size.n_points * embedder_flops(POINT_WIDTH, d)


def encoder_flops(config: ModelConfig, size: ScenarioSize) -> int:
    """Three stacks, both cross-attentions and the memory projection.

    The traffic cross-attention only runs when a traffic-control token is valid at the last
    observed step.
    """
    d, d_key, depth, length = config.d, config.d_inner, config.depth, size.observed
    n_traffic = size.n_traffic
    final = n_traffic if size.n_traffic_final is None else size.n_traffic_final
    total = depth * size.n_vehicles * block_flops(config, length)
    total += depth * size.n_scene * block_flops(config, size.n_points)
    total += depth * n_traffic * block_flops(config, length)
    total += cross_attention_flops(d, d_key, size.n_agents, size.n_scene)
    if final:
        total += cross_attention_flops(d, d_key, size.n_vehicles, n_traffic)
    return total + size.n_agents * linear_flops(3 * d, d)


def scorer_flops(config: ModelConfig, n_context: int) -> int:
    d, k_modes, future = config.d, config.k_modes, config.future
    tokens = k_modes * future
    total = context_projection_flops(d, config.d_inner, n_context)
    total += tokens * (linear_flops(2, d) + gru_flops(d, config.scorer_hidden))
    total += context_attention_flops(d, config.d_inner, tokens, n_context)
    return total + k_modes * linear_flops(config.scorer_hidden, 1)


def decoder_flops(config: ModelConfig, length: int) -> int:
    """Recursive proposals, scoring and refinement for one target with ``length`` observed steps."""
    d, d_key, k_modes, future = config.d, config.d_inner, config.k_modes, config.future
    n_context = length + 1
    total = context_projection_flops(d, d_key, n_context)
    for position in range(1, future // config.chunk + 1):
        total += context_attention_flops(d, d_key, k_modes, n_context, self_term=True)
        total += k_modes * block_step_flops(config, position)
        total += k_modes * linear_flops(d, 2 * config.chunk)
    total += scorer_flops(config, n_context)
    total += k_modes * future * linear_flops(2, d)
    total += k_modes * block_flops(config, future)
    return total + k_modes * future * 2 * linear_flops(d, 2)


def forward_flops(config: ModelConfig, size: ScenarioSize) -> int:
    """Matrix-product FLOPs of one target's forward pass on a scene of ``size``."""
    total = embedding_flops(config, size) + encoder_flops(config, size)
    return total + decoder_flops(config, size.observed)
