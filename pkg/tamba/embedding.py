"""Polyline embedders, the joint pedestrian/traffic-light path and positional encoding."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from tamba.errors import ConfigurationError, DimensionError, RoutingError
from tamba.nn import LayerNorm, Linear, Module
from tamba.scenario import VEHICULAR, Agent, Category, LightState, Polyline, Scenario
from tamba.tensor import Tensor, as_tensor, concat, gelu, where

TRACK_WIDTH = 13
POINT_WIDTH = 4
MAX_POSITIONS = 512
PE_BASE = 10000.0

_DYNAMIC_ORDER = (Category.VEHICLE, Category.MOTORCYCLE, Category.PEDESTRIAN)
_LIGHT_ORDER = (LightState.RED, LightState.GREEN, LightState.UNKNOWN)
STATIC_CATEGORIES = (Category.LANE, Category.MAP_EDGE, Category.SIDEWALK, Category.TRAFFIC_SIGN)


@lru_cache(maxsize=None)
def positional_table(length: int, width: int) -> np.ndarray:
    """Sinusoid table: even channels sine, odd channels cosine, geometric frequency ladder."""
    positions = np.arange(length, dtype=np.float64)[:, None]
    pairs = np.arange(width, dtype=np.float64) // 2
    angles = positions / np.power(PE_BASE, 2.0 * pairs / width)
    table = np.where(np.arange(width) % 2 == 0, np.sin(angles), np.cos(angles))
    table.flags.writeable = False
    return table


def positional_encode(x: Union[Tensor, np.ndarray], max_positions: int = MAX_POSITIONS) -> Tensor:
    """Add the sinusoid table along the second-to-last axis of ``x`` (shape ``(.., L, d)``).

    Raises
    ------
    ConfigurationError
        If L exceeds the table length.
    """
    tensor = as_tensor(x)
    if tensor.ndim < 2:
        raise DimensionError("positional encoding needs a (.., L, d) input", tensor.shape)
    length, width = tensor.shape[-2], tensor.shape[-1]
    if length > max_positions:
        raise ConfigurationError(
            f"sequence of length {length} exceeds positional table of {max_positions}"
        )
    return tensor + positional_table(max_positions, width)[:length]


def track_features(agent: Agent) -> Tuple[np.ndarray, np.ndarray]:
    """Per-step raw features (L, 13) of an agent track and its validity mask.

    Columns: position, step displacement, heading cos/sin, speed, category one-hot,
    light-state one-hot (zero for agents). Invalid steps are all zero.
    """
    mask = agent.valid_mask()
    features = np.zeros((len(agent.states), TRACK_WIDTH))
    previous: Optional[np.ndarray] = None
    for step, state in enumerate(agent.states):
        if not state.valid:
            previous = None
            continue
        position = state.position
        features[step, 0:2] = position
        if previous is not None:
            features[step, 2:4] = position - previous
        features[step, 4] = np.cos(state.heading)
        features[step, 5] = np.sin(state.heading)
        features[step, 6] = state.speed
        features[step, 7 + _DYNAMIC_ORDER.index(agent.category)] = 1.0
        previous = position
    return features, mask


def light_features(polyline: Polyline, length: int) -> Tuple[np.ndarray, np.ndarray]:
    """Per-step raw features (L, 13) of a traffic light: position plus state one-hot."""
    features = np.zeros((length, TRACK_WIDTH))
    features[:, 0:2] = polyline.xy()[0]
    for step, code in enumerate(polyline.light_states()[:length]):
        features[step, 10 + _LIGHT_ORDER.index(LightState(int(code)))] = 1.0
    return features, np.ones(length, dtype=bool)


def point_features(polyline: Polyline, n_points: int) -> Tuple[np.ndarray, np.ndarray]:
    """Per-point raw features (P, 4), padded at the end to ``n_points``."""
    xy = polyline.xy()
    features = np.zeros((n_points, POINT_WIDTH))
    mask = np.zeros(n_points, dtype=bool)
    count = len(xy)
    features[:count, 0:2] = xy
    features[1:count, 2:4] = np.diff(xy, axis=0)
    mask[:count] = True
    return features, mask


class Embedder(Module):
    """Two affine layers, each followed by normalization: d_raw -> d -> d."""

    def __init__(self, d_raw: int, d: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.d_raw = d_raw
        self.fc1 = Linear(d_raw, d, rng)
        self.norm1 = LayerNorm(d)
        self.fc2 = Linear(d, d, rng)
        self.norm2 = LayerNorm(d)

    def __call__(self, x: Tensor) -> Tensor:
        hidden = gelu(self.norm1(self.fc1(x)))
        return self.norm2(self.fc2(hidden))


class Fusion(Module):
    """Learned cross-category fusion: affine over the concatenated pair, GELU, normalization."""

    def __init__(self, d: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.d = d
        self.proj = Linear(2 * d, d, rng)
        self.norm = LayerNorm(d)

    def __call__(self, first: Tensor, second: Tensor) -> Tensor:
        if first.shape[-1] != self.d or second.shape[-1] != self.d:
            raise DimensionError(
                "fusion inputs must both have the model width", first.shape, second.shape
            )
        return self.norm(gelu(self.proj(concat([first, second], axis=-1))))


@dataclass
class EncodedScene:
    """Embedded tokens of one scenario, grouped by stream."""

    agent_ids: List[str]
    agent_tokens: Tensor
    agent_mask: np.ndarray
    traffic_ids: List[str]
    traffic_tokens: Tensor
    traffic_mask: np.ndarray
    n_pedestrians: int
    scene_ids: List[str]
    scene_points: Tensor
    scene_point_mask: np.ndarray
    scene_tokens: Tensor
    dynamic_ids: List[str]

    @property
    def n_tc(self) -> int:
        return len(self.traffic_ids)

    @property
    def n_scene(self) -> int:
        return len(self.scene_ids)


def masked_mean(tokens: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over the second-to-last axis of ``tokens`` restricted to ``mask``; empty rows give 0."""
    weights = np.asarray(mask, dtype=np.float64)
    counts = np.maximum(weights.sum(axis=-1, keepdims=True), 1.0)
    return (tokens * weights[..., None]).sum(axis=-2) / counts


class EmbedderBank(Module):
    """One embedder per independent category plus the joint pedestrian/traffic-light path.

    With ``joint`` on, pedestrians and traffic lights share ``joint`` and every token is fused
    with the step-wise mean of the other category. With ``joint`` off they get their own
    embedders and no fusion.
    """

    def __init__(self, d: int, rng: np.random.Generator, joint: bool = True) -> None:
        super().__init__()
        self.d = d
        self.joint_mode = joint
        self._routes: Dict[Category, Embedder] = {}
        for category in VEHICULAR:
            self._own_embedder(category, TRACK_WIDTH, rng)
        for category in STATIC_CATEGORIES:
            self._own_embedder(category, POINT_WIDTH, rng)
        if joint:
            shared = Embedder(TRACK_WIDTH, d, rng)
            self.joint = shared
            self.fusion = Fusion(d, rng)
            self._routes[Category.PEDESTRIAN] = shared
            self._routes[Category.TRAFFIC_LIGHT] = shared
        else:
            for category in (Category.PEDESTRIAN, Category.TRAFFIC_LIGHT):
                self._own_embedder(category, TRACK_WIDTH, rng)

    def _own_embedder(self, category: Category, d_raw: int, rng: np.random.Generator) -> None:
        self._routes[category] = self.add_module(category.value, Embedder(d_raw, self.d, rng))

    def route(self, category: Union[Category, str]) -> Embedder:
        try:
            return self._routes[Category(category)]
        except (KeyError, ValueError) as exc:
            raise RoutingError(f"no embedder for category '{category}'") from exc

    def embed_category(
        self,
        features: Union[Tensor, np.ndarray],
        category: Union[Category, str],
        mask: Optional[np.ndarray] = None,
    ) -> Tensor:
        """Embed raw features of one category; steps outside ``mask`` become zero vectors."""
        embedder = self.route(category)
        tensor = as_tensor(features)
        if tensor.shape[-1] != embedder.d_raw:
            raise DimensionError(
                f"category '{Category(category).value}' expects raw width {embedder.d_raw}",
                tensor.shape,
                (embedder.d_raw,),
            )
        out = embedder(tensor)
        if mask is None:
            return out
        return where(np.asarray(mask)[..., None], out)

    def fuse_joint(self, ped: Tensor, tl: Tensor) -> Tensor:
        if not self.joint_mode:
            raise RoutingError("fusion is disabled when the joint encoding is off")
        return self.fusion(ped, tl)

    def _embed_traffic(
        self,
        ped: Tensor,
        ped_mask: np.ndarray,
        lights: Tensor,
        light_mask: np.ndarray,
    ) -> Tensor:
        ped_tokens = self.embed_category(ped, Category.PEDESTRIAN, ped_mask)
        light_tokens = self.embed_category(lights, Category.TRAFFIC_LIGHT, light_mask)
        if not self.joint_mode:
            return concat([ped_tokens, light_tokens], axis=0)
        # Step-wise context from the other category, shape (1, L, d).
        light_context = masked_mean(light_tokens.swapaxes(0, 1), light_mask.T).unsqueeze(0)
        ped_context = masked_mean(ped_tokens.swapaxes(0, 1), ped_mask.T).unsqueeze(0)
        n_ped, n_light = ped_tokens.shape[0], light_tokens.shape[0]
        ped_fused = self.fuse_joint(ped_tokens, _repeat(light_context, n_ped))
        light_fused = self.fuse_joint(light_tokens, _repeat(ped_context, n_light))
        fused = concat([ped_fused, light_fused], axis=0)
        return where(np.concatenate([ped_mask, light_mask], axis=0)[..., None], fused)

    def encode_inputs(self, scenario: Scenario) -> EncodedScene:
        """Embed every element of ``scenario`` (already in the frame it should be encoded in)."""
        length, d = scenario.observed, self.d

        vehicular = [agent for agent in scenario.agents if agent.category in VEHICULAR]
        pedestrians = [agent for agent in scenario.agents if agent.category is Category.PEDESTRIAN]
        lights = [poly for poly in scenario.map if poly.category is Category.TRAFFIC_LIGHT]
        static = [poly for poly in scenario.map if poly.category.is_static]

        agent_rows: List[Tensor] = []
        agent_masks: List[np.ndarray] = []
        for agent in vehicular:
            raw, mask = track_features(agent)
            agent_rows.append(self.embed_category(positional_encode(raw), agent.category, mask))
            agent_masks.append(mask)
        agent_tokens = _stack_or_empty(agent_rows, (0, length, d))
        agent_mask = np.array(agent_masks, dtype=bool).reshape(len(vehicular), length)

        ped_raw, ped_mask = _stack_features(
            [track_features(agent) for agent in pedestrians], length, TRACK_WIDTH
        )
        light_raw, light_mask = _stack_features(
            [light_features(poly, length) for poly in lights], length, TRACK_WIDTH
        )
        traffic_tokens = self._embed_traffic(
            positional_encode(ped_raw), ped_mask, positional_encode(light_raw), light_mask
        )

        n_points = max((len(poly.points) for poly in static), default=0)
        point_rows: List[Tensor] = []
        point_masks: List[np.ndarray] = []
        for poly in static:
            raw, mask = point_features(poly, n_points)
            point_rows.append(self.embed_category(positional_encode(raw), poly.category, mask))
            point_masks.append(mask)
        scene_points = _stack_or_empty(point_rows, (0, n_points, d))
        scene_point_mask = np.array(point_masks, dtype=bool).reshape(len(static), n_points)

        return EncodedScene(
            agent_ids=[agent.id for agent in vehicular],
            agent_tokens=agent_tokens,
            agent_mask=agent_mask,
            traffic_ids=[agent.id for agent in pedestrians] + [poly.id for poly in lights],
            traffic_tokens=traffic_tokens,
            traffic_mask=np.concatenate([ped_mask, light_mask], axis=0),
            n_pedestrians=len(pedestrians),
            scene_ids=[poly.id for poly in static],
            scene_points=scene_points,
            scene_point_mask=scene_point_mask,
            scene_tokens=masked_mean(scene_points, scene_point_mask),
            dynamic_ids=[agent.id for agent in scenario.agents],
        )


def _repeat(tensor: Tensor, count: int) -> Tensor:
    return concat([tensor] * count, axis=0) if count else tensor[:0]


def _stack_or_empty(rows: List[Tensor], empty_shape: Tuple[int, ...]) -> Tensor:
    if not rows:
        return Tensor(np.zeros(empty_shape))
    return concat([row.unsqueeze(0) for row in rows], axis=0)


def _stack_features(
    pairs: List[Tuple[np.ndarray, np.ndarray]], length: int, width: int
) -> Tuple[np.ndarray, np.ndarray]:
    if not pairs:
        return np.zeros((0, length, width)), np.zeros((0, length), dtype=bool)
    return np.stack([raw for raw, _ in pairs]), np.stack([mask for _, mask in pairs])
