"""Synthetic traffic scenes built from closed-form kinematic motifs.

Every track is evaluated analytically at ``t / rate`` so positions are exact integrals of the
stated velocities, and the ground-truth future continues the same formula.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from tamba._utils import normalize_angle
from tamba.errors import GenerationError
from tamba.models.config import GeneratorSpec, Motif
from tamba.scenario import (
    VEHICULAR,
    Agent,
    AgentState,
    Category,
    GroundTruth,
    Horizon,
    LightState,
    Polyline,
    Scenario,
    validate_scenario,
)

logger = logging.getLogger(__name__)

SIDEWALK_GAP = 2.0


@dataclass
class Track:
    positions: np.ndarray
    velocities: np.ndarray
    headings: np.ndarray

    def __len__(self) -> int:
        return len(self.positions)


def _times(steps: int, rate: float) -> np.ndarray:
    return np.arange(steps, dtype=np.float64) / rate


def constant_velocity_track(
    origin: Sequence[float],
    velocity: Sequence[float],
    steps: int,
    rate: float,
    heading: float = 0.0,
) -> Track:
    """``p(t) = p0 + v * t / rate``; a standing track keeps ``heading``."""
    p0, v = np.asarray(origin, dtype=np.float64), np.asarray(velocity, dtype=np.float64)
    times = _times(steps, rate)
    positions = p0 + times[:, None] * v
    direction = math.atan2(v[1], v[0]) if np.any(v) else heading
    return Track(positions, np.tile(v, (steps, 1)), np.full(steps, normalize_angle(direction)))


def turn_track(
    origin: Sequence[float], heading: float, speed: float, turn_rate: float, steps: int, rate: float
) -> Track:
    """Constant speed on a circular arc: ``heading(t) = heading0 + turn_rate * t / rate``."""
    if abs(turn_rate) < 1e-12:
        direction = np.array([math.cos(heading), math.sin(heading)])
        return constant_velocity_track(origin, speed * direction, steps, rate, heading)
    times = _times(steps, rate)
    angles = heading + turn_rate * times
    radius = speed / turn_rate
    p0 = np.asarray(origin, dtype=np.float64)
    positions = p0 + radius * np.stack(
        [np.sin(angles) - math.sin(heading), math.cos(heading) - np.cos(angles)], axis=-1
    )
    velocities = speed * np.stack([np.cos(angles), np.sin(angles)], axis=-1)
    return Track(positions, velocities, np.array([normalize_angle(a) for a in angles]))


def decelerating_track(
    origin: Sequence[float],
    heading: float,
    speed: float,
    deceleration: float,
    steps: int,
    rate: float,
    start: int = 0,
) -> Track:
    """Constant speed until step ``start``, then constant deceleration down to a standstill."""
    direction = np.array([math.cos(heading), math.sin(heading)])
    times = _times(steps, rate)
    braking = np.maximum(times - start / rate, 0.0)
    stop_time = speed / deceleration if deceleration > 0 else math.inf
    clipped = np.minimum(braking, stop_time)
    cruise = np.minimum(times, start / rate)
    distance = speed * cruise + speed * clipped - 0.5 * deceleration * clipped * clipped
    speeds = np.where(braking < stop_time, speed - deceleration * braking, 0.0)
    positions = np.asarray(origin, dtype=np.float64) + distance[:, None] * direction
    return Track(positions, speeds[:, None] * direction, np.full(steps, normalize_angle(heading)))


def _pick_motif(spec: GeneratorSpec, rng: np.random.Generator) -> Motif:
    drawn = (motif for motif, weight in spec.motifs.items() if weight > 0)
    names = sorted(drawn, key=lambda m: m.value)
    if not names:
        raise GenerationError("every motif weight is zero")
    weights = np.array([spec.motifs[name] for name in names], dtype=np.float64)
    return names[int(rng.choice(len(names), p=weights / weights.sum()))]


def _check_feasible(spec: GeneratorSpec) -> None:
    n_vehicular = spec.n_vehicles + spec.n_motorcycles
    if spec.n_targets < 1:
        raise GenerationError("generator settings must request at least one target")
    if spec.n_targets > spec.n_agents:
        raise GenerationError(f"{spec.n_targets} targets requested but only {spec.n_agents} agents")
    if n_vehicular and spec.n_lanes == 0:
        raise GenerationError("lane-following agents need at least one lane")
    if spec.motifs.get(Motif.PEDESTRIAN_CROSSING, 0.0) > 0 and not (
        spec.traffic_light and spec.n_pedestrians
    ):
        raise GenerationError("pedestrian crossings need a traffic light and a pedestrian")


@dataclass
class _Road:
    center: np.ndarray
    heading: float
    half_width: float
    length: float

    @property
    def along(self) -> np.ndarray:
        return np.array([math.cos(self.heading), math.sin(self.heading)])

    @property
    def across(self) -> np.ndarray:
        return np.array([-math.sin(self.heading), math.cos(self.heading)])

    def point(self, longitudinal: float, lateral: float) -> np.ndarray:
        return self.center + longitudinal * self.along + lateral * self.across

    def line(self, lateral: float, n_points: int) -> List[List[float]]:
        if n_points == 1:
            return [self.point(0.0, lateral).tolist()]
        stations = np.linspace(-self.length / 2, self.length / 2, n_points)
        return [self.point(float(s), lateral).tolist() for s in stations]


def _build_map(spec: GeneratorSpec, road: _Road, lights: np.ndarray) -> List[Polyline]:
    def line(polyline_id: str, category: Category, lateral: float) -> Polyline:
        points = road.line(lateral, spec.lane_points)
        return Polyline(id=polyline_id, category=category, points=points)

    polylines = []
    for lane in range(spec.n_lanes):
        lateral = (lane - (spec.n_lanes - 1) / 2.0) * spec.lane_spacing
        polylines.append(line(f"lane_{lane}", Category.LANE, lateral))
    for edge in range(spec.n_map_edges):
        side = 1.0 if edge % 2 == 0 else -1.0
        lateral = side * (road.half_width + (edge // 2) * spec.lane_spacing)
        polylines.append(line(f"map_edge_{edge}", Category.MAP_EDGE, lateral))
    for walk in range(spec.n_sidewalks):
        side = 1.0 if walk % 2 == 0 else -1.0
        lateral = side * (road.half_width + SIDEWALK_GAP)
        polylines.append(line(f"sidewalk_{walk}", Category.SIDEWALK, lateral))
    if spec.traffic_light:
        position = road.point(0.0, road.half_width).tolist()
        polylines.append(
            Polyline(
                id="traffic_light_0",
                category=Category.TRAFFIC_LIGHT,
                points=[position + [float(code) for code in lights]],
            )
        )
    return polylines


def _states(track: Track, count: int) -> List[AgentState]:
    return [
        AgentState(
            x=float(track.positions[t, 0]),
            y=float(track.positions[t, 1]),
            heading=float(track.headings[t]),
            vx=float(track.velocities[t, 0]),
            vy=float(track.velocities[t, 1]),
            valid=True,
        )
        for t in range(count)
    ]


def generate_synthetic(seed: int, spec: GeneratorSpec) -> Tuple[Scenario, GroundTruth]:
    """Draw one scene; the same ``(seed, spec)`` always gives the same scene.

    Raises
    ------
    GenerationError
        If the settings cannot be realized (no targets, lane followers without lanes,
        crossings without a light).
    """
    _check_feasible(spec)
    rng = np.random.default_rng(seed)
    rate, observed, future = spec.sample_rate_hz, spec.observed, spec.future
    steps = observed + future
    motif = _pick_motif(spec, rng)

    horizon_time = steps / rate
    road = _Road(
        center=rng.uniform(-50.0, 50.0, size=2),
        heading=float(rng.uniform(-math.pi, math.pi)),
        half_width=max(spec.n_lanes, 1) * spec.lane_spacing / 2.0,
        length=max(2.0 * spec.speed_range[1] * horizon_time, 20.0),
    )

    # Light state seen by vehicle traffic: green until the switch step, red afterwards.
    switch = int(rng.integers(1, observed + 1)) if motif is Motif.PEDESTRIAN_CROSSING else steps
    lights = np.where(np.arange(observed) < switch, LightState.GREEN, LightState.RED)

    agents: List[Agent] = []
    tracks: Dict[str, Track] = {}
    categories = [Category.VEHICLE] * spec.n_vehicles + [Category.MOTORCYCLE] * spec.n_motorcycles
    for index, category in enumerate(categories):
        lane = index % max(spec.n_lanes, 1)
        lateral = (lane - (spec.n_lanes - 1) / 2.0) * spec.lane_spacing
        start = road.point(float(rng.uniform(-road.length / 2, -road.length / 4)), lateral)
        speed = float(rng.uniform(*spec.speed_range))
        if motif is Motif.TURN:
            omega = float(rng.uniform(*spec.turn_rate_range))
            track = turn_track(start, road.heading, speed, omega, steps, rate)
        elif motif is Motif.YIELDING:
            braking = float(rng.uniform(*spec.deceleration_range))
            track = decelerating_track(start, road.heading, speed, braking, steps, rate)
        elif motif is Motif.PEDESTRIAN_CROSSING:
            braking = float(rng.uniform(*spec.deceleration_range))
            track = decelerating_track(
                start, road.heading, speed, braking, steps, rate, start=switch
            )
        else:
            track = constant_velocity_track(start, speed * road.along, steps, rate, road.heading)
        agent_id = f"{category.value}_{index}"
        tracks[agent_id] = track
        agents.append(Agent(id=agent_id, category=category, states=_states(track, observed)))

    for index in range(spec.n_pedestrians):
        walk_speed = float(rng.uniform(*spec.pedestrian_speed_range))
        curb = road.point(float(rng.uniform(-3.0, 3.0)), road.half_width + SIDEWALK_GAP / 2)
        if motif is Motif.PEDESTRIAN_CROSSING and index == 0:
            cross = -road.across
            facing = math.atan2(cross[1], cross[0])
            standing = constant_velocity_track(curb, np.zeros(2), steps, rate, facing)
            walking = constant_velocity_track(curb, walk_speed * cross, steps, rate)
            waiting = np.arange(steps) < switch
            walked = np.maximum(np.arange(steps) - switch, 0)[:, None] / rate
            shifted = curb + walked * walk_speed * cross
            track = Track(
                positions=np.where(waiting[:, None], standing.positions, shifted),
                velocities=np.where(waiting[:, None], standing.velocities, walking.velocities),
                headings=walking.headings,
            )
        else:
            track = constant_velocity_track(
                curb, walk_speed * road.along, steps, rate, road.heading
            )
        agent_id = f"pedestrian_{index}"
        tracks[agent_id] = track
        states = _states(track, observed)
        agents.append(Agent(id=agent_id, category=Category.PEDESTRIAN, states=states))

    vehicular = [agent.id for agent in agents if agent.category in VEHICULAR]
    others = [agent.id for agent in agents if agent.category not in VEHICULAR]
    targets = (vehicular + others)[: spec.n_targets]
    truth = GroundTruth(futures={key: tracks[key].positions[observed:].tolist() for key in targets})

    scenario = Scenario(
        sample_rate_hz=rate,
        horizon=Horizon(observed=observed, future=future),
        agents=agents,
        map=_build_map(spec, road, lights),
        targets=targets,
    )
    logger.debug("Generated %s scene with %d agents (seed %d)", motif.value, len(agents), seed)
    return validate_scenario(scenario), truth
