"""Traffic scenes: schema, validation, file IO and the agent-centric frame."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from enum import Enum, IntEnum
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

import numpy as np
import pydantic
from pydantic import Field, field_validator, model_validator

from tamba._utils import normalize_angle, rotation
from tamba.errors import ScenarioParseError, ScenarioValidationError, TargetNotFoundError
from tamba.models.config import StrictModel

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class Category(str, Enum):
    VEHICLE = "vehicle"
    MOTORCYCLE = "motorcycle"
    PEDESTRIAN = "pedestrian"
    TRAFFIC_LIGHT = "traffic_light"
    LANE = "lane"
    MAP_EDGE = "map_edge"
    SIDEWALK = "sidewalk"
    TRAFFIC_SIGN = "traffic_sign"

    @property
    def is_dynamic(self) -> bool:
        return self in DYNAMIC

    @property
    def is_traffic_control(self) -> bool:
        return self in TRAFFIC_CONTROL

    @property
    def is_static(self) -> bool:
        return self in STATIC


DYNAMIC = frozenset({Category.VEHICLE, Category.MOTORCYCLE, Category.PEDESTRIAN})
TRAFFIC_CONTROL = frozenset({Category.PEDESTRIAN, Category.TRAFFIC_LIGHT})
STATIC = frozenset(set(Category) - DYNAMIC - TRAFFIC_CONTROL)
VEHICULAR = (Category.VEHICLE, Category.MOTORCYCLE)


class LightState(IntEnum):
    UNKNOWN = 0
    RED = 1
    GREEN = 2


class AgentState(StrictModel):
    x: float = 0.0
    y: float = 0.0
    heading: float = 0.0
    vx: float = 0.0
    vy: float = 0.0
    valid: bool = True
    timestep: int = Field(default=0, exclude=True)

    @field_validator("heading")
    @classmethod
    def wrap_heading(cls, v: float) -> float:
        return normalize_angle(v)

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def velocity(self) -> np.ndarray:
        return np.array([self.vx, self.vy])

    @property
    def speed(self) -> float:
        return math.hypot(self.vx, self.vy)


class Agent(StrictModel):
    id: str
    category: Category
    states: List[AgentState]

    @model_validator(mode="after")
    def number_states(self) -> "Agent":
        for step, state in enumerate(self.states):
            state.timestep = step
        return self

    def positions(self) -> np.ndarray:
        return np.array([[state.x, state.y] for state in self.states]).reshape(-1, 2)

    def valid_mask(self) -> np.ndarray:
        return np.array([state.valid for state in self.states], dtype=bool)


class Polyline(StrictModel):
    id: str
    category: Category
    points: List[List[float]]

    @property
    def dim(self) -> int:
        return len(self.points[0]) if self.points else 0

    def xy(self) -> np.ndarray:
        return np.array([point[:2] for point in self.points], dtype=np.float64).reshape(-1, 2)

    def light_states(self) -> np.ndarray:
        """Per-step light state codes of a traffic-light polyline."""
        return np.array(self.points[0][2:], dtype=np.int64)


class Horizon(StrictModel):
    observed: int
    future: int


class GroundTruth(StrictModel):
    futures: Dict[str, List[List[float]]] = Field(default_factory=dict)

    def positions(self, target_id: str) -> np.ndarray:
        try:
            return np.array(self.futures[target_id], dtype=np.float64).reshape(-1, 2)
        except KeyError as exc:
            raise TargetNotFoundError(f"no ground truth for target '{target_id}'") from exc


class Scenario(StrictModel):
    version: Literal[1] = SCHEMA_VERSION
    sample_rate_hz: float = 10.0
    horizon: Horizon
    agents: List[Agent]
    map: List[Polyline] = Field(default_factory=list)
    targets: List[str]
    ground_truth: Optional[Dict[str, List[List[float]]]] = None

    @property
    def observed(self) -> int:
        return self.horizon.observed

    @property
    def future(self) -> int:
        return self.horizon.future

    @property
    def dt(self) -> float:
        return 1.0 / self.sample_rate_hz

    def agent(self, agent_id: str) -> Agent:
        for agent in self.agents:
            if agent.id == agent_id:
                return agent
        raise TargetNotFoundError(f"agent '{agent_id}' is not part of the scenario")

    def truth(self) -> Optional[GroundTruth]:
        if self.ground_truth is None:
            return None
        return GroundTruth(futures=self.ground_truth)

    def with_ground_truth(self, truth: Optional[GroundTruth]) -> "Scenario":
        futures = None if truth is None else dict(truth.futures)
        return self.model_copy(update={"ground_truth": futures})

    def to_document(self) -> dict:
        return self.model_dump(mode="json", exclude_none=True)


@dataclass(frozen=True)
class FrameTransform:
    """Rigid map from world coordinates into the frame of a pose.

    ``apply_points`` sends ``origin`` to (0, 0) and ``heading`` to 0; ``invert_points`` undoes it.
    """

    origin: Tuple[float, float]
    heading: float

    @property
    def _to_frame(self) -> np.ndarray:
        return rotation(-self.heading)

    def apply_points(self, points: np.ndarray) -> np.ndarray:
        shifted = np.asarray(points, dtype=np.float64) - np.asarray(self.origin)
        return shifted @ self._to_frame.T

    def invert_points(self, points: np.ndarray) -> np.ndarray:
        rotated = np.asarray(points, dtype=np.float64) @ rotation(self.heading).T
        return rotated + np.asarray(self.origin)

    def apply_vectors(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors, dtype=np.float64) @ self._to_frame.T

    def invert_vectors(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors, dtype=np.float64) @ rotation(self.heading).T

    def apply_heading(self, heading: float) -> float:
        return normalize_angle(heading - self.heading)

    def invert_heading(self, heading: float) -> float:
        return normalize_angle(heading + self.heading)


def validate_scenario(scenario: Scenario) -> Scenario:
    """Check the invariants that the schema alone cannot express.

    Raises
    ------
    ScenarioValidationError
        Naming the first offending agent, polyline or target.
    """
    observed, future = scenario.observed, scenario.future
    if observed < 1 or future < 1:
        raise ScenarioValidationError(f"horizon must be positive, got {observed}/{future}")
    if not scenario.sample_rate_hz > 0:
        raise ScenarioValidationError(
            f"sample rate must be positive, got {scenario.sample_rate_hz}"
        )

    seen = set()
    for agent in scenario.agents:
        if agent.id in seen:
            raise ScenarioValidationError(f"agent id '{agent.id}' is used twice")
        seen.add(agent.id)
        if not agent.category.is_dynamic:
            raise ScenarioValidationError(
                f"agent '{agent.id}' has non-dynamic category '{agent.category.value}'"
            )
        if len(agent.states) != observed:
            raise ScenarioValidationError(
                f"agent '{agent.id}' has {len(agent.states)} states, horizon observes {observed}"
            )
        for state in agent.states:
            values = (state.x, state.y, state.heading, state.vx, state.vy)
            if not all(math.isfinite(value) for value in values):
                raise ScenarioValidationError(
                    f"agent '{agent.id}' has a non-finite state at step {state.timestep}"
                )

    for polyline in scenario.map:
        if polyline.id in seen:
            raise ScenarioValidationError(f"polyline id '{polyline.id}' is used twice")
        seen.add(polyline.id)
        _validate_polyline(polyline, observed)

    if len(set(scenario.targets)) != len(scenario.targets):
        raise ScenarioValidationError("target list contains duplicates")
    agents = {agent.id: agent for agent in scenario.agents}
    for target_id in scenario.targets:
        if target_id not in agents:
            raise ScenarioValidationError(f"target '{target_id}' is not among the agents")
        if not agents[target_id].states[-1].valid:
            raise ScenarioValidationError(
                f"target '{target_id}' is not valid at the final observed step"
            )

    for target_id, points in (scenario.ground_truth or {}).items():
        if target_id not in agents:
            raise ScenarioValidationError(f"ground truth for unknown agent '{target_id}'")
        if len(points) != future or any(len(point) != 2 for point in points):
            raise ScenarioValidationError(
                f"ground truth of '{target_id}' must hold {future} two-dimensional points"
            )
    return scenario


def _validate_polyline(polyline: Polyline, observed: int) -> None:
    if polyline.category.is_dynamic:
        raise ScenarioValidationError(
            f"polyline '{polyline.id}' has dynamic category '{polyline.category.value}'"
        )
    if not polyline.points:
        raise ScenarioValidationError(f"polyline '{polyline.id}' has no points")
    dim = polyline.dim
    if dim < 2 or any(len(point) != dim for point in polyline.points):
        raise ScenarioValidationError(
            f"polyline '{polyline.id}' points must share one dimensionality of at least 2"
        )
    if not np.all(np.isfinite(np.asarray(polyline.points, dtype=np.float64))):
        raise ScenarioValidationError(f"polyline '{polyline.id}' has non-finite points")
    if polyline.category is Category.TRAFFIC_LIGHT:
        if len(polyline.points) != 1 or dim != 2 + observed:
            raise ScenarioValidationError(
                f"traffic light '{polyline.id}' must be one point carrying {observed} states"
            )
        codes = polyline.points[0][2:]
        if any(code not in {state.value for state in LightState} for code in codes):
            raise ScenarioValidationError(
                f"traffic light '{polyline.id}' has an unknown state code"
            )


def parse_scenario(text: str, source: str = "<string>") -> Scenario:
    """Parse and validate a scenario document held in memory.

    Raises
    ------
    ScenarioParseError
        If the text is not JSON or does not match the schema; the message carries the line and
        column, or the dotted path of the offending field.
    ScenarioValidationError
        If an invariant does not hold.
    """
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioParseError(
            f"{source}: line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc
    try:
        scenario = Scenario.model_validate(payload)
    except pydantic.ValidationError as exc:
        first = exc.errors()[0]
        location = ".".join(str(part) for part in first["loc"])
        raise ScenarioParseError(f"{source}: field '{location}': {first['msg']}") from exc
    return validate_scenario(scenario)


def load_scenario(path: Union[str, Path]) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioParseError(f"cannot read {path}: {exc}") from exc
    return parse_scenario(text, source=str(path))


def dump_scenario(scenario: Scenario) -> str:
    return json.dumps(scenario.to_document(), sort_keys=True, indent=1) + "\n"


def save_scenario(path: Union[str, Path], scenario: Scenario) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_scenario(scenario), encoding="utf-8")
    return path


def to_agent_frame(scenario: Scenario, target_id: str) -> Tuple[Scenario, FrameTransform]:
    """Express the whole scene in the frame of the target's final observed pose.

    Invalid (zero-filled) states stay zero. Traffic-light state codes and any point attributes
    beyond the first two columns are carried over untouched.

    Raises
    ------
    TargetNotFoundError
        If ``target_id`` is not an agent of the scenario.
    """
    final = scenario.agent(target_id).states[-1]
    transform = FrameTransform(origin=(final.x, final.y), heading=final.heading)

    agents = []
    for agent in scenario.agents:
        states = []
        for state in agent.states:
            if not state.valid:
                states.append(state.model_copy())
                continue
            x, y = transform.apply_points(state.position)
            vx, vy = transform.apply_vectors(state.velocity)
            states.append(
                state.model_copy(
                    update={
                        "x": float(x),
                        "y": float(y),
                        "vx": float(vx),
                        "vy": float(vy),
                        "heading": transform.apply_heading(state.heading),
                    }
                )
            )
        agents.append(agent.model_copy(update={"states": states}))

    polylines = []
    for polyline in scenario.map:
        points = np.asarray(polyline.points, dtype=np.float64)
        moved = transform.apply_points(points[:, :2])
        rows = [xy + extra for xy, extra in zip(moved.tolist(), points[:, 2:].tolist())]
        polylines.append(polyline.model_copy(update={"points": rows}))

    truth = None
    if scenario.ground_truth is not None:
        truth = {
            key: transform.apply_points(np.reshape(points, (-1, 2))).tolist()
            for key, points in scenario.ground_truth.items()
        }
    framed = scenario.model_copy(update={"agents": agents, "map": polylines, "ground_truth": truth})
    return framed, transform
