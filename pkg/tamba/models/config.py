from __future__ import annotations

import json
from enum import Enum
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import pydantic
from camel_converter.pydantic_base import CamelBase
from pydantic import ConfigDict, Field, field_validator, model_validator

from tamba.config import Profile
from tamba.errors import ConfigurationError


class BlockKind(str, Enum):
    """Sequence operator used inside every encoder and decoder block.

    Attributes
    ----------
    TAMBA : str
        Selective state-space block, matrices emitted per token.
    MAMBA : str
        State-space block with learned constant matrices.
    ATTENTION : str
        Single-head softmax attention block.
    """

    TAMBA = "tamba"
    MAMBA = "mamba"
    ATTENTION = "attention"


class WinnerCriterion(str, Enum):
    MIN_ADE = "min_ade"
    MIN_FDE = "min_fde"


class Motif(str, Enum):
    CONSTANT_VELOCITY = "constant_velocity"
    TURN = "turn"
    YIELDING = "yielding"
    PEDESTRIAN_CROSSING = "pedestrian_crossing"


class StrictModel(CamelBase):
    model_config = ConfigDict(extra="forbid")


class ModelConfig(StrictModel):
    """Widths and switches of the prediction network.

    Parameters
    ----------
    d: int
        Token width shared by embedders, encoder stacks and decoder.
    n_state: int
        State width of the state-space recurrence.
    d_inner: int
        Internal block width (control width m and output width p).
    d_ff: int
        Hidden width of every feedforward.
    depth: int
        Blocks per encoder stack.
    k_modes: int
        Number of learned decoder queries.
    observed: int
        Observed steps T.
    future: int
        Predicted steps T'.
    chunk: int
        Future steps emitted per recursive decoder step.
    """

    d: int = Field(default=32, ge=1)
    n_state: int = Field(default=8, ge=1)
    d_inner: int = Field(default=32, ge=1)
    d_ff: int = Field(default=64, ge=1)
    depth: int = Field(default=2, ge=1)
    conv_width: int = Field(default=4, ge=1)
    k_modes: int = Field(default=6, ge=1)
    observed: int = Field(default=20, ge=1)
    future: int = Field(default=30, ge=1)
    chunk: int = Field(default=1, ge=1)
    scorer_hidden: int = Field(default=32, ge=1)
    block_kind: BlockKind = BlockKind.TAMBA
    joint: bool = True
    scale_floor: float = Field(default=1e-3, gt=0.0)

    @model_validator(mode="after")
    def check_chunk(self) -> "ModelConfig":
        if self.future % self.chunk:
            raise ValueError(f"chunk {self.chunk} does not divide future {self.future}")
        return self


class OptimizerConfig(StrictModel):
    # Full-size runs use lr 1e-3, batch 128 and 50 epochs.
    lr: float = Field(default=1e-3, gt=0.0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    eps: float = Field(default=1e-8, gt=0.0)
    plateau_factor: float = Field(default=0.1, gt=0.0, lt=1.0)
    plateau_patience: int = Field(default=5, ge=0)
    plateau_threshold: float = Field(default=1e-4, ge=0.0)


class LossConfig(StrictModel):
    cls_weight: float = Field(default=1.0, ge=0.0)
    winner: WinnerCriterion = WinnerCriterion.MIN_ADE


class GeneratorSpec(StrictModel):
    """Shape of the synthetic scenes.

    Motif weights are relative; a motif with weight 0 is never drawn.
    """

    observed: int = Field(default=20, ge=2)
    future: int = Field(default=30, ge=1)
    sample_rate_hz: float = Field(default=10.0, gt=0.0)
    n_lanes: int = Field(default=3, ge=0)
    n_map_edges: int = Field(default=2, ge=0)
    n_sidewalks: int = Field(default=1, ge=0)
    lane_points: int = Field(default=10, ge=1)
    lane_spacing: float = Field(default=3.5, gt=0.0)
    n_vehicles: int = Field(default=2, ge=0)
    n_motorcycles: int = Field(default=0, ge=0)
    n_pedestrians: int = Field(default=1, ge=0)
    traffic_light: bool = True
    n_targets: int = Field(default=1, ge=0)
    speed_range: Tuple[float, float] = (3.0, 12.0)
    pedestrian_speed_range: Tuple[float, float] = (0.8, 1.8)
    turn_rate_range: Tuple[float, float] = (-0.3, 0.3)
    deceleration_range: Tuple[float, float] = (0.5, 2.0)
    motifs: Dict[Motif, float] = Field(
        default_factory=lambda: {
            Motif.CONSTANT_VELOCITY: 1.0,
            Motif.TURN: 1.0,
            Motif.YIELDING: 1.0,
            Motif.PEDESTRIAN_CROSSING: 1.0,
        }
    )

    @field_validator(
        "speed_range", "pedestrian_speed_range", "turn_rate_range", "deceleration_range"
    )
    @classmethod
    def check_range(cls, v: Tuple[float, float]) -> Tuple[float, float]:
        if v[0] > v[1]:
            raise ValueError(f"range lower bound {v[0]} exceeds upper bound {v[1]}")
        return v

    @property
    def n_agents(self) -> int:
        return self.n_vehicles + self.n_motorcycles + self.n_pedestrians

    @classmethod
    def constant_velocity_only(cls, **overrides: object) -> "GeneratorSpec":
        fields: Dict[str, object] = {
            "motifs": {Motif.CONSTANT_VELOCITY: 1.0},
            "n_pedestrians": 0,
            "traffic_light": False,
        }
        fields.update(overrides)
        return cls(**fields)


class DataConfig(StrictModel):
    generator: GeneratorSpec = Field(default_factory=GeneratorSpec)
    directory: Optional[str] = None
    n_train: int = Field(default=512, ge=1)
    n_val: int = Field(default=128, ge=1)
    n_eval: int = Field(default=128, ge=1)
    val_fraction: float = Field(default=0.2, gt=0.0, lt=1.0)


class RunConfig(StrictModel):
    """Everything a harness command needs besides its output directory."""

    model: ModelConfig = Field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    # Full-size runs use a batch of 128.
    batch_size: int = Field(default=16, ge=1)
    epochs: int = Field(default=20, ge=1)
    seed: int = 0
    workers: int = Field(default=1, ge=1)
    profile: Profile = Profile.DEBUG

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "RunConfig":
        """Read a JSON run configuration.

        Raises
        ------
        ConfigurationError
            If the file cannot be read, is not JSON, or holds unknown or invalid keys.
        """
        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigurationError(f"Cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigurationError(
                f"Config {path} is not valid JSON (line {exc.lineno}, column {exc.colno})"
            ) from exc
        return cls.from_dict(payload)

    @classmethod
    def from_dict(cls, payload: object) -> "RunConfig":
        try:
            return cls.model_validate(payload)
        except pydantic.ValidationError as exc:
            raise ConfigurationError(_describe_validation(exc)) from exc

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True)


def _describe_validation(exc: pydantic.ValidationError) -> str:
    problems = []
    for error in exc.errors():
        location = ".".join(str(part) for part in error["loc"])
        problems.append(f"{location}: {error['msg']}")
    return "; ".join(problems)
