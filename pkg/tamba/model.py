"""End-to-end predictor: embed, encode, decode."""

from __future__ import annotations

from typing import Dict, Tuple

import numpy as np

from tamba.decoder import Decoder, DecoderOutput, PredictionSet
from tamba.embedding import EmbedderBank
from tamba.encoder import EncoderStack
from tamba.errors import ConfigurationError
from tamba.flops import ScenarioSize, forward_flops
from tamba.models.config import ModelConfig
from tamba.nn import Module
from tamba.scenario import FrameTransform, Scenario, to_agent_frame
from tamba.tensor import no_grad


class TambaModel(Module):
    """Embedder bank, encoder stack and decoder built from one seed."""

    def __init__(self, config: ModelConfig, seed: int = 0) -> None:
        super().__init__()
        self.config = config
        rng = np.random.default_rng(seed)
        self.embed = EmbedderBank(config.d, rng, joint=config.joint)
        self.encoder = EncoderStack(config, rng)
        self.decoder = Decoder(config, rng)

    def _check_horizon(self, scenario: Scenario) -> None:
        if scenario.future != self.config.future:
            raise ConfigurationError(
                f"scenario predicts {scenario.future} steps, "
                f"model is built for {self.config.future}"
            )

    def forward(self, scenario: Scenario, target_id: str) -> Tuple[DecoderOutput, FrameTransform]:
        """Decode one target; tensors are expressed in the target's frame."""
        self._check_horizon(scenario)
        framed, transform = to_agent_frame(scenario, target_id)
        encoded = self.embed.encode_inputs(framed)
        memory = self.encoder(encoded)
        return self.decoder(memory, target_id), transform

    def predict(self, scenario: Scenario, target_id: str) -> PredictionSet:
        """World-frame prediction for one target, without recording a graph."""
        with no_grad():
            output, transform = self.forward(scenario, target_id)
        return output.to_prediction(target_id).check().to_world(transform)

    def predict_all(self, scenario: Scenario) -> Dict[str, PredictionSet]:
        return {target_id: self.predict(scenario, target_id) for target_id in scenario.targets}

    def flops(self, size: ScenarioSize) -> int:
        """Matrix-product FLOPs of one ``forward`` on a scene of ``size``."""
        return forward_flops(self.config, size)
