# pylint: disable=invalid-name
import csv
import json

import numpy as np
import pytest

from tamba.decoder import (
    EXPORT_COLUMNS,
    ContextAttention,
    Decoder,
    PredictionSet,
    export_predictions,
)
from tamba.embedding import EmbedderBank
from tamba.encoder import EncoderStack
from tamba.errors import ContractError
from tamba.scenario import FrameTransform, to_agent_frame
from tamba.tensor import Tensor, concat
from tests import common


@pytest.fixture
def memory(tiny_config, scenario):
    framed, _ = to_agent_frame(scenario, "vehicle_0")
    encoded = EmbedderBank(tiny_config.d, np.random.default_rng(1)).encode_inputs(framed)
    return EncoderStack(tiny_config, np.random.default_rng(2))(encoded)


@pytest.fixture
def prediction(rng):
    k, future = 3, common.FUTURE
    return PredictionSet(
        target_id="vehicle_0",
        proposals=rng.standard_normal((k, future, 2)),
        loc=rng.standard_normal((k, future, 2)),
        scale=rng.uniform(0.5, 1.5, size=(k, future, 2)),
        pi=np.array([0.5, 0.3, 0.2]),
        scores=rng.standard_normal(k),
    )


def test_decoder_output_contract(tiny_config, memory):
    output = Decoder(tiny_config, np.random.default_rng(3))(memory, "vehicle_0")

    shape = (tiny_config.k_modes, tiny_config.future, 2)
    assert output.proposals.shape == shape
    assert output.loc.shape == shape
    assert output.scale.shape == shape
    assert np.all(output.scale.data >= tiny_config.scale_floor)
    assert output.pi.shape == (tiny_config.k_modes,)
    assert output.pi.data.sum() == pytest.approx(1.0)
    assert output.scores.shape == (tiny_config.k_modes,)
    output.to_prediction("vehicle_0").check()


def test_decoder_with_chunks(tiny_config, memory):
    config = tiny_config.model_copy(update={"chunk": 2})

    output = Decoder(config, np.random.default_rng(3))(memory, "vehicle_0")

    assert output.proposals.shape == (config.k_modes, config.future, 2)


def test_proposals_are_cumulative(tiny_config, memory):
    decoder = Decoder(tiny_config, np.random.default_rng(3))

    proposals = decoder.decode_proposals(memory, "vehicle_0").data

    assert not np.allclose(proposals[:, 0], 0.0)
    assert not np.allclose(proposals[0], proposals[1])


def test_pedestrian_target_uses_its_own_row(tiny_config, memory):
    decoder = Decoder(tiny_config, np.random.default_rng(3))

    vehicle = decoder(memory, "vehicle_0").loc.data
    pedestrian = decoder(memory, "pedestrian_0").loc.data

    assert not np.allclose(vehicle, pedestrian)


def test_self_term_equals_attention_over_extended_context(tiny_config, rng):
    attention = ContextAttention(tiny_config.d, tiny_config.d_inner, rng)
    context = Tensor(rng.standard_normal((4, tiny_config.d)))
    query = Tensor(rng.standard_normal((1, tiny_config.d)))
    mask = np.array([True, False, True, True])

    keys, values = attention.project_context(context)
    with_self = attention(query, keys, values, mask, self_term=True)
    ext_keys, ext_values = attention.project_context(concat([context, query], axis=0))
    extended = attention(query, ext_keys, ext_values, np.append(mask, True))

    np.testing.assert_allclose(with_self.data, extended.data, atol=1e-12)

def test_proposal_parameters_exist(tiny_config):
    decoder = Decoder(tiny_config, np.random.default_rng(3))
    names = dict(decoder.named_parameters())

    proposal = decoder.proposal_parameters()

    assert "queries" in proposal
    assert all(name in names for name in proposal)
    downstream = ("scorer", "refine", "loc_head", "scale_head")
    assert not any(name.startswith(downstream) for name in proposal)


def test_prediction_check(prediction):
    assert prediction.check() is prediction
    assert prediction.k_modes == 3 and prediction.future == common.FUTURE


@pytest.mark.parametrize(
    "field, value",
    [
        ("scale", np.zeros((3, common.FUTURE, 2))),
        ("pi", np.array([0.5, 0.3, 0.3])),
        ("pi", np.array([1.2, -0.1, -0.1])),
        ("loc", np.full((3, common.FUTURE, 2), np.nan)),
    ],
)
def test_prediction_check_rejects(prediction, field, value):
    setattr(prediction, field, value)

    with pytest.raises(ContractError):
        prediction.check()


def test_prediction_to_world(prediction):
    transform = FrameTransform(origin=(10.0, -4.0), heading=0.8)

    world = prediction.to_world(transform)

    np.testing.assert_allclose(transform.apply_points(world.loc), prediction.loc, atol=1e-12)
    np.testing.assert_allclose(
        transform.apply_points(world.proposals), prediction.proposals, atol=1e-12
    )
    np.testing.assert_array_equal(world.scale, prediction.scale)
    np.testing.assert_array_equal(world.pi, prediction.pi)


def test_export_predictions(tmp_path, prediction):
    path = export_predictions(prediction, "vehicle_0", tmp_path / "scene")

    with path.open(encoding="utf-8") as handle:
        rows = list(csv.reader(handle))
    summary = json.loads((tmp_path / "scene" / "vehicle_0.json").read_text(encoding="utf-8"))

    assert tuple(rows[0]) == EXPORT_COLUMNS
    assert len(rows) == 1 + 3 * common.FUTURE
    mode, step = 2, 1
    row = rows[1 + mode * common.FUTURE + step]
    assert [int(row[0]), int(row[1])] == [mode, step]
    assert float(row[2]) == prediction.loc[mode, step, 0]
    assert float(row[5]) == prediction.scale[mode, step, 1]
    assert float(row[6]) == prediction.pi[mode]
    assert summary["target"] == "vehicle_0"
    assert summary["pi"] == pytest.approx([0.5, 0.3, 0.2])


def _zero(linear):
    linear.weight.data[...] = 0.0
    linear.bias.data[...] = 0.0


def test_zero_waypoint_head_keeps_every_mode_at_origin(tiny_config, memory):
    decoder = Decoder(tiny_config, np.random.default_rng(3))
    _zero(decoder.head)
    _zero(decoder.loc_head)

    output = decoder(memory, "vehicle_0")

    np.testing.assert_array_equal(output.proposals.data, 0.0)
    np.testing.assert_array_equal(output.loc.data, 0.0)


def test_zero_refinement_heads_return_the_proposals(tiny_config, memory):
    decoder = Decoder(tiny_config, np.random.default_rng(3))
    _zero(decoder.loc_head)
    _zero(decoder.scale_head)

    output = decoder(memory, "vehicle_0")

    np.testing.assert_array_equal(output.loc.data, output.proposals.data)
    expected = np.log(2.0) + tiny_config.scale_floor
    np.testing.assert_allclose(output.scale.data, expected, rtol=1e-12)
