# pylint: disable=invalid-name
import numpy as np
import pytest

from tamba.embedding import (
    MAX_POSITIONS,
    POINT_WIDTH,
    TRACK_WIDTH,
    EmbedderBank,
    Fusion,
    light_features,
    masked_mean,
    point_features,
    positional_encode,
    positional_table,
    track_features,
)
from tamba.errors import ConfigurationError, DimensionError, RoutingError
from tamba.scenario import Category
from tamba.tensor import Tensor, grad
from tests import common


def test_positional_table_alternates_sine_and_cosine():
    table = positional_table(5, 6)

    np.testing.assert_allclose(table[0], [0.0, 1.0] * 3)
    assert table[3, 0] == pytest.approx(np.sin(3.0))
    assert table[3, 1] == pytest.approx(np.cos(3.0))
    assert table[3, 4] == pytest.approx(np.sin(3.0 / 10000.0 ** (4.0 / 6.0)))


def test_positional_encode_adds_prefix(rng):
    x = rng.standard_normal((2, 7, 4))

    out = positional_encode(x)

    expected = np.broadcast_to(positional_table(MAX_POSITIONS, 4)[:7], (2, 7, 4))
    np.testing.assert_allclose(out.data - x, expected, atol=1e-12)


def test_positional_encode_limits():
    with pytest.raises(ConfigurationError):
        positional_encode(np.zeros((MAX_POSITIONS + 1, 4)))
    with pytest.raises(DimensionError):
        positional_encode(np.zeros(4))


def test_track_features(scenario):
    vehicle = scenario.agent("vehicle_0")

    features, mask = track_features(vehicle)

    assert features.shape == (common.OBSERVED, TRACK_WIDTH)
    assert mask.all()
    np.testing.assert_allclose(features[:, 0:2], vehicle.positions())
    np.testing.assert_allclose(features[0, 2:4], [0.0, 0.0])
    np.testing.assert_allclose(features[1:, 2:4], np.diff(vehicle.positions(), axis=0))
    np.testing.assert_allclose(features[:, 6], np.hypot(6.0, 1.0))
    np.testing.assert_array_equal(features[:, 7:10], np.tile([1.0, 0.0, 0.0], (common.OBSERVED, 1)))
    np.testing.assert_array_equal(features[:, 10:], 0.0)


def test_track_features_zero_invalid_steps(scenario):
    pedestrian = scenario.agent("pedestrian_0")
    pedestrian.states[2].valid = False

    features, mask = track_features(pedestrian)

    assert not mask[2]
    np.testing.assert_array_equal(features[2], 0.0)
    np.testing.assert_array_equal(features[3, 2:4], 0.0)
    assert features[3, 9] == 1.0


def test_light_features_one_hot(scenario):
    light = scenario.map[1]

    features, mask = light_features(light, common.OBSERVED)

    assert mask.all()
    np.testing.assert_allclose(features[:, 0:2], np.tile([3.0, 1.0], (common.OBSERVED, 1)))
    # Columns 10, 11, 12 hold red, green, unknown.
    np.testing.assert_array_equal(features[:, 10], [0, 1, 1, 0, 1, 1])
    np.testing.assert_array_equal(features[:, 11], [1, 0, 0, 1, 0, 0])
    np.testing.assert_array_equal(features[:, 12], 0)


def test_point_features_pad_at_end(scenario):
    lane = scenario.map[0]

    features, mask = point_features(lane, 6)

    assert features.shape == (6, POINT_WIDTH)
    np.testing.assert_array_equal(mask, [True] * 4 + [False] * 2)
    np.testing.assert_allclose(features[1, 2:4], [5.0, 0.5])
    np.testing.assert_array_equal(features[4:], 0.0)


def test_masked_mean_ignores_padding():
    tokens = Tensor(np.arange(12, dtype=float).reshape(2, 3, 2))
    mask = np.array([[True, False, True], [False, False, False]])

    out = masked_mean(tokens, mask).data

    np.testing.assert_allclose(out, [[2.0, 3.0], [0.0, 0.0]])


@pytest.mark.parametrize("category", list(Category))
def test_every_category_is_routed(rng, category):
    bank = EmbedderBank(8, rng)

    assert bank.route(category) is bank.route(category.value)


def test_unknown_category_is_not_routed(rng):
    with pytest.raises(RoutingError):
        EmbedderBank(8, rng).route("cyclist")


def test_joint_path_shares_embedder(rng):
    joint = EmbedderBank(8, rng, joint=True)
    separate = EmbedderBank(8, rng, joint=False)

    assert joint.route(Category.PEDESTRIAN) is joint.route(Category.TRAFFIC_LIGHT)
    assert separate.route(Category.PEDESTRIAN) is not separate.route(Category.TRAFFIC_LIGHT)
    assert joint.route(Category.VEHICLE) is not joint.route(Category.MOTORCYCLE)
    with pytest.raises(RoutingError):
        separate.fuse_joint(Tensor(np.zeros((1, 8))), Tensor(np.zeros((1, 8))))


def test_embed_category_masks_and_checks_width(rng):
    bank = EmbedderBank(8, rng)
    features = rng.standard_normal((3, TRACK_WIDTH))

    out = bank.embed_category(features, Category.VEHICLE, np.array([True, False, True]))

    assert out.shape == (3, 8)
    np.testing.assert_array_equal(out.data[1], 0.0)
    with pytest.raises(DimensionError):
        bank.embed_category(rng.standard_normal((3, POINT_WIDTH)), Category.VEHICLE)


def test_fusion_checks_width(rng):
    with pytest.raises(DimensionError):
        Fusion(8, rng)(Tensor(np.zeros((2, 8))), Tensor(np.zeros((2, 4))))


def test_encode_inputs_shapes(rng, scenario):
    encoded = EmbedderBank(8, rng).encode_inputs(scenario)

    assert encoded.agent_ids == ["vehicle_0"]
    assert encoded.agent_tokens.shape == (1, common.OBSERVED, 8)
    assert encoded.traffic_ids == ["pedestrian_0", "traffic_light_0"]
    assert encoded.traffic_tokens.shape == (2, common.OBSERVED, 8)
    assert encoded.n_tc == 2 and encoded.n_pedestrians == 1
    assert encoded.scene_ids == ["lane_0"]
    assert encoded.scene_points.shape == (1, 4, 8)
    assert encoded.scene_tokens.shape == (1, 8)
    assert encoded.n_scene == 1
    assert encoded.dynamic_ids == ["vehicle_0", "pedestrian_0"]


def _pedestrian_tokens(joint, scenario):
    bank = EmbedderBank(8, np.random.default_rng(common.SEED), joint=joint)
    return bank.encode_inputs(scenario).traffic_tokens.data[0]


@pytest.mark.parametrize("joint, changes", [(True, True), (False, False)])
def test_light_state_reaches_pedestrian_only_when_joint(scenario, joint, changes):
    flipped = scenario.model_copy(deep=True)
    flipped.map[1].points[0][2:] = [1.0] * common.OBSERVED

    before, after = _pedestrian_tokens(joint, scenario), _pedestrian_tokens(joint, flipped)

    assert (not np.allclose(before, after)) is changes


def test_joint_path_receives_gradient(rng, scenario):
    bank = EmbedderBank(8, rng, joint=True)

    encoded = bank.encode_inputs(scenario)
    tokens = encoded.traffic_tokens
    g_shared, g_fusion, g_lane = grad(
        tokens.sum() + (tokens * tokens).sum(),
        [bank.joint.fc1.weight, bank.fusion.proj.weight, bank.route(Category.LANE).fc1.weight],
    )

    assert np.abs(g_shared).sum() > 0
    assert np.abs(g_fusion).sum() > 0
    np.testing.assert_array_equal(g_lane, 0.0)


def test_separate_mode_has_more_embedders(rng):
    joint, separate = EmbedderBank(8, rng, joint=True), EmbedderBank(8, rng, joint=False)

    names = {name.split(".")[0] for name, _ in separate.named_parameters()}

    assert {"pedestrian", "traffic_light"} <= names
    assert "fusion" not in names
    assert joint.num_parameters() != separate.num_parameters()
