# pylint: disable=protected-access
import csv
import json
from unittest.mock import patch

import numpy as np
import pytest

from tamba.checkpoint import load_checkpoint, save_checkpoint
from tamba.config import Config
from tamba.decoder import PredictionSet
from tamba.embedding import TRACK_WIDTH
from tamba.errors import CheckpointError, ConfigurationError, NumericError
from tamba.harness import (
    BENCHMARK_COLUMNS,
    LOG_COLUMNS,
    Harness,
    _median_ns,
    load_directory,
    scenario_seeds,
)
from tamba.metrics import min_ade
from tamba.model import TambaModel
from tamba.models.config import DataConfig, GeneratorSpec, RunConfig
from tamba.scenario import load_scenario
from tests import common


def _write_checkpoint(path, model_config):
    model = TambaModel(model_config, seed=common.SEED)
    return save_checkpoint(path, model.state_dict(), model_config.model_dump(mode="json"))


def _oracle(scenario, target_id):
    """Puts all the mass on a mode that follows the ground truth exactly."""
    truth = scenario.truth().positions(target_id)
    loc = np.stack([truth + offset for offset in (0.0, 3.0, -3.0, 6.0, -6.0, 9.0)])
    pi = np.zeros(6)
    pi[0] = 1.0
    return PredictionSet(
        target_id=target_id,
        proposals=loc.copy(),
        loc=loc,
        scale=np.ones_like(loc),
        pi=pi,
        scores=np.log(pi + 1e-12),
    )


def test_scenario_seeds_are_split_specific():
    train = scenario_seeds(common.SEED, 0, 5)

    assert train == scenario_seeds(common.SEED, 0, 5)
    assert train[:3] == scenario_seeds(common.SEED, 0, 3)
    assert not set(train) & set(scenario_seeds(common.SEED, 1, 5))


def test_generate_is_reproducible(tmp_path, harness_maker):
    harness = harness_maker()

    first = harness.generate(n=3, out_dir=tmp_path / "a")
    second = harness.generate(n=3, out_dir=tmp_path / "b")

    assert [path.read_bytes() for path in first] == [path.read_bytes() for path in second]
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text(encoding="utf-8"))
    assert manifest == {"count": 3, "seed": common.SEED, "files": [path.name for path in first]}
    assert load_scenario(first[0]).truth() is not None


def test_generate_defaults_to_out_dir(harness_maker):
    harness = harness_maker()

    paths = harness.generate(n=2)

    assert all(path.parent == harness.config.path("scenarios") for path in paths)


def test_load_directory_without_manifest_sorts_names(tmp_path, harness_maker):
    paths = harness_maker().generate(n=3, out_dir=tmp_path / "scenes")
    (tmp_path / "scenes" / "manifest.json").unlink()

    loaded = load_directory(tmp_path / "scenes")

    expected = [load_scenario(path).to_document() for path in paths]
    assert [scene.to_document() for scene in loaded] == expected


def test_load_directory_errors(tmp_path):
    with pytest.raises(ConfigurationError, match="does not exist"):
        load_directory(tmp_path / "missing")
    (tmp_path / "empty").mkdir()
    with pytest.raises(ConfigurationError, match="no scenarios"):
        load_directory(tmp_path / "empty")


def test_training_data_from_directory(tmp_path, tiny_run, harness_maker):
    paths = harness_maker().generate(n=5, out_dir=tmp_path / "scenes")
    data = tiny_run.data.model_copy(update={"directory": str(tmp_path / "scenes")})
    run = tiny_run.model_copy(update={"data": data})

    train, val = harness_maker(run).training_data()

    assert len(val) == 1 and len(train) == 4
    assert val[0].to_document() == load_scenario(paths[0]).to_document()


def test_training_data_from_generator(harness_maker):
    train, val = harness_maker().training_data()

    assert (len(train), len(val)) == (4, 2)
    assert train[0].to_document() != val[0].to_document()


def test_evaluate_oracle_scores_zero(tmp_path, harness_maker, tiny_config):
    harness = harness_maker()
    checkpoint = _write_checkpoint(tmp_path / "model.ckpt", tiny_config)

    report = harness.evaluate(checkpoint, predictor=_oracle)

    assert report.n_targets == 3
    for k in (6, 1):
        metrics = report.at(k)
        assert metrics.min_ade == metrics.min_fde == 0.0
        assert metrics.b_min_fde == metrics.miss_rate == 0.0
    assert report.params_m == pytest.approx(TambaModel(tiny_config).num_parameters() / 1e6)
    assert report.flops_g > 0
    assert json.loads(harness.config.path("report").read_text(encoding="utf-8"))["n_targets"] == 3
    exported = harness.config.path("predictions") / "scene_00000" / "vehicle_0.csv"
    with exported.open(encoding="utf-8") as handle:
        rows = list(csv.reader(handle))
    assert len(rows) == 1 + 6 * common.FUTURE


def test_evaluate_with_model(tmp_path, harness_maker, tiny_config):
    harness = harness_maker()
    checkpoint = _write_checkpoint(tmp_path / "model.ckpt", tiny_config)

    report = harness.evaluate(checkpoint)

    assert report.k6.min_ade <= report.k1.min_ade
    assert report.k6.b_min_fde >= report.k6.min_fde


def test_evaluate_rejects_horizon_mismatch(tmp_path, harness_maker, tiny_config):
    longer = tiny_config.model_copy(update={"future": 6})
    checkpoint = _write_checkpoint(tmp_path / "model.ckpt", longer)

    with pytest.raises(CheckpointError, match="future"):
        harness_maker().evaluate(checkpoint)


def test_evaluate_needs_six_modes(tmp_path, harness_maker, tiny_config):
    fewer_modes = tiny_config.model_copy(update={"k_modes": 3})
    checkpoint = _write_checkpoint(tmp_path / "model.ckpt", fewer_modes)

    with pytest.raises(ConfigurationError):
        harness_maker().evaluate(checkpoint)


def test_load_model_needs_config(tmp_path, harness_maker, tiny_config):
    path = save_checkpoint(tmp_path / "bare.ckpt", TambaModel(tiny_config).state_dict())

    with pytest.raises(CheckpointError, match="model config"):
        harness_maker().load_model(path)


def test_load_model_round_trip(tmp_path, harness_maker, tiny_config, scenario):
    original = TambaModel(tiny_config, seed=common.SEED)
    path = _write_checkpoint(tmp_path / "model.ckpt", tiny_config)

    restored = harness_maker().load_model(path)

    np.testing.assert_array_equal(
        restored.predict(scenario, "vehicle_0").loc, original.predict(scenario, "vehicle_0").loc
    )


def test_train_writes_artifacts(harness_maker, tiny_run):
    harness = harness_maker()

    summary = harness.train()

    with summary.log.open(encoding="utf-8") as handle:
        rows = list(csv.DictReader(handle))
    assert tuple(rows[0]) == LOG_COLUMNS
    assert len(rows) == tiny_run.epochs * 2
    for row in rows:
        parts = float(row["L_proposal"]) + float(row["L_refine"]) + float(row["L_cls"])
        assert float(row["L_total"]) == pytest.approx(parts)
    assert summary.best_metric == min(summary.validation)
    assert len(summary.learning_rates) == tiny_run.epochs
    assert load_checkpoint(summary.checkpoint).config == tiny_run.model.model_dump(mode="json")
    assert RunConfig.from_file(harness.config.path("config")) == tiny_run


def test_train_reports_numeric_abort(harness_maker):
    harness = harness_maker()

    with patch.object(TambaModel, "forward", side_effect=NumericError("loss exploded")):
        with pytest.raises(NumericError, match="at step 0") as error:
            harness.train()

    assert error.value.step == 0
    assert "epoch 1" in error.value.message
    assert "Raised inside _item_gradients" in error.value.message


def test_benchmark_scaling(harness_maker):
    harness = harness_maker()

    result = harness.benchmark_scaling(lengths=[8, 16], repetitions=20)

    assert [(row[0], row[1]) for row in result.rows] == [
        (8, "tamba"),
        (16, "tamba"),
        (8, "attention"),
        (16, "attention"),
    ]
    assert all(row[2] > 0 for row in result.rows)
    assert result.rows[1][3] == 2 * result.rows[0][3]
    assert result.rows[3][3] > 2 * result.rows[2][3]
    assert set(result.slopes) == {"tamba", "attention"}
    with result.path.open(encoding="utf-8") as handle:
        assert tuple(next(csv.reader(handle))) == BENCHMARK_COLUMNS


def test_benchmark_needs_repetitions(harness_maker):
    with pytest.raises(ConfigurationError):
        harness_maker().benchmark_scaling(lengths=[8], repetitions=5)


def test_median_ns_is_positive():
    assert _median_ns(lambda: sum(range(10)), 3) > 0


@pytest.mark.slow
def test_training_is_deterministic(tmp_path, harness_maker):
    first = harness_maker(out_dir=tmp_path / "first").train()
    second = harness_maker(out_dir=tmp_path / "second").train()

    assert first.checkpoint.read_bytes() == second.checkpoint.read_bytes()
    assert first.log.read_bytes() == second.log.read_bytes()


@pytest.mark.slow
def test_ablate_covers_every_variant(harness_maker, tiny_run):
    harness = harness_maker(tiny_run.model_copy(update={"epochs": 1}))

    path = harness.ablate()

    with path.open(encoding="utf-8") as handle:
        rows = list(csv.DictReader(handle))
    assert len(rows) == 6
    assert {(row["block_kind"], row["joint"]) for row in rows} == {
        (kind, joint) for kind in ("tamba", "mamba", "attention") for joint in ("True", "False")
    }
    params = {(row["block_kind"], row["joint"]): int(row["params"]) for row in rows}
    reference = params[("tamba", "True")]
    for (kind, joint), count in params.items():
        gap = common.expected_parameter_gap(tiny_run.model, kind, joint == "True", TRACK_WIDTH)
        assert count - reference == gap


def _straight_run(tiny_run, **updates):
    fields = {**common.TINY_GENERATOR, "n_pedestrians": 0, "traffic_light": False}
    spec = GeneratorSpec.constant_velocity_only(**fields)
    data = tiny_run.data.model_copy(update={"generator": spec, "n_train": 8})
    return tiny_run.model_copy(update={"data": data, **updates})


def _standing_still_error(scenes):
    """Mean minADE of predicting that each target stays at its last observed position."""
    errors = []
    for scenario in scenes:
        for target_id in scenario.targets:
            truth = scenario.truth().positions(target_id)
            last = scenario.agent(target_id).states[-1].position
            errors.append(min_ade(np.tile(last, (len(truth), 1))[None], truth, 1))
    return float(np.mean(errors))


def test_second_epoch_lowers_the_loss(harness_maker, tiny_run):
    harness = harness_maker(_straight_run(tiny_run))

    summary = harness.train()

    assert len(summary.epoch_losses) == 2
    assert summary.epoch_losses[1] < summary.epoch_losses[0]


def test_flat_validation_cuts_the_learning_rate(harness_maker, tiny_run):
    harness = harness_maker(_straight_run(tiny_run, epochs=7))

    with patch.object(Harness, "validation_metric", return_value=1.0):
        summary = harness.train()

    # First epoch sets the best value, the next five miss it and trigger one cut.
    assert summary.learning_rates == pytest.approx([1e-3] * 5 + [1e-4] * 2)
    assert summary.best_metric == 1.0


@pytest.mark.slow
def test_training_beats_standing_still(tmp_path):
    data = DataConfig(generator=GeneratorSpec.constant_velocity_only(), n_train=512, n_val=128)
    harness = Harness(RunConfig(data=data, epochs=20, seed=common.SEED), Config(tmp_path / "out"))
    _, val_set = harness.training_data()

    summary = harness.train()

    assert summary.validation[-1] <= 0.5 * _standing_still_error(val_set)


@pytest.mark.slow
def test_benchmark_slopes_at_default_lengths(tmp_path):
    harness = Harness(RunConfig(seed=common.SEED), Config(tmp_path / "out"))

    result = harness.benchmark_scaling()

    assert 0.8 <= result.slopes["tamba"] <= 1.3
    assert result.slopes["attention"] >= 1.7
