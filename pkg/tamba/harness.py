"""Artifact-producing commands: generate, train, evaluate, ablate, benchmark."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from tamba._utils import fit_loglog_slope, split_counts
from tamba.blocks import build_block
from tamba.checkpoint import load_checkpoint, read_manifest, save_checkpoint
from tamba.config import Config, Profile
from tamba.decoder import PredictionSet, export_predictions
from tamba.errors import (
    CheckpointError,
    ConfigurationError,
    ContractError,
    NumericError,
    numeric_context,
)
from tamba.flops import ScenarioSize, block_flops
from tamba.generator import generate_synthetic
from tamba.metrics import EVAL_KS, MetricReport, build_report, count_params, estimate_flops, min_ade
from tamba.model import TambaModel
from tamba.models.config import BlockKind, GeneratorSpec, ModelConfig, RunConfig
from tamba.nn import Adam, ReduceLROnPlateau
from tamba.objective import target_losses, total_loss
from tamba.scenario import Scenario, load_scenario, save_scenario
from tamba.tensor import Tensor, grad, no_grad, use_profile

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "step", "L_proposal", "L_refine", "L_cls", "L_total", "lr")
ABLATION_COLUMNS = ("block_kind", "joint", "params", "minFDE_6", "minADE_6", "minFDE_1", "minADE_1")
BENCHMARK_COLUMNS = ("L", "block_kind", "median_ns", "flops")
DEFAULT_LENGTHS = (64, 128, 256, 512, 1024, 2048, 4096)
BENCHMARK_KINDS = (BlockKind.TAMBA, BlockKind.ATTENTION)
MIN_REPETITIONS = 20
# Shortest timed sample; smaller lengths repeat the forward until they reach it.
MIN_SAMPLE_NS = 1_000_000
QUADRATIC_FROM = 512

Predictor = Callable[[Scenario, str], PredictionSet]
TrainingItem = Tuple[Scenario, str]


@dataclass
class TrainingSummary:
    checkpoint: Path
    log: Path
    best_metric: float
    epoch_losses: List[float] = field(default_factory=list)
    validation: List[float] = field(default_factory=list)
    learning_rates: List[float] = field(default_factory=list)


@dataclass
class BenchmarkResult:
    rows: List[Tuple[int, str, float, int]]
    slopes: Dict[str, float]
    path: Path


def _truth(scenario: Scenario, target_id: str) -> np.ndarray:
    truth = scenario.truth()
    if truth is None:
        raise ContractError("scenario carries no ground truth")
    return truth.positions(target_id)


def scenario_seeds(seed: int, split: int, count: int) -> List[int]:
    """Independent per-scene seeds of one split; splits never share a seed stream."""
    states = np.random.SeedSequence([seed, split]).generate_state(count)
    return [int(value) for value in states]


def synthesize(seed: int, split: int, count: int, spec: GeneratorSpec) -> List[Scenario]:
    scenes = []
    for scene_seed in scenario_seeds(seed, split, count):
        scenario, truth = generate_synthetic(scene_seed, spec)
        scenes.append(scenario.with_ground_truth(truth))
    return scenes


def load_directory(directory: Union[str, Path]) -> List[Scenario]:
    """Scenarios listed by a directory's manifest, or every ``*.json`` file in name order."""
    root = Path(directory)
    if not root.is_dir():
        raise ConfigurationError(f"scenario directory {root} does not exist")
    manifest = root / Config.Paths.manifest
    if manifest.exists():
        names = json.loads(manifest.read_text(encoding="utf-8"))["files"]
        paths = [root / name for name in names]
    else:
        paths = sorted(path for path in root.glob("*.json") if path.name != Config.Paths.manifest)
    if not paths:
        raise ConfigurationError(f"scenario directory {root} holds no scenarios")
    return [load_scenario(path) for path in paths]


class Harness:
    """
    Runs one command of the prediction pipeline and writes its artifacts

    Every output lands under ``config.out_dir`` using the names in ``Config.Paths``.
    """

    def __init__(
        self, run_config: Optional[RunConfig] = None, config: Optional[Config] = None
    ) -> None:
        """
        Parameters
        ----------
        run_config (optional):
            Model, optimizer, loss and data settings. Defaults to the desk-scale configuration.
        config (optional):
            Output directory and numeric profile. Defaults to ``./out`` with the run's profile.
        """
        self.run_config = run_config or RunConfig()
        self.config = config or Config("out", profile=self.run_config.profile)

    def _path(self, name: str) -> Path:
        path = self.config.path(name)
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def generate(
        self,
        n: Optional[int] = None,
        seed: Optional[int] = None,
        spec: Optional[GeneratorSpec] = None,
        out_dir: Optional[Union[str, Path]] = None,
    ) -> List[Path]:
        """Write ``n`` synthetic scenario files and a manifest listing them.

        Parameters
        ----------
        n (optional):
            Number of scenes. Defaults to the run's training split size.
        seed (optional):
            Stream seed; the same seed always reproduces the same bytes.
        spec (optional):
            Generator spec. Defaults to the run's data spec.
        out_dir (optional):
            Target directory. Defaults to ``<out>/scenarios``.

        Returns
        -------
        paths:
            The scenario files in manifest order.
        """
        data = self.run_config.data
        count = data.n_train if n is None else n
        seed = self.run_config.seed if seed is None else seed
        directory = Path(out_dir) if out_dir is not None else self.config.path("scenarios")
        directory.mkdir(parents=True, exist_ok=True)
        scenes = synthesize(seed, 0, count, spec or data.generator)
        paths = []
        for index, scenario in enumerate(scenes):
            paths.append(save_scenario(directory / f"scenario_{index:05d}.json", scenario))
        manifest = {"count": count, "seed": seed, "files": [path.name for path in paths]}
        (directory / Config.Paths.manifest).write_text(
            json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8"
        )
        logger.info("Generated %d scenarios in %s", count, directory)
        return paths

    def training_data(self) -> Tuple[List[Scenario], List[Scenario]]:
        """Training and validation scenes from the configured directory or generator."""
        data, seed = self.run_config.data, self.run_config.seed
        if data.directory is not None:
            scenes = load_directory(data.directory)
            n_val, _ = split_counts(len(scenes), data.val_fraction)
            if n_val == 0 or n_val == len(scenes):
                raise ConfigurationError(
                    f"{len(scenes)} scenarios cannot be split with fraction {data.val_fraction}"
                )
            return scenes[n_val:], scenes[:n_val]
        train = synthesize(seed, 0, data.n_train, data.generator)
        return train, synthesize(seed, 1, data.n_val, data.generator)

    def evaluation_data(self, directory: Optional[Union[str, Path]] = None) -> List[Scenario]:
        data = self.run_config.data
        source = directory if directory is not None else data.directory
        if source is not None:
            return load_directory(source)
        return synthesize(self.run_config.seed, 2, data.n_eval, data.generator)

    @numeric_context
    def _item_gradients(
        self,
        model: TambaModel,
        parameters: Sequence[Tensor],
        item: TrainingItem,
    ) -> Tuple[List[np.ndarray], Dict[str, float]]:
        scenario, target_id = item
        with use_profile(self.config.profile):
            output, transform = model.forward(scenario, target_id)
            gt = transform.apply_points(_truth(scenario, target_id))
            report = target_losses(output, gt, self.run_config.loss)
            loss = total_loss([report], self.run_config.loss.cls_weight)
            return grad(loss, parameters), report.values()

    def validation_metric(self, model: TambaModel, scenes: Sequence[Scenario]) -> float:
        """Mean minADE over every validation target, at K = 6 or every mode when fewer."""
        k = min(EVAL_KS[0], model.config.k_modes)
        errors = []
        with use_profile(self.config.profile):
            for scenario in scenes:
                for target_id in scenario.targets:
                    prediction = model.predict(scenario, target_id)
                    truth = _truth(scenario, target_id)
                    errors.append(min_ade(prediction.loc, truth, k, prediction.pi))
        if not errors:
            raise ContractError("validation split has no targets")
        return float(np.mean(errors))

    def train(
        self,
        train_set: Optional[Sequence[Scenario]] = None,
        val_set: Optional[Sequence[Scenario]] = None,
    ) -> TrainingSummary:
        """Optimize the total loss with Adam and a validation plateau schedule.

        The checkpoint of the best validation epoch is kept, with the model config in its
        header. Every optimizer step is appended to the training log.

        Raises
        ------
        NumericError
            If a loss turns NaN or infinite; the message names the epoch and step.
        """
        run = self.run_config
        if train_set is None or val_set is None:
            loaded_train, loaded_val = self.training_data()
            train_set = loaded_train if train_set is None else train_set
            val_set = loaded_val if val_set is None else val_set
        items: List[TrainingItem] = [
            (scenario, target) for scenario in train_set for target in scenario.targets
        ]
        if not items:
            raise ContractError("training split has no targets")

        model = TambaModel(run.model, seed=run.seed)
        named = list(model.named_parameters())
        names = [name for name, _ in named]
        parameters = [tensor for _, tensor in named]
        opt = run.optimizer
        optimizer = Adam(named, lr=opt.lr, betas=(opt.beta1, opt.beta2), eps=opt.eps)
        scheduler = ReduceLROnPlateau(
            optimizer,
            factor=opt.plateau_factor,
            patience=opt.plateau_patience,
            threshold=opt.plateau_threshold,
        )
        rng = np.random.default_rng(run.seed)
        checkpoint_path = self._path("checkpoint")
        log_path = self._path("training_log")
        self._path("config").write_text(run.to_json() + "\n", encoding="utf-8")
        summary = TrainingSummary(
            checkpoint=checkpoint_path, log=log_path, best_metric=float("inf")
        )
        logger.info(
            "Training %s model with %d parameters on %d targets",
            run.model.block_kind.value,
            model.num_parameters(),
            len(items),
        )

        with ThreadPoolExecutor(max_workers=run.workers) as pool, log_path.open(
            "w", newline="", encoding="utf-8"
        ) as handle:
            writer = csv.writer(handle)
            writer.writerow(LOG_COLUMNS)
            for epoch in range(1, run.epochs + 1):
                order = rng.permutation(len(items))
                totals = []
                for step, start in enumerate(range(0, len(items), run.batch_size)):
                    batch = [items[index] for index in order[start : start + run.batch_size]]
                    try:
                        results = list(
                            pool.map(
                                lambda item: self._item_gradients(model, parameters, item), batch
                            )
                        )
                    except NumericError as exc:
                        logger.error(
                            "Numeric abort in epoch %d, step %d: %s", epoch, step, exc.message
                        )
                        raise NumericError(f"{exc.message} (epoch {epoch})", step=step) from exc
                    values = _mean_rows([row for _, row in results])
                    if not math.isfinite(values["L_total"]):
                        logger.error("Loss is not finite in epoch %d, step %d", epoch, step)
                        raise NumericError(
                            f"loss is {values['L_total']} in epoch {epoch}", step=step
                        )
                    scale = 1.0 / len(batch)
                    grads = {
                        name: sum(result[0][index] for result in results) * scale
                        for index, name in enumerate(names)
                    }
                    optimizer.step(grads)
                    totals.append(values["L_total"])
                    losses = [repr(values[column]) for column in LOG_COLUMNS[2:6]]
                    writer.writerow([epoch, step] + losses + [repr(optimizer.lr)])

                metric = self.validation_metric(model, val_set)
                summary.epoch_losses.append(float(np.mean(totals)))
                summary.validation.append(metric)
                if metric < summary.best_metric:
                    summary.best_metric = metric
                    save_checkpoint(
                        checkpoint_path, model.state_dict(), run.model.model_dump(mode="json")
                    )
                    logger.info(
                        "Epoch %d: new best validation minADE %.4f, checkpoint saved", epoch, metric
                    )
                scheduler.step(metric)
                summary.learning_rates.append(optimizer.lr)
                logger.info(
                    "Epoch %d/%d: loss %.4f, validation minADE %.4f, lr %g",
                    epoch,
                    run.epochs,
                    summary.epoch_losses[-1],
                    metric,
                    optimizer.lr,
                )
        return summary

    def load_model(self, checkpoint: Union[str, Path]) -> TambaModel:
        """Rebuild the model described by a checkpoint's CONFIG line and load its parameters.

        Raises
        ------
        CheckpointError
            If the checkpoint has no model config or its tensors do not fit that config.
        """
        stored = load_checkpoint(checkpoint)
        if stored.config is None:
            raise CheckpointError(f"{checkpoint} does not record its model config")
        try:
            model_config = ModelConfig.model_validate(stored.config)
        except ValueError as exc:
            raise CheckpointError(f"{checkpoint} records an invalid model config: {exc}") from exc
        model = TambaModel(model_config)
        model.load_state_dict(stored.parameters)
        return model

    def evaluate(
        self,
        checkpoint: Optional[Union[str, Path]] = None,
        data: Optional[Union[str, Path]] = None,
        predictor: Optional[Predictor] = None,
        scenes: Optional[Sequence[Scenario]] = None,
    ) -> MetricReport:
        """Compute K = 6 and K = 1 metrics over a dataset and export every prediction.

        Parameters
        ----------
        checkpoint (optional):
            Checkpoint to evaluate. Defaults to ``<out>/checkpoint.ckpt``.
        data (optional):
            Scenario directory. Defaults to the run's evaluation data.
        predictor (optional):
            Replaces the model's ``predict`` while keeping every other step.
        scenes (optional):
            Already loaded scenarios; takes precedence over ``data``.

        Raises
        ------
        CheckpointError
            If the checkpoint is unreadable or its horizon differs from the data's.
        ConfigurationError
            If the model emits fewer modes than the largest evaluated K.
        """
        if checkpoint is None:
            checkpoint_path = self.config.path("checkpoint")
        else:
            checkpoint_path = Path(checkpoint)
        model = self.load_model(checkpoint_path)
        model_config = model.config
        if model_config.k_modes < max(EVAL_KS):
            raise ConfigurationError(
                f"evaluation needs {max(EVAL_KS)} modes, the model has {model_config.k_modes}"
            )
        dataset = list(scenes) if scenes is not None else self.evaluation_data(data)
        if not dataset:
            raise ContractError("evaluation needs at least one scenario")
        for scenario in dataset:
            if (scenario.observed, scenario.future) != (model_config.observed, model_config.future):
                raise CheckpointError(
                    f"checkpoint expects {model_config.observed} observed and "
                    f"{model_config.future} future steps, "
                    f"data has {scenario.observed} and {scenario.future}"
                )
        predict = predictor or model.predict
        predictions_dir = self._path("predictions")
        locs, gts, pis = [], [], []
        with use_profile(self.config.profile):
            for index, scenario in enumerate(dataset):
                for target_id in scenario.targets:
                    prediction = predict(scenario, target_id)
                    scene_dir = predictions_dir / f"scene_{index:05d}"
                    export_predictions(prediction, target_id, scene_dir)
                    locs.append(prediction.loc)
                    gts.append(_truth(scenario, target_id))
                    pis.append(prediction.pi)
        report = build_report(
            locs,
            gts,
            pis,
            params_m=count_params(checkpoint_path),
            flops_g=estimate_flops(model_config, ScenarioSize.of(dataset[0])),
        )
        self._path("report").write_text(report.to_json() + "\n", encoding="utf-8")
        logger.info(
            "Evaluated %d targets: minADE_6 %.4f, minFDE_6 %.4f, MR_6 %.3f",
            report.n_targets,
            report.k6.min_ade,
            report.k6.min_fde,
            report.k6.miss_rate,
        )
        return report

    def ablate(self) -> Path:
        """Train and evaluate every block kind with the joint encoding on and off.

        All six runs share the seed and the data; each keeps its artifacts in a subdirectory.
        """
        train_set, val_set = self.training_data()
        eval_set = self.evaluation_data()
        rows = []
        for kind in BlockKind:
            for joint in (True, False):
                switches = {"block_kind": kind, "joint": joint}
                model = self.run_config.model.model_copy(update=switches)
                variant = self.run_config.model_copy(update={"model": model})
                name = f"{kind.value}_{'joint' if joint else 'separate'}"
                out_dir = self.config.out_dir / "ablation" / name
                harness = Harness(variant, Config(out_dir, self.config.profile))
                logger.info("Ablation run %s", name)
                summary = harness.train(train_set, val_set)
                report = harness.evaluate(summary.checkpoint, scenes=eval_set)
                rows.append(
                    [
                        kind.value,
                        joint,
                        read_manifest(summary.checkpoint).num_parameters,
                        repr(report.k6.min_fde),
                        repr(report.k6.min_ade),
                        repr(report.k1.min_fde),
                        repr(report.k1.min_ade),
                    ]
                )
        path = self._path("ablation")
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(ABLATION_COLUMNS)
            writer.writerows(rows)
        return path

    def benchmark_scaling(
        self,
        lengths: Sequence[int] = DEFAULT_LENGTHS,
        repetitions: int = MIN_REPETITIONS,
        kinds: Sequence[BlockKind] = BENCHMARK_KINDS,
    ) -> BenchmarkResult:
        """Time one block forward per sequence length and fit log-log slopes.

        Runs with graph recording off and the benchmark profile. Each reported time is the median
        over ``repetitions`` samples; a sample repeats the forward until it spans at least 1 ms.
        The attention slope is fitted on lengths of at least 512 only.
        """
        if repetitions < MIN_REPETITIONS:
            raise ConfigurationError(f"the benchmark needs at least {MIN_REPETITIONS} repetitions")
        model_config = self.run_config.model
        rows: List[Tuple[int, str, float, int]] = []
        slopes: Dict[str, float] = {}
        with no_grad(), use_profile(Profile.BENCHMARK):
            for kind in kinds:
                rng = np.random.default_rng(self.run_config.seed)
                variant = model_config.model_copy(update={"block_kind": kind})
                block = build_block(variant, rng, causal=False)
                times = []
                for length in lengths:
                    x = Tensor(rng.standard_normal((length, model_config.d)))
                    median = _median_ns(lambda: block(x), repetitions)
                    times.append(median)
                    rows.append((length, kind.value, median, block_flops(variant, length)))
                    logger.debug("%s L=%d: %.0f ns", kind.value, length, median)
                fitted = list(zip(lengths, times))
                if kind is BlockKind.ATTENTION:
                    fitted = [row for row in fitted if row[0] >= QUADRATIC_FROM] or fitted
                xs, ys = [row[0] for row in fitted], [row[1] for row in fitted]
                slopes[kind.value] = fit_loglog_slope(xs, ys)
                logger.info("%s log-log slope %.3f", kind.value, slopes[kind.value])
        path = self._path("benchmark")
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(BENCHMARK_COLUMNS)
            writer.writerows(rows)
        return BenchmarkResult(rows=rows, slopes=slopes, path=path)


def _mean_rows(rows: Sequence[Dict[str, float]]) -> Dict[str, float]:
    return {key: float(np.mean([row[key] for row in rows])) for key in rows[0]}


def _median_ns(run: Callable[[], object], repetitions: int) -> float:
    start = time.perf_counter_ns()
    run()
    single = max(time.perf_counter_ns() - start, 1)
    inner = max(1, math.ceil(MIN_SAMPLE_NS / single))
    samples = []
    for _ in range(repetitions):
        start = time.perf_counter_ns()
        for _ in range(inner):
            run()
        samples.append((time.perf_counter_ns() - start) / inner)
    return float(np.median(samples))
