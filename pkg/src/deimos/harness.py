"""Full active-learning experiment loop and file-level entry points.

One repetition: train on the labeled set, draw shared-mask dropout
predictions over a representative sample, estimate the covariance with the
calibrated precision constants, acquire a batch, reveal oracle labels,
retrain from scratch, log the test metric. The external-samples mode runs
the prediction-to-selection core on user-supplied sample files instead, so
models trained elsewhere can use the engine.
"""

import csv
import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import acquisition, covariance, toymodel
from .acquisition import (
    METHOD_DEIMOS,
    METHOD_MAX_ENTROPY,
    METHOD_MAX_VARIANCE,
    METHOD_RANDOM,
    METHODS,
    AcquisitionResult,
    CandidateSet,
)
from .covariance import CLASSIFICATION, REGRESSION, PredictionSamples
from .errors import ValidationError
from .rng import as_generator, derive_seed

TASK_1D = "1d-synthetic"
TASK_EXTERNAL = "external-samples"

TAU_FACTOR_RANGE = (0.1, 0.2)
TAU_S_FACTOR_RANGE = (0.001, 0.01)


@dataclass(frozen=True)
class ExperimentConfig:
    """Declarative description of one experiment (all repetitions)."""

    task: str = TASK_1D
    method: str = METHOD_DEIMOS
    initial_train_size: int = 12
    iterations: int = 1
    batch_size: int = 5
    candidate_pool_size: int = 60
    mask_count: int = 50
    tau_factor: float = 0.15
    tau_s_factor: float = 0.005
    seeds: tuple[int, ...] = (0, 1, 2)
    allow_factor_override: bool = False
    # synthetic 1-D task
    dataset_size: int = 200
    noise_sd: float = 0.3
    validation_size: int = 10
    hidden_sizes: tuple[int, ...] = (256, 256, 256)
    dropout_prob: float = 0.2
    weight_decay: float = 0.0005
    epochs: int = 300
    learning_rate: float = 0.01
    minibatch_size: int = 16
    grid_points: int = 201
    # external-samples task
    samples_csv: str | None = None
    samples_manifest: str | None = None
    tau_inv: float | None = None
    tau_s_inv: float | None = None
    output_dir: str = "."

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "hidden_sizes", tuple(int(s) for s in self.hidden_sizes))
        if self.task not in (TASK_1D, TASK_EXTERNAL):
            raise ValidationError(f"unknown task {self.task!r}")
        if self.method not in METHODS:
            raise ValidationError(f"unknown method {self.method!r}")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be positive")
        if self.batch_size > self.candidate_pool_size:
            raise ValidationError("batch_size must not exceed candidate_pool_size")
        if self.iterations < 0:
            raise ValidationError("iterations must be non-negative")
        if not self.seeds:
            raise ValidationError("at least one seed is required")
        if self.mask_count < 2:
            raise ValidationError("mask_count must be >= 2")
        if not self.allow_factor_override:
            _check_factor("tau_factor", self.tau_factor, TAU_FACTOR_RANGE)
            _check_factor("tau_s_factor", self.tau_s_factor, TAU_S_FACTOR_RANGE)
        if self.task == TASK_1D:
            reserved = self.initial_train_size + self.validation_size
            if reserved >= self.dataset_size:
                raise ValidationError("dataset too small for train + validation splits")
            pool_at_last_iteration = (
                self.dataset_size
                - reserved
                - self.batch_size * max(self.iterations - 1, 0)
            )
            if self.iterations > 0 and pool_at_last_iteration < self.candidate_pool_size:
                raise ValidationError(
                    "pool would shrink below candidate_pool_size before the last iteration"
                )
            if self.method == METHOD_MAX_ENTROPY:
                raise ValidationError("max_entropy needs class probabilities, not a regression task")
        if self.task == TASK_EXTERNAL and (
            self.samples_csv is None or self.samples_manifest is None
        ):
            raise ValidationError("external-samples task needs samples_csv and samples_manifest")

    def to_dict(self) -> dict:
        payload = dataclasses.asdict(self)
        payload["seeds"] = list(self.seeds)
        payload["hidden_sizes"] = list(self.hidden_sizes)
        return payload

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ValidationError(f"unknown config fields: {sorted(unknown)}")
        return cls(**payload)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            payload = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(payload)


def _check_factor(name: str, value: float, bounds: tuple[float, float]) -> None:
    low, high = bounds
    if not low <= value <= high:
        raise ValidationError(
            f"{name}={value} outside [{low}, {high}]; set allow_factor_override to force"
        )


class OracleDataset:
    """Inputs with hidden labels, revealed only for training/queried points."""

    def __init__(self, inputs, labels, train_indices, pool_indices,
                 validation_indices, test_indices=()):
        self.inputs = np.asarray(inputs)
        self._labels = np.asarray(labels)
        self.train_indices = set(int(i) for i in train_indices)
        self.pool_indices = set(int(i) for i in pool_indices)
        self.validation_indices = set(int(i) for i in validation_indices)
        self.test_indices = set(int(i) for i in test_indices)
        splits = [self.train_indices, self.pool_indices,
                  self.validation_indices, self.test_indices]
        total = sum(len(s) for s in splits)
        if len(set().union(*splits)) != total:
            raise ValidationError("dataset splits must be disjoint")
        self._revealed = set(self.train_indices) | set(self.validation_indices)

    def reveal(self, indices) -> np.ndarray:
        """Reveal labels for queried pool points and move them to training."""
        indices = [int(i) for i in indices]
        for idx in indices:
            if idx in self._revealed:
                raise ValidationError(f"label of point {idx} was already revealed")
            if idx not in self.pool_indices:
                raise ValidationError(f"point {idx} is not in the unlabeled pool")
        for idx in indices:
            self._revealed.add(idx)
            self.pool_indices.remove(idx)
            self.train_indices.add(idx)
        return self._labels[indices]

    def labels_for(self, indices) -> np.ndarray:
        indices = [int(i) for i in indices]
        hidden = [i for i in indices if i not in self._revealed]
        if hidden:
            raise ValidationError(f"labels not revealed for points {hidden}")
        return self._labels[indices]

    def training_data(self) -> tuple[np.ndarray, np.ndarray]:
        idx = sorted(self.train_indices)
        return self.inputs[idx], self.labels_for(idx)


@dataclass(frozen=True)
class RepresentativeSample:
    """X_samp: dataset indices with their labeled/unlabeled partition."""

    indices: tuple[int, ...]
    labeled: tuple[int, ...]
    unlabeled: tuple[int, ...]


def sample_representative_set(
    train_indices, pool_indices, target_candidates: int, rng
) -> RepresentativeSample:
    """Draw uniformly without replacement from train + pool until the
    unlabeled part reaches ``target_candidates``."""
    train = sorted(int(i) for i in train_indices)
    pool = sorted(int(i) for i in pool_indices)
    target = int(target_candidates)
    if target > len(pool):
        raise ValidationError(
            f"target of {target} unlabeled candidates unattainable from pool of {len(pool)}"
        )
    if target == 0:
        return RepresentativeSample((), (), ())
    generator, _ = as_generator(rng)
    universe = np.array(train + pool, dtype=np.intp)
    pool_set = set(pool)
    chosen: list[int] = []
    labeled: list[int] = []
    unlabeled: list[int] = []
    for pos in generator.permutation(len(universe)):
        idx = int(universe[pos])
        chosen.append(idx)
        (unlabeled if idx in pool_set else labeled).append(idx)
        if len(unlabeled) == target:
            break
    return RepresentativeSample(tuple(chosen), tuple(labeled), tuple(unlabeled))


def calibrate_tau_inv(
    validation_samples: PredictionSamples, factor: float, override: bool = False
) -> float:
    """tau_inv = factor * mean per-point dropout sample variance."""
    if validation_samples.kind != REGRESSION:
        raise ValidationError("tau_inv calibration needs regression samples")
    if not override:
        _check_factor("tau_factor", factor, TAU_FACTOR_RANGE)
    # First-row shift: exact zeros for constant predictions (see covariance).
    shifted = validation_samples.values - validation_samples.values[0]
    variances = np.var(shifted, axis=0, ddof=1)
    return float(factor) * float(variances.mean())


def calibrate_tau_s_inv(
    validation_samples: PredictionSamples, factor: float, override: bool = False
) -> float:
    """tau_s_inv = factor * mean dropout variance across classes and points."""
    if validation_samples.kind != CLASSIFICATION:
        raise ValidationError("tau_s_inv calibration needs classification samples")
    if not override:
        _check_factor("tau_s_factor", factor, TAU_S_FACTOR_RANGE)
    shifted = validation_samples.values - validation_samples.values[0]
    variances = np.var(shifted, axis=0, ddof=1)
    return float(factor) * float(variances.mean())


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    train_size: int
    metric: float
    seconds: float
    seed: int
    # Not exported to CSV; kept for invariant checks and debugging.
    ei_total: float | None = None
    trace_drop: float | None = None
    acquired: tuple[int, ...] = ()


@dataclass
class MetricsLog:
    seed: int
    config: dict
    records: list[IterationRecord] = field(default_factory=list)

    def append(self, record: IterationRecord) -> None:
        if self.records:
            previous = self.records[-1]
            if record.iteration != previous.iteration + 1:
                raise ValidationError("iteration records must be consecutive")
        self.records.append(record)


def export_metrics(log: MetricsLog, csv_path) -> None:
    """Per-iteration CSV plus a JSON config sidecar next to it."""
    csv_path = Path(csv_path)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "train_size", "metric", "seconds", "seed"])
        for rec in log.records:
            writer.writerow(
                [rec.iteration, rec.train_size, repr(rec.metric), repr(rec.seconds), rec.seed]
            )
    sidecar = csv_path.with_suffix(".json")
    sidecar.write_text(
        json.dumps({"seed": log.seed, "config": log.config}, indent=2) + "\n"
    )


def read_metrics(csv_path) -> list[IterationRecord]:
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [
            IterationRecord(
                iteration=int(row["iteration"]),
                train_size=int(row["train_size"]),
                metric=float(row["metric"]),
                seconds=float(row["seconds"]),
                seed=int(row["seed"]),
            )
            for row in reader
        ]


def _build_1d_dataset(config: ExperimentConfig, seed: int) -> tuple[OracleDataset, toymodel.DenseNet]:
    data_rng, _ = as_generator(derive_seed(seed, 1))
    x, y, generator_net = toymodel.generate_1d_data(
        data_rng, config.dataset_size, config.noise_sd
    )
    order = data_rng.permutation(config.dataset_size)
    n_train = config.initial_train_size
    n_val = config.validation_size
    dataset = OracleDataset(
        inputs=x,
        labels=y,
        train_indices=order[:n_train],
        pool_indices=order[n_train + n_val :],
        validation_indices=order[n_train : n_train + n_val],
    )
    return dataset, generator_net


def _train_fresh(config: ExperimentConfig, dataset: OracleDataset, seed: int) -> toymodel.DenseNet:
    net = toymodel.make_1d_regression_net(
        config.hidden_sizes,
        dropout_prob=config.dropout_prob,
        weight_decay=config.weight_decay,
        rng=seed,
    )
    train_config = toymodel.TrainConfig(
        epochs=config.epochs,
        learning_rate=config.learning_rate,
        minibatch_size=config.minibatch_size,
        seed=derive_seed(seed, 1),
    )
    trained, _ = toymodel.train(net, dataset.training_data(), train_config)
    return trained


def _grid_mse(config: ExperimentConfig, model: toymodel.DenseNet,
              generator_net: toymodel.DenseNet) -> float:
    grid = np.linspace(*toymodel.INPUT_RANGE, config.grid_points)
    predictions = toymodel.forward(model, grid)[:, 0]
    truth = toymodel.forward(generator_net, grid)[:, 0]
    return float(np.mean((predictions - truth) ** 2))


def _acquire(
    config: ExperimentConfig,
    cov: covariance.CovarianceModel,
    candidates: CandidateSet,
    mean_probs: np.ndarray | None,
    seed: int,
) -> AcquisitionResult:
    if config.method == METHOD_DEIMOS:
        return acquisition.greedy_batch(cov, candidates, config.batch_size)
    if config.method == METHOD_RANDOM:
        return acquisition.baseline_random(candidates, config.batch_size, seed)
    if config.method == METHOD_MAX_VARIANCE:
        return acquisition.baseline_max_variance(cov, candidates, config.batch_size)
    if config.method == METHOD_MAX_ENTROPY:
        if mean_probs is None:
            raise ValidationError("max_entropy needs classification samples")
        return acquisition.baseline_max_entropy(mean_probs, candidates, config.batch_size)
    raise ValidationError(f"method {config.method!r} is not runnable here")


def run_experiment(config: ExperimentConfig, seed: int | None = None) -> MetricsLog:
    """Run one repetition (one seed) of the configured experiment."""
    seed = int(config.seeds[0] if seed is None else seed)
    if config.task == TASK_EXTERNAL:
        return _run_external(config, seed)

    log = MetricsLog(seed=seed, config=config.to_dict())
    dataset, generator_net = _build_1d_dataset(config, seed)

    model = _train_fresh(config, dataset, derive_seed(seed, 2, 0))
    log.append(
        IterationRecord(
            iteration=0,
            train_size=len(dataset.train_indices),
            metric=_grid_mse(config, model, generator_net),
            seconds=0.0,
            seed=derive_seed(seed, 2, 0),
        )
    )

    validation_inputs = dataset.inputs[sorted(dataset.validation_indices)]
    calibration_samples = toymodel.mc_predict_shared_masks(
        model, validation_inputs, config.mask_count, derive_seed(seed, 3)
    )
    tau_inv = calibrate_tau_inv(
        calibration_samples, config.tau_factor, config.allow_factor_override
    )

    for iteration in range(1, config.iterations + 1):
        samp = sample_representative_set(
            dataset.train_indices,
            dataset.pool_indices,
            config.candidate_pool_size,
            derive_seed(seed, 4, iteration),
        )
        cov_seed = derive_seed(seed, 5, iteration)
        started = time.perf_counter()
        samples = toymodel.mc_predict_shared_masks(
            model, dataset.inputs[list(samp.indices)], config.mask_count, cov_seed
        )
        cov = covariance.estimate_regression_covariance(samples, tau_inv)
        unlabeled_set = set(samp.unlabeled)
        candidates = CandidateSet(
            tuple(i for i, idx in enumerate(samp.indices) if idx in unlabeled_set),
            acquisition.SUBSAMPLED,
        )
        result = _acquire(config, cov, candidates, None, derive_seed(seed, 6, iteration))
        seconds = time.perf_counter() - started
        acquired = tuple(samp.indices[pos] for pos in result.selected)
        dataset.reveal(acquired)
        model = _train_fresh(config, dataset, derive_seed(seed, 2, iteration))
        log.append(
            IterationRecord(
                iteration=iteration,
                train_size=len(dataset.train_indices),
                metric=_grid_mse(config, model, generator_net),
                seconds=seconds,
                seed=cov_seed,
                ei_total=float(sum(result.ei_per_step)),
                trace_drop=float(
                    result.trace_trajectory[0] - result.trace_trajectory[-1]
                ),
                acquired=acquired,
            )
        )
    return log


def run_repetitions(config: ExperimentConfig) -> list[MetricsLog]:
    """All configured repetitions, sequentially (they are independent)."""
    return [run_experiment(config, seed) for seed in config.seeds]


def select_from_samples(
    samples: PredictionSamples,
    method: str,
    batch_size: int,
    tau_inv: float = 0.0,
    tau_s_inv: float = 0.0,
    seed: int = 0,
) -> AcquisitionResult:
    """Prediction-file selection core: estimate, score, pick a batch."""
    if samples.kind == REGRESSION:
        cov = covariance.estimate_regression_covariance(samples, tau_inv)
        mean_probs = None
    else:
        cov = covariance.estimate_classification_covariance(samples, tau_s_inv)
        mean_probs = samples.values.mean(axis=0).reshape(
            samples.num_points, samples.num_classes
        )
    candidates = CandidateSet(tuple(range(samples.num_points)), acquisition.ALL_UNLABELED)
    if method == METHOD_DEIMOS:
        return acquisition.greedy_batch(cov, candidates, batch_size)
    if method == METHOD_RANDOM:
        return acquisition.baseline_random(candidates, batch_size, seed)
    if method == METHOD_MAX_VARIANCE:
        return acquisition.baseline_max_variance(cov, candidates, batch_size)
    if method == METHOD_MAX_ENTROPY:
        if mean_probs is None:
            raise ValidationError("max_entropy needs classification samples")
        return acquisition.baseline_max_entropy(mean_probs, candidates, batch_size)
    raise ValidationError(f"method {method!r} cannot run on sample files")


def select_from_files(
    samples_csv,
    manifest_path,
    method: str,
    batch_size: int,
    tau_inv: float = 0.0,
    tau_s_inv: float = 0.0,
    seed: int = 0,
) -> AcquisitionResult:
    samples = covariance.read_samples(samples_csv, manifest_path)
    return select_from_samples(samples, method, batch_size, tau_inv, tau_s_inv, seed)


def _run_external(config: ExperimentConfig, seed: int) -> MetricsLog:
    result = select_from_files(
        config.samples_csv,
        config.samples_manifest,
        config.method,
        config.batch_size,
        tau_inv=config.tau_inv or 0.0,
        tau_s_inv=config.tau_s_inv or 0.0,
        seed=seed,
    )
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result.write(out_dir / f"picks_seed{seed}.json")
    return MetricsLog(seed=seed, config=config.to_dict())
