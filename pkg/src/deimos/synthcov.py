"""Greedy-vs-optimal batch study on synthetic covariances.

Draws i.i.d. standard-normal "predictions", forms the resulting sample
covariance plus a precision ridge, and measures how close the greedy batch's
trace reduction comes to the exhaustive-search optimum.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .acquisition import (
    ALL_UNLABELED,
    CandidateSet,
    brute_force_batch,
    greedy_batch,
)
from .covariance import CovarianceModel, _sample_covariance
from .errors import ValidationError
from .rng import as_generator

# Ridge on the synthetic covariance: 10% of the average sample variance.
RIDGE_FRACTION = 0.1


@dataclass(frozen=True)
class RatioExperimentConfig:
    trials: int
    batch_size: int
    num_points: int
    samples_per_point: int
    base_seed: int = 0

    def __post_init__(self):
        if self.trials < 1:
            raise ValidationError("trials must be >= 1")
        if self.samples_per_point < 2:
            raise ValidationError("samples_per_point must be >= 2")
        if not 1 <= self.batch_size <= self.num_points:
            raise ValidationError("batch_size must be in [1, num_points]")


@dataclass(frozen=True)
class RatioReport:
    config: RatioExperimentConfig
    seeds: tuple[int, ...]
    greedy_reductions: tuple[float, ...]
    optimal_reductions: tuple[float, ...]
    ratios: tuple[float, ...]
    min_ratio: float = field(init=False)
    mean_ratio: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "min_ratio", min(self.ratios))
        object.__setattr__(self, "mean_ratio", float(np.mean(self.ratios)))


def generate_synthetic_covariance(
    num_points: int, samples_per_point: int, rng
) -> CovarianceModel:
    """Sample covariance of i.i.d. standard normals plus the variance ridge."""
    if samples_per_point < 2:
        raise ValidationError("samples_per_point must be >= 2")
    if num_points < 1:
        raise ValidationError("num_points must be >= 1")
    generator, _ = as_generator(rng)
    draws = generator.standard_normal((samples_per_point, num_points))
    sample_cov = _sample_covariance(draws)
    tau_inv = RIDGE_FRACTION * float(np.mean(np.diag(sample_cov)))
    return CovarianceModel(
        dim=num_points,
        matrix=sample_cov + tau_inv * np.eye(num_points),
        tau_inv=tau_inv,
        tau_s_inv=0.0,
        num_points=num_points,
        num_classes=1,
    )


def ratio_experiment(config: RatioExperimentConfig) -> RatioReport:
    """Compare greedy and optimal batch trace reductions over many trials.

    Trial t uses seed ``base_seed + t`` so individual trials can be reproduced
    (and, in principle, run in parallel) independently.
    """
    candidates = CandidateSet(tuple(range(config.num_points)), ALL_UNLABELED)
    seeds = []
    greedy_totals = []
    optimal_totals = []
    ratios = []
    for trial in range(config.trials):
        seed = config.base_seed + trial
        seeds.append(seed)
        cov = generate_synthetic_covariance(
            config.num_points, config.samples_per_point, seed
        )
        greedy = greedy_batch(cov, candidates, config.batch_size)
        optimal = brute_force_batch(cov, candidates, config.batch_size)
        greedy_totals.append(greedy.total_reduction)
        optimal_totals.append(optimal.total_reduction)
        ratios.append(greedy.total_reduction / optimal.total_reduction)
    return RatioReport(
        config=config,
        seeds=tuple(seeds),
        greedy_reductions=tuple(greedy_totals),
        optimal_reductions=tuple(optimal_totals),
        ratios=tuple(ratios),
    )


def write_ratio_csv(report: RatioReport, path) -> None:
    """Raw per-trial ratios as CSV; histogramming/plotting is external."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["trial", "seed", "greedy_reduction", "optimal_reduction", "ratio"])
        for trial, (seed, g, o, r) in enumerate(
            zip(report.seeds, report.greedy_reductions, report.optimal_reductions, report.ratios)
        ):
            writer.writerow([trial, seed, repr(g), repr(o), repr(r)])
