"""Command-line interface.

Exit codes: 0 on success, 2 for validation/configuration errors, 3 for
numerical failures. The environment variable ``DEIMOS_SEED`` overrides
configured seeds for every subcommand.
"""

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import harness, synthcov
from .errors import NumericalError, ValidationError


def _env_seed() -> int | None:
    raw = os.environ.get("DEIMOS_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise ValidationError(f"DEIMOS_SEED must be an integer, got {raw!r}") from exc


def _manifest_path(args) -> Path:
    if args.manifest is not None:
        return Path(args.manifest)
    return Path(args.samples).with_suffix(".json")


def _cmd_toy1d(args) -> int:
    config = harness.ExperimentConfig.from_json(args.config)
    override = _env_seed()
    if override is not None:
        config = replace(config, seeds=(override,))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for log in harness.run_repetitions(config):
        csv_path = out_dir / f"metrics_seed{log.seed}.csv"
        harness.export_metrics(log, csv_path)
        final = log.records[-1].metric if log.records else float("nan")
        print(f"seed {log.seed}: {len(log.records)} records, final metric {final:.6g} -> {csv_path}")
    return 0


def _cmd_select(args) -> int:
    seed = _env_seed()
    if seed is None:
        seed = args.seed
    result = harness.select_from_files(
        args.samples,
        _manifest_path(args),
        method=args.method,
        batch_size=args.batch,
        tau_inv=args.tau_inv,
        tau_s_inv=args.tau_s_inv,
        seed=seed,
    )
    result.write(args.out)
    print(f"selected {list(result.selected)} -> {args.out}")
    return 0


def _cmd_score(args) -> int:
    from . import acquisition, covariance

    samples = covariance.read_samples(args.samples, _manifest_path(args))
    if samples.kind == covariance.REGRESSION:
        cov = covariance.estimate_regression_covariance(samples, args.tau_inv)
    else:
        cov = covariance.estimate_classification_covariance(samples, args.tau_s_inv)
    value = acquisition.expected_improvement(cov, args.candidate)
    print(repr(value))
    return 0


def _cmd_simulate_ratio(args) -> int:
    seed = _env_seed()
    if seed is None:
        seed = args.seed
    config = synthcov.RatioExperimentConfig(
        trials=args.trials,
        batch_size=args.batch,
        num_points=args.points,
        samples_per_point=args.masks,
        base_seed=seed,
    )
    report = synthcov.ratio_experiment(config)
    synthcov.write_ratio_csv(report, args.out)
    print(
        f"{config.trials} trials: min ratio {report.min_ratio:.6f}, "
        f"mean ratio {report.mean_ratio:.6f} -> {args.out}"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deimos",
        description="Pool-based active learning via expected-improvement maximization.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    toy = sub.add_parser("toy1d", help="run the synthetic 1-D experiment from a JSON config")
    toy.add_argument("--config", required=True, help="JSON file mirroring ExperimentConfig")
    toy.add_argument("--out-dir", default=".", help="directory for metrics CSV/JSON")
    toy.set_defaults(func=_cmd_toy1d)

    select = sub.add_parser("select", help="pick a batch from a prediction-samples file")
    select.add_argument("--samples", required=True, help="prediction samples CSV")
    select.add_argument("--manifest", default=None, help="JSON sidecar (default: samples with .json)")
    select.add_argument("--method", default="deimos",
                        choices=["deimos", "random", "max_variance", "max_entropy"])
    select.add_argument("--batch", required=True, type=int)
    select.add_argument("--tau-inv", type=float, default=0.0)
    select.add_argument("--tau-s-inv", type=float, default=0.0)
    select.add_argument("--seed", type=int, default=0)
    select.add_argument("--out", required=True, help="output JSON for the selection")
    select.set_defaults(func=_cmd_select)

    score = sub.add_parser("score", help="expected improvement of one candidate")
    score.add_argument("--samples", required=True)
    score.add_argument("--manifest", default=None)
    score.add_argument("--candidate", required=True, type=int)
    score.add_argument("--tau-inv", type=float, default=0.0)
    score.add_argument("--tau-s-inv", type=float, default=0.0)
    score.set_defaults(func=_cmd_score)

    ratio = sub.add_parser("simulate-ratio", help="greedy-vs-optimal study on synthetic covariances")
    ratio.add_argument("--trials", required=True, type=int)
    ratio.add_argument("--batch", required=True, type=int)
    ratio.add_argument("--points", required=True, type=int)
    ratio.add_argument("--masks", required=True, type=int)
    ratio.add_argument("--seed", type=int, default=0)
    ratio.add_argument("--out", required=True)
    ratio.set_defaults(func=_cmd_simulate_ratio)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
