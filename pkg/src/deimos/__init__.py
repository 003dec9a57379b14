"""Pool-based active learning via expected-improvement maximization.

A joint predictive covariance estimated from fixed-mask MC-dropout samples
scores unlabeled candidates by their expected total variance reduction;
batches come from a greedy loop that conditions the covariance after each
pick. Includes an exhaustive-search optimality oracle, the classic baselines,
a from-scratch dense network for the 1-D experiment, and a CLI.
"""

from .acquisition import (
    AcquisitionResult,
    CandidateSet,
    baseline_max_entropy,
    baseline_max_variance,
    baseline_random,
    brute_force_batch,
    ei_classification,
    ei_regression,
    expected_improvement,
    greedy_batch,
)
from .covariance import (
    CovarianceModel,
    PredictionSamples,
    condition_on,
    estimate_classification_covariance,
    estimate_regression_covariance,
    psd_guard,
    read_samples,
    write_samples,
)
from .errors import (
    AlreadyConditionedError,
    BatchTooLargeError,
    CombinatorialBlowupError,
    CorruptedCovarianceError,
    DeimosError,
    InsufficientSamplesError,
    InvalidDataError,
    NumericalError,
    SingularBlockError,
    TrainingDivergedError,
    ValidationError,
)
from .harness import (
    ExperimentConfig,
    MetricsLog,
    OracleDataset,
    calibrate_tau_inv,
    calibrate_tau_s_inv,
    export_metrics,
    run_experiment,
    run_repetitions,
    sample_representative_set,
    select_from_files,
)
from .synthcov import (
    RatioExperimentConfig,
    RatioReport,
    generate_synthetic_covariance,
    ratio_experiment,
)
from .toymodel import (
    DenseNet,
    DropoutMaskSet,
    TrainConfig,
    forward,
    generate_1d_data,
    loss_and_gradients,
    mc_predict_shared_masks,
    tau_from_hyperparams,
    train,
)

__version__ = "0.1.0"
