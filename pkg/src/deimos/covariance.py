"""Joint predictive covariance from fixed-mask dropout predictions.

The covariance over a representative sample of points is estimated from J
dropout realizations that share their masks across all points (so cross-point
covariances are meaningful), then shrunk toward zero uncertainty one point at
a time by Gaussian conditioning as points are queried.

Regression tracks one output per point (D = S); classification tracks the
per-class probabilities of every point in point-major order (D = S*c).
"""

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.linalg

from .errors import (
    AlreadyConditionedError,
    CorruptedCovarianceError,
    InsufficientSamplesError,
    InvalidDataError,
    SingularBlockError,
    ValidationError,
)

REGRESSION = "regression"
CLASSIFICATION = "classification"

# Relative threshold below which a 1x1 diagonal block counts as singular when
# no smoothing ridge is available. Reporting singularity beats silent jitter,
# which would distort the acquisition ranking.
_SINGULAR_REL = 1e-12


def _as_float64(values, what: str) -> np.ndarray:
    # Copy so the model owns (and can freeze) its storage.
    arr = np.array(values, dtype=np.float64, copy=True)
    if not np.all(np.isfinite(arr)):
        raise InvalidDataError(f"{what} contains non-finite values")
    return arr


@dataclass(frozen=True, eq=False)
class PredictionSamples:
    """J fixed-mask dropout realizations of model outputs over S points.

    ``values`` has one row per mask realization and one column per tracked
    output: S columns in regression, S*c in classification with point-major
    ordering (point 0 classes 0..c-1, then point 1, ...).
    """

    kind: str
    values: np.ndarray
    num_points: int
    num_classes: int
    mask_count: int
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in (REGRESSION, CLASSIFICATION):
            raise ValidationError(f"unknown samples kind {self.kind!r}")
        values = _as_float64(self.values, "prediction samples")
        if values.ndim != 2:
            raise ValidationError("prediction samples must be a 2-D matrix")
        object.__setattr__(self, "values", values)
        j, d = values.shape
        if j < 2:
            raise InsufficientSamplesError(
                f"need at least 2 mask realizations, got {j}"
            )
        if self.kind == REGRESSION and self.num_classes != 1:
            raise ValidationError("regression samples must have num_classes=1")
        if self.num_classes < 1 or self.num_points < 1:
            raise ValidationError("num_points and num_classes must be positive")
        if d != self.num_points * self.num_classes:
            raise ValidationError(
                f"expected {self.num_points * self.num_classes} columns, got {d}"
            )
        if self.mask_count != j:
            raise ValidationError(
                f"mask_count {self.mask_count} does not match {j} rows"
            )
        if self.kind == CLASSIFICATION:
            self._check_probability_rows(values)
        values.setflags(write=False)

    def _check_probability_rows(self, values: np.ndarray) -> None:
        if np.any(values < -1e-9) or np.any(values > 1 + 1e-9):
            raise InvalidDataError("class probabilities must lie in [0, 1]")
        # A single tracked class carries no sum constraint (it is the
        # probability of one class, not a full distribution).
        if self.num_classes >= 2:
            groups = values.reshape(self.mask_count, self.num_points, self.num_classes)
            sums = groups.sum(axis=2)
            if np.any(np.abs(sums - 1.0) > 1e-6):
                raise InvalidDataError(
                    "per-point class probabilities must sum to 1 within 1e-6"
                )

    @property
    def dim(self) -> int:
        return self.num_points * self.num_classes


@dataclass(frozen=True, eq=False)
class CovarianceModel:
    """Symmetric PSD predictive covariance plus its precision constants.

    ``tau_inv`` is the additive diagonal converting dropout sample covariance
    into predictive covariance in regression (0 in classification);
    ``tau_s_inv`` is the classification smoothing ridge applied to a
    candidate's own block at inversion time only (0 in regression).
    ``conditioned_indices`` lists point indices already conditioned out.
    """

    dim: int
    matrix: np.ndarray
    tau_inv: float
    tau_s_inv: float
    num_points: int
    num_classes: int
    conditioned_indices: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        matrix = _as_float64(self.matrix, "covariance matrix")
        if matrix.shape != (self.dim, self.dim):
            raise ValidationError(
                f"matrix shape {matrix.shape} does not match dim {self.dim}"
            )
        if self.dim != self.num_points * self.num_classes:
            raise ValidationError("dim must equal num_points * num_classes")
        if self.tau_inv < 0 or self.tau_s_inv < 0:
            raise ValidationError("tau_inv and tau_s_inv must be non-negative")
        scale = float(np.abs(matrix).max()) if matrix.size else 0.0
        if not np.allclose(matrix, matrix.T, rtol=0.0, atol=1e-9 * max(scale, 1.0)):
            raise ValidationError("covariance matrix is not symmetric")
        # Same corruption rule as psd_guard; round-off negatives below this
        # threshold are the guard's job to clamp, not a construction error.
        diag_floor = max(1e-6 * abs(float(np.trace(matrix))), 1e-10)
        if np.any(np.diag(matrix) < -diag_floor):
            raise CorruptedCovarianceError("covariance diagonal has negative entries")
        object.__setattr__(self, "matrix", matrix)
        object.__setattr__(
            self, "conditioned_indices", frozenset(int(i) for i in self.conditioned_indices)
        )
        if self.conditioned_indices and (
            min(self.conditioned_indices) < 0
            or max(self.conditioned_indices) >= self.num_points
        ):
            raise ValidationError("conditioned index out of range")
        matrix.setflags(write=False)

    def trace(self) -> float:
        return float(np.trace(self.matrix))

    def point_block(self, point_index: int) -> slice:
        """Column slice of the c outputs tracked for ``point_index``."""
        c = self.num_classes
        return slice(point_index * c, (point_index + 1) * c)

    def validate(self, check_psd: bool = False) -> None:
        """Check the expensive invariants: strict diagonal floor, conditioned
        blocks near zero, and optionally positive semidefiniteness by
        eigenvalue (small dims only).
        """
        if np.any(np.diag(self.matrix) < -1e-10):
            raise CorruptedCovarianceError(
                "covariance diagonal below -1e-10; run psd_guard"
            )
        scale = max(float(np.abs(self.matrix).max()), 1.0) if self.matrix.size else 1.0
        # With a smoothing ridge the conditioned block retains a residual of
        # order tau_s_inv (own block) and sqrt(tau_s_inv * scale) (cross).
        tol = 1e-8 * scale
        if self.tau_s_inv > 0:
            tol += self.tau_s_inv + float(np.sqrt(self.tau_s_inv * scale))
        for idx in self.conditioned_indices:
            blk = self.point_block(idx)
            if np.abs(self.matrix[blk, :]).max() > tol or np.abs(self.matrix[:, blk]).max() > tol:
                raise CorruptedCovarianceError(
                    f"conditioned point {idx} has non-zero row/column block"
                )
        if check_psd:
            eigvals = np.linalg.eigvalsh(self.matrix)
            if eigvals.min() < -1e-8 * max(self.trace(), 1.0):
                raise CorruptedCovarianceError(
                    f"covariance is not PSD (min eigenvalue {eigvals.min():g})"
                )


def _sample_covariance(values: np.ndarray) -> np.ndarray:
    """Unbiased (divisor J-1) sample covariance of the rows of ``values``.

    Shifting by the first row first is a no-op for the estimator (covariance
    is translation invariant) but makes constant columns come out exactly
    zero, where mean subtraction would leave rounding residue.
    """
    shifted = values - values[0]
    return np.atleast_2d(np.cov(shifted, rowvar=False, ddof=1))


def estimate_regression_covariance(
    samples: PredictionSamples, tau_inv: float
) -> CovarianceModel:
    """Sample covariance of the dropout rows plus ``tau_inv`` on the diagonal."""
    if samples.kind != REGRESSION:
        raise ValidationError("estimate_regression_covariance needs regression samples")
    if tau_inv < 0:
        raise ValidationError("tau_inv must be non-negative")
    matrix = _sample_covariance(samples.values) + float(tau_inv) * np.eye(samples.dim)
    return CovarianceModel(
        dim=samples.dim,
        matrix=matrix,
        tau_inv=float(tau_inv),
        tau_s_inv=0.0,
        num_points=samples.num_points,
        num_classes=1,
    )


def estimate_classification_covariance(
    samples: PredictionSamples, tau_s_inv: float
) -> CovarianceModel:
    """Sample covariance of the flattened per-class probability rows.

    ``tau_s_inv`` is stored for later inversion smoothing; it is a ridge on a
    candidate's own block at solve time, never added to the matrix globally.
    """
    if samples.kind != CLASSIFICATION:
        raise ValidationError(
            "estimate_classification_covariance needs classification samples"
        )
    if tau_s_inv < 0:
        raise ValidationError("tau_s_inv must be non-negative")
    matrix = _sample_covariance(samples.values)
    return CovarianceModel(
        dim=samples.dim,
        matrix=matrix,
        tau_inv=0.0,
        tau_s_inv=float(tau_s_inv),
        num_points=samples.num_points,
        num_classes=samples.num_classes,
    )


def _solve_own_block(cov: CovarianceModel, point_index: int) -> np.ndarray:
    """Return ``(V_nn + tau_s_inv I)^{-1} V_n^T`` for the point's column block.

    Symmetric (Cholesky) factorization; a numerically singular block with no
    smoothing available raises :class:`SingularBlockError`.
    """
    blk = cov.point_block(point_index)
    col_block = cov.matrix[:, blk]
    own = cov.matrix[blk, blk].copy()
    if cov.tau_s_inv > 0:
        own[np.diag_indices_from(own)] += cov.tau_s_inv
    if cov.num_classes == 1 and cov.tau_s_inv == 0.0:
        threshold = _SINGULAR_REL * max(cov.trace(), 0.0)
        if own[0, 0] <= threshold:
            raise SingularBlockError(
                f"point {point_index} has a singular 1x1 block ({own[0, 0]:g})"
            )
    if own.shape == (1, 1):
        # Scalar block: one division beats a Cholesky round-trip in both
        # accuracy (exact cancellation in the conditioned row/column) and cost.
        if own[0, 0] <= 0.0:
            raise SingularBlockError(
                f"diagonal block of point {point_index} is not positive definite"
            )
        return col_block.T / own[0, 0]
    try:
        factor = scipy.linalg.cho_factor(own, lower=True, check_finite=False)
        return scipy.linalg.cho_solve(factor, col_block.T, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SingularBlockError(
            f"diagonal block of point {point_index} is not positive definite"
        ) from exc


def _check_point_index(cov: CovarianceModel, point_index: int) -> int:
    point_index = int(point_index)
    if not 0 <= point_index < cov.num_points:
        raise ValidationError(
            f"point index {point_index} out of range [0, {cov.num_points})"
        )
    if point_index in cov.conditioned_indices:
        raise AlreadyConditionedError(f"point {point_index} was already conditioned on")
    return point_index


def condition_on(cov: CovarianceModel, point_index: int) -> CovarianceModel:
    """Condition the joint Gaussian on the outputs of one point.

    Returns a new model with matrix ``V - V_n (V_nn + tau_s_inv I)^{-1} V_n^T``
    (the Schur complement of the point's block), re-symmetrized. The trace
    never increases; the drop equals the point's expected improvement.
    """
    point_index = _check_point_index(cov, point_index)
    solved = _solve_own_block(cov, point_index)  # (c, D)
    col_block = cov.matrix[:, cov.point_block(point_index)]  # (D, c)
    updated = cov.matrix - col_block @ solved
    updated = (updated + updated.T) / 2.0
    return replace(
        cov,
        matrix=updated,
        conditioned_indices=cov.conditioned_indices | {point_index},
    )


def psd_guard(cov: CovarianceModel) -> CovarianceModel:
    """Re-symmetrize and clamp round-off negatives on the diagonal.

    Diagonal entries below ``-max(1e-6 * |trace|, 1e-10)`` indicate real
    corruption and raise; anything between that and zero is clamped to 0.
    """
    matrix = (cov.matrix + cov.matrix.T) / 2.0
    diag = np.diag(matrix)
    threshold = max(1e-6 * abs(float(np.trace(matrix))), 1e-10)
    if np.any(diag < -threshold):
        raise CorruptedCovarianceError(
            f"diagonal entry {diag.min():g} below corruption threshold {-threshold:g}"
        )
    negative = diag < 0.0
    if np.any(negative):
        matrix = matrix.copy()
        matrix[np.diag_indices_from(matrix)] = np.where(negative, 0.0, diag)
    return replace(cov, matrix=matrix)


def regression_header(num_points: int) -> list[str]:
    return [f"point_{i}" for i in range(num_points)]


def classification_header(num_points: int, num_classes: int) -> list[str]:
    return [
        f"point_{i}_class_{k}"
        for i in range(num_points)
        for k in range(num_classes)
    ]


def write_samples(samples: PredictionSamples, csv_path, manifest_path) -> None:
    """Write samples as CSV (header + one row per mask) plus a JSON manifest."""
    if samples.kind == REGRESSION:
        header = regression_header(samples.num_points)
    else:
        header = classification_header(samples.num_points, samples.num_classes)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in samples.values:
            writer.writerow([repr(float(v)) for v in row])
    manifest = {
        "kind": samples.kind,
        "S": samples.num_points,
        "c": samples.num_classes,
        "J": samples.mask_count,
        "seed": samples.seed,
    }
    Path(manifest_path).write_text(json.dumps(manifest, indent=2) + "\n")


def read_samples(csv_path, manifest_path) -> PredictionSamples:
    """Read samples written by :func:`write_samples` (or a foreign producer)."""
    manifest = json.loads(Path(manifest_path).read_text())
    try:
        kind = manifest["kind"]
        num_points = int(manifest["S"])
        num_classes = int(manifest["c"])
        mask_count = int(manifest["J"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"bad samples manifest {manifest_path}: {exc}") from exc
    seed = manifest.get("seed")
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InvalidDataError(f"{csv_path} is empty") from None
        expected = (
            regression_header(num_points)
            if kind == REGRESSION
            else classification_header(num_points, num_classes)
        )
        if [h.strip() for h in header] != expected:
            raise ValidationError(f"{csv_path} header does not match manifest")
        try:
            rows = [[float(v) for v in row] for row in reader if row]
        except ValueError as exc:
            raise InvalidDataError(f"{csv_path}: {exc}") from exc
    values = np.array(rows, dtype=np.float64)
    if values.shape[0] != mask_count:
        raise ValidationError(
            f"{csv_path} has {values.shape[0]} rows, manifest says J={mask_count}"
        )
    return PredictionSamples(
        kind=kind,
        values=values,
        num_points=num_points,
        num_classes=num_classes,
        mask_count=mask_count,
        seed=None if seed is None else int(seed),
    )
