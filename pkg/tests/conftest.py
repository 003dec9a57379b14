"""Shared fixtures and independent oracle implementations.

The oracles here deliberately use a different computational route than the
package (explicit double loops, explicit block inverses) so agreement is
meaningful.
"""

import numpy as np
import pytest

from deimos import CovarianceModel

# 3x3 case with a known greedy/optimal gap: greedy takes point 1 then one of
# {0, 2} for a total reduction of 152/9, while the optimal pair {0, 2} reduces
# the trace by 216/11.
GREEDY_GAP_MATRIX = np.array(
    [
        [9.0, 3.0, 2.0],
        [3.0, 2.0, 3.0],
        [2.0, 3.0, 9.0],
    ]
)
GREEDY_GAP_TOTAL = 152.0 / 9.0
OPTIMAL_GAP_TOTAL = 216.0 / 11.0


@pytest.fixture
def gap_model() -> CovarianceModel:
    return CovarianceModel(
        dim=3,
        matrix=GREEDY_GAP_MATRIX,
        tau_inv=0.0,
        tau_s_inv=0.0,
        num_points=3,
        num_classes=1,
    )


def naive_sample_covariance(values: np.ndarray) -> np.ndarray:
    """Textbook unbiased sample covariance by explicit double loop."""
    values = np.asarray(values, dtype=np.float64)
    j, d = values.shape
    means = values.mean(axis=0)
    out = np.zeros((d, d))
    for a in range(d):
        for b in range(d):
            acc = 0.0
            for row in range(j):
                acc += (values[row, a] - means[a]) * (values[row, b] - means[b])
            out[a, b] = acc / (j - 1)
    return out


def naive_conditional_covariance(
    matrix: np.ndarray, block_cols, tau_s_inv: float = 0.0
) -> np.ndarray:
    """Full joint-Gaussian conditioning via an explicit block inverse.

    Permutes to [rest, block] order, applies the textbook conditional
    covariance to the rest-block, and maps the result back. The conditioned
    rows/columns are the exact residual of the rank-k downdate.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    d = matrix.shape[0]
    block = list(block_cols)
    rest = [i for i in range(d) if i not in set(block)]
    b_block = matrix[np.ix_(block, block)] + tau_s_inv * np.eye(len(block))
    b_inv = np.linalg.inv(b_block)
    out = np.zeros_like(matrix)
    cross = matrix[np.ix_(rest, block)]
    out[np.ix_(rest, rest)] = matrix[np.ix_(rest, rest)] - cross @ b_inv @ cross.T
    # Residuals on the conditioned rows/columns (exactly zero when no ridge).
    own = matrix[np.ix_(block, block)]
    out[np.ix_(block, block)] = own - own @ b_inv @ own
    resid_cross = cross - cross @ b_inv @ own
    out[np.ix_(rest, block)] = resid_cross
    out[np.ix_(block, rest)] = resid_cross.T
    return out


def naive_joint_reduction(matrix: np.ndarray, cols, tau_s_inv: float = 0.0) -> float:
    """Trace reduction from conditioning on ``cols`` jointly, by the literal
    formula tr(V_:B (V_BB + ridge)^-1 V_:B^T)."""
    matrix = np.asarray(matrix, dtype=np.float64)
    cols = list(cols)
    col_block = matrix[:, cols]
    own = matrix[np.ix_(cols, cols)] + tau_s_inv * np.eye(len(cols))
    return float(np.trace(col_block @ np.linalg.inv(own) @ col_block.T))


def random_psd_model(
    rng: np.random.Generator,
    num_points: int,
    num_classes: int = 1,
    tau_inv: float = 0.05,
    tau_s_inv: float = 0.0,
) -> CovarianceModel:
    """Random positive-definite covariance via a sample-covariance draw."""
    dim = num_points * num_classes
    draws = rng.standard_normal((dim + 4, dim))
    matrix = np.cov(draws, rowvar=False, ddof=1) + tau_inv * np.eye(dim)
    return CovarianceModel(
        dim=dim,
        matrix=matrix,
        tau_inv=tau_inv if num_classes == 1 else 0.0,
        tau_s_inv=tau_s_inv,
        num_points=num_points,
        num_classes=num_classes,
    )
