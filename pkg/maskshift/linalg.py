"""
Dense linear-algebra helpers shared by the data generator and the oracle.
"""

import logging

import numpy as np
from scipy import linalg

from .exceptions import NumericalError

logger = logging.getLogger(__name__)

# Diagonal jitter tried after a plain factorization fails: 1e-10 * 10**k, k = 0..4.
JITTER_LADDER = tuple(1e-10 * 10.0 ** k for k in range(5))


def cholesky_with_jitter(matrix, what='covariance'):
    """
    Lower Cholesky factor of a symmetric PSD matrix.

    A plain factorization is tried first; on failure the diagonal is bumped
    along JITTER_LADDER.

    Raises:
        NumericalError: If every rung of the ladder fails.
    """
    matrix = np.asarray(matrix, dtype=float)
    if matrix.size == 0:
        return np.zeros((0, 0))
    try:
        return linalg.cholesky(matrix, lower=True)
    except linalg.LinAlgError:
        pass

    eye = np.eye(matrix.shape[0])
    for jitter in JITTER_LADDER:
        try:
            factor = linalg.cholesky(matrix + jitter * eye, lower=True)
        except linalg.LinAlgError:
            continue
        logger.debug('Cholesky of %s needed jitter %.0e', what, jitter)
        return factor

    raise NumericalError(
        f'Cholesky factorization of the {what} failed after jitter up to '
        f'{JITTER_LADDER[-1]:.0e}.'
    )


def cho_solve_lower(factor, rhs):
    """Solve (L L^T) z = rhs for a lower factor L."""
    return linalg.cho_solve((factor, True), rhs)


def log_det_from_factor(factor):
    return 2.0 * float(np.sum(np.log(np.diag(factor))))
