"""Dense float64 vector/matrix primitives and numerically stable reductions.

Everything here is a pure function evaluated single-threaded in a fixed
order, so results are bit-identical across calls no matter how callers
parallelize around them.
"""

from __future__ import annotations

import numpy as np

from .errors import DimMismatchError, EmptyInputError, ZeroVectorError
from .validation import as_float_matrix, as_float_vector, check_matching_cols, check_rows_normalized

ZERO_NORM_EPS = 1e-12


def l2_normalize(v) -> np.ndarray:
    """Scale ``v`` to unit L2 norm, preserving direction.

    Raises ZeroVectorError when the norm is below 1e-12.
    """
    v = as_float_vector(v, "vector")
    norm = float(np.sqrt(np.dot(v, v)))
    if norm < ZERO_NORM_EPS:
        raise ZeroVectorError(f"cannot normalize vector with norm {norm:.3g}")
    return v / norm


def normalize_rows(m) -> np.ndarray:
    """Row-wise l2_normalize; raises ZeroVectorError naming the first bad row."""
    m = as_float_matrix(m, "matrix")
    norms = np.sqrt(np.einsum("ij,ij->i", m, m))
    if (norms < ZERO_NORM_EPS).any():
        i = int(np.argmax(norms < ZERO_NORM_EPS))
        raise ZeroVectorError(f"row {i} has norm {norms[i]:.3g}")
    return m / norms[:, None]


def similarity_matrix(queries, keys) -> np.ndarray:
    """Cosine similarities S[i][j] = dot(queries[i], keys[j]).

    Both inputs must be row-normalized with equal column counts; for such
    inputs every entry lies in [-1, 1] up to rounding.
    """
    q = as_float_matrix(queries, "queries")
    k = as_float_matrix(keys, "keys")
    check_matching_cols(q, k, "queries", "keys")
    check_rows_normalized(q, "queries")
    check_rows_normalized(k, "keys")
    return q @ k.T


def logsumexp(xs) -> float:
    """log(sum(exp(xs))) via max-shift; no overflow for |x| <= 700."""
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 1:
        raise DimMismatchError(f"expected a 1-D sequence, got shape {xs.shape}")
    if xs.size == 0:
        raise EmptyInputError("logsumexp of an empty sequence")
    if not np.isfinite(xs).all():
        raise ValueError("logsumexp input contains non-finite entries")
    m = float(xs.max())
    return m + float(np.log(np.sum(np.exp(xs - m))))
