"""Input validation helpers used by the numeric modules.

All array-accepting functions in this package validate eagerly: shapes and
finiteness are checked on entry so failures surface at the call site rather
than deep inside a reduction.
"""

from __future__ import annotations

import numpy as np

from .errors import DimMismatchError

# Loose on purpose: finite-difference probes nudge entries off the unit
# sphere by ~1e-5, which must not trip the normalization check.
ROW_NORM_ATOL = 1e-3


def as_float_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce to a C-contiguous float64 2-D array and check finiteness."""
    m = np.ascontiguousarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise DimMismatchError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise ValueError(f"{name} contains non-finite entries")
    return m


def as_float_vector(x, name: str = "vector") -> np.ndarray:
    """Coerce to a contiguous float64 1-D array and check finiteness."""
    v = np.ascontiguousarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise DimMismatchError(f"{name} must be 1-D, got shape {v.shape}")
    if not np.isfinite(v).all():
        raise ValueError(f"{name} contains non-finite entries")
    return v


def check_matching_cols(a: np.ndarray, b: np.ndarray, a_name: str = "Q", b_name: str = "K") -> None:
    if a.shape[1] != b.shape[1]:
        raise DimMismatchError(
            f"{a_name} has {a.shape[1]} columns but {b_name} has {b.shape[1]}"
        )


def check_rows_normalized(m: np.ndarray, name: str = "matrix", atol: float = ROW_NORM_ATOL) -> None:
    norms = np.sqrt(np.einsum("ij,ij->i", m, m))
    bad = np.abs(norms - 1.0) > atol
    if bad.any():
        i = int(np.argmax(bad))
        raise ValueError(f"{name} row {i} has norm {norms[i]:.6g}, expected 1 within {atol:g}")
