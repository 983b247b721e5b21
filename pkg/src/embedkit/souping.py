"""Weighted consolidation of low-rank adapters into one model update.

Averaging factor matrices element-wise does not average the model function
(mean(B) @ mean(A) != mean(B @ A)), so souping composes each adapter's
dense delta first and averages those. An optional truncated-SVD step
re-factors the averaged delta back into a rank-r adapter.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .encoder import EncoderParams, LoraAdapter
from .errors import ShapeMismatchError, WeightsInvalidError
from .validation import as_float_matrix

WEIGHT_SUM_ATOL = 1e-9

STRATEGIES = ("delta-average", "factor-svd")


@dataclass
class SoupSpec:
    """Adapters to merge, their convex weights, and the merge strategy.

    ``svd_rank`` bounds the re-factorization rank for "factor-svd";
    defaults to the adapters' common rank.
    """

    adapters: Sequence[LoraAdapter]
    weights: Sequence[float] = field(default_factory=list)
    strategy: str = "delta-average"
    svd_rank: Optional[int] = None

    def validate(self) -> None:
        if len(self.adapters) < 1:
            raise ShapeMismatchError("need at least one adapter to soup")
        shape = (self.adapters[0].d_out, self.adapters[0].d_in)
        for i, a in enumerate(self.adapters):
            if (a.d_out, a.d_in) != shape:
                raise ShapeMismatchError(
                    f"adapter {i} has delta shape {(a.d_out, a.d_in)}, expected {shape}"
                )
        if len(self.weights) != len(self.adapters):
            raise WeightsInvalidError(
                f"{len(self.weights)} weights for {len(self.adapters)} adapters"
            )
        w = np.asarray(self.weights, dtype=np.float64)
        if (w < 0).any():
            raise WeightsInvalidError(f"weights must be >= 0, got {list(w)}")
        if abs(float(w.sum()) - 1.0) > WEIGHT_SUM_ATOL:
            raise WeightsInvalidError(f"weights must sum to 1, got {float(w.sum()):.12g}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}, expected one of {STRATEGIES}")
        if self.svd_rank is not None and self.svd_rank < 1:
            raise ValueError(f"svd_rank must be >= 1, got {self.svd_rank}")


def uniform_weights(n: int) -> list[float]:
    return [1.0 / n] * n


@dataclass
class SoupResult:
    """Merged update: always a dense delta, plus a rank-r adapter for factor-svd."""

    delta: np.ndarray
    adapter: Optional[LoraAdapter] = None


def soup_adapters(spec: SoupSpec) -> SoupResult:
    """Merge adapters into one update whose delta is the weighted sum of theirs.

    "delta-average" returns the exact weighted sum of the composed deltas.
    "factor-svd" additionally re-factors that sum into (B', A') with
    scaling 1 via the best rank-r truncated SVD.
    """
    spec.validate()
    delta = np.zeros((spec.adapters[0].d_out, spec.adapters[0].d_in))
    for lam, adapter in zip(spec.weights, spec.adapters):
        delta += lam * adapter.delta()

    if spec.strategy == "delta-average":
        return SoupResult(delta=delta)

    rank = spec.svd_rank if spec.svd_rank is not None else spec.adapters[0].rank
    rank = min(rank, min(delta.shape))
    u, s, vt = np.linalg.svd(delta, full_matrices=False)
    root = np.sqrt(s[:rank])
    b = u[:, :rank] * root[None, :]
    a = root[:, None] * vt[:rank]
    adapter = LoraAdapter(A=a, B=b, scaling=1.0)
    return SoupResult(delta=delta, adapter=adapter)


def merge_into_base(params: EncoderParams, delta) -> EncoderParams:
    """Fold a dense weight delta into the base weights and drop the adapter."""
    delta = as_float_matrix(delta, "delta")
    if delta.shape != params.W.shape:
        raise ShapeMismatchError(f"delta shape {delta.shape} != W shape {params.W.shape}")
    return EncoderParams(W=params.W + delta, b=params.b.copy(), adapter=None)
