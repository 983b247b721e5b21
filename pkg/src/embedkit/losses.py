"""Contrastive losses with analytic gradients.

Two objectives over one batch of query/target embedding pairs:

* ``infonce_loss``: temperature-scaled softmax contrast of each query
  against its positive target, with every other in-batch target acting as
  a negative.
* ``whnm_loss``: the weighted-hard-negative, masked variant. Negatives
  whose similarity to the query's positive target exceeds a threshold
  ``delta`` are treated as false negatives and dropped from the softmax
  denominator; surviving negatives are up-weighted by exp(alpha * sim),
  and the temperature is the exp of a learnable per-task scalar theta.

All exponentials are folded into log-domain arithmetic: a weighted term
w * exp(s / tau) is evaluated as exp(alpha * s + s / tau) inside a
row-wise max-shifted logsumexp, so alpha = 9 at similarity 1 stays well
inside float64 range. Per-query losses are averaged, making the loss
magnitude independent of batch size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .errors import (
    DimMismatchError,
    MissingTaskThetaError,
    TemperatureNonPositiveError,
)
from .validation import as_float_matrix, check_rows_normalized

# tau = exp(theta); theta is clamped to this interval after optimizer steps
# so the temperature stays inside [e^-10, e^10].
THETA_MIN = -10.0
THETA_MAX = 10.0

DEFAULT_TAU = 0.05
DEFAULT_THETA = math.log(DEFAULT_TAU)


def task_temperature(theta: float) -> float:
    """Temperature reparameterization tau = exp(theta); positive for any finite theta."""
    if not math.isfinite(theta):
        raise ValueError(f"theta must be finite, got {theta}")
    return math.exp(theta)


def clamp_theta(theta: float) -> float:
    return min(max(theta, THETA_MIN), THETA_MAX)


@dataclass
class LossConfig:
    """Knobs of the weighted/masked objective.

    alpha: hardness-weighting strength; 0 disables weighting.
    delta: false-negative similarity threshold in (0, 1]; None disables masking.
    theta_per_task: log-temperature per task id (tau = exp(theta)).
    differentiate_weights: when False the hardness weights are treated as
        constants in the backward pass (stop-gradient).
    symmetric: also contrast targets against queries and average the two
        directions.
    """

    alpha: float = 9.0
    delta: Optional[float] = 0.95
    theta_per_task: Mapping[str, float] = field(default_factory=dict)
    differentiate_weights: bool = True
    symmetric: bool = False

    def validate(self) -> None:
        if not math.isfinite(self.alpha) or self.alpha < 0:
            raise ValueError(f"alpha must be finite and >= 0, got {self.alpha}")
        if self.delta is not None and not (0.0 < self.delta <= 1.0):
            raise ValueError(f"delta must lie in (0, 1] or be None, got {self.delta}")
        for task, theta in self.theta_per_task.items():
            if not math.isfinite(theta):
                raise ValueError(f"theta for task {task!r} must be finite, got {theta}")


@dataclass
class ContrastiveBatch:
    """N query embeddings aligned with N target embeddings.

    ``positive_index`` maps query i to the row of its positive target
    (identity when omitted) and must be a bijection. ``equivalence_groups``
    optionally labels targets that are mutually positive ground truth; it
    is measurement metadata and never enters the loss.
    """

    queries: np.ndarray
    targets: np.ndarray
    positive_index: Optional[np.ndarray] = None
    task_id: str = "default"
    equivalence_groups: Optional[Mapping[int, str]] = None

    def __post_init__(self):
        self.queries = as_float_matrix(self.queries, "queries")
        self.targets = as_float_matrix(self.targets, "targets")
        n = self.queries.shape[0]
        if n < 2:
            raise ValueError(f"batch needs at least 2 pairs, got {n}")
        if self.targets.shape[0] != n:
            raise DimMismatchError(
                f"queries have {n} rows but targets have {self.targets.shape[0]}"
            )
        if self.queries.shape[1] != self.targets.shape[1]:
            raise DimMismatchError(
                f"queries dim {self.queries.shape[1]} != targets dim {self.targets.shape[1]}"
            )
        if self.positive_index is None:
            self.positive_index = np.arange(n)
        else:
            self.positive_index = np.asarray(self.positive_index, dtype=np.intp)
            if sorted(self.positive_index.tolist()) != list(range(n)):
                raise ValueError("positive_index must be a bijection on [0, N)")
        check_rows_normalized(self.queries, "queries")
        check_rows_normalized(self.targets, "targets")

    @property
    def size(self) -> int:
        return int(self.queries.shape[0])


@dataclass
class LossOutput:
    """Loss value plus analytic gradients and diagnostics.

    ``mask`` is True where a target was excluded from a query's denominator
    as a false negative; ``weights`` holds the hardness weights (1 at the
    positive positions, 0 at masked ones). ``grad_logits`` is d(loss)/dS
    with exact zeros at masked entries. In symmetric mode the gradients
    cover both directions while mask/weights/grad_logits describe the
    query-to-target direction.
    """

    loss: float
    grad_queries: np.ndarray
    grad_targets: np.ndarray
    grad_theta: float
    mask: np.ndarray
    weights: np.ndarray
    grad_logits: np.ndarray


def false_negative_mask(targets, positive_index, delta: float) -> np.ndarray:
    """Boolean N x N matrix; True marks (query i, target j) pairs to exclude.

    Entry (i, j) is True iff j is not query i's positive and the similarity
    between target j and the positive target exceeds ``delta``. The mask is
    recomputed from the current embeddings on every call and carries no
    gradient.
    """
    t = as_float_matrix(targets, "targets")
    pos = np.asarray(positive_index, dtype=np.intp)
    tt = t @ t.T
    mask = tt[pos] > delta
    mask[np.arange(len(pos)), pos] = False
    return mask


def hardness_weights(sims, alpha: float, mask=None, positive_index=None) -> np.ndarray:
    """exp(alpha * sim) for unmasked negatives; 1 at positives, 0 where masked."""
    s = as_float_matrix(sims, "sims")
    n = s.shape[0]
    pos = np.arange(n) if positive_index is None else np.asarray(positive_index, dtype=np.intp)
    w = np.exp(alpha * s)
    w[np.arange(n), pos] = 1.0
    if mask is not None:
        w = np.where(np.asarray(mask, dtype=bool), 0.0, w)
    return w


def _directional_loss(queries, targets, pos, tau, alpha, delta, differentiate_weights):
    """One direction of the contrastive objective; see whnm_loss for the contract."""
    n = queries.shape[0]
    sims = queries @ targets.T
    rows = np.arange(n)

    if delta is not None:
        mask = false_negative_mask(targets, pos, delta)
    else:
        mask = np.zeros((n, n), dtype=bool)

    # Log-domain logits: negatives carry alpha*s + s/tau, the positive s/tau.
    z = alpha * sims + sims / tau
    z[rows, pos] = sims[rows, pos] / tau
    z[mask] = -np.inf

    m = z.max(axis=1)
    p = np.exp(z - m[:, None])
    denom = p.sum(axis=1)
    lse = m + np.log(denom)
    per_query = lse - z[rows, pos]
    loss = float(per_query.mean())

    # Softmax over each row's surviving terms; exact zeros at masked entries.
    p /= denom[:, None]
    dz = p.copy()
    dz[rows, pos] -= 1.0
    dz /= n

    factor = np.full((n, n), (alpha if differentiate_weights else 0.0) + 1.0 / tau)
    factor[rows, pos] = 1.0 / tau
    grad_logits = dz * factor
    grad_logits[mask] = 0.0

    grad_queries = grad_logits @ targets
    grad_targets = grad_logits.T @ queries
    # d(s/tau)/dtheta = -s/tau for every surviving term, positive included.
    grad_theta = float(-(dz * sims).sum() / tau)

    weights = hardness_weights(sims, alpha, mask=mask, positive_index=pos)
    return loss, grad_queries, grad_targets, grad_theta, mask, weights, grad_logits


def infonce_loss(batch: ContrastiveBatch, tau: float) -> LossOutput:
    """Plain temperature-scaled contrastive loss over in-batch negatives.

    Per query: -log( exp(s+/tau) / (exp(s+/tau) + sum_j exp(s_j/tau)) ),
    averaged over the batch. ``grad_theta`` is reported with respect to
    theta = log(tau) for symmetry with whnm_loss.
    """
    if not (tau > 0.0):
        raise TemperatureNonPositiveError(f"tau must be > 0, got {tau}")
    out = _directional_loss(
        batch.queries, batch.targets, batch.positive_index, tau,
        alpha=0.0, delta=None, differentiate_weights=True,
    )
    return LossOutput(*out)


def whnm_loss(batch: ContrastiveBatch, config: LossConfig) -> LossOutput:
    """Hardness-weighted, false-negative-masked contrastive loss.

    Negatives with sim(target_j, positive_of_i) > delta are excluded from
    query i's denominator (mask first); surviving negatives are weighted by
    exp(alpha * sim(query_i, target_j)). Gradients are returned for the
    query and target embeddings and for the task's theta. With
    ``config.symmetric`` the reverse (target-anchored) direction is
    averaged in.
    """
    config.validate()
    if batch.task_id not in config.theta_per_task:
        raise MissingTaskThetaError(
            f"no theta registered for task {batch.task_id!r}"
        )
    tau = task_temperature(config.theta_per_task[batch.task_id])
    if not (tau > 0.0):
        raise TemperatureNonPositiveError(
            f"theta {config.theta_per_task[batch.task_id]} underflowed to tau = {tau}"
        )

    loss, g_q, g_t, g_theta, mask, weights, grad_logits = _directional_loss(
        batch.queries, batch.targets, batch.positive_index, tau,
        config.alpha, config.delta, config.differentiate_weights,
    )

    if config.symmetric:
        inverse = np.argsort(batch.positive_index)
        r_loss, r_g_t, r_g_q, r_g_theta, _, _, _ = _directional_loss(
            batch.targets, batch.queries, inverse, tau,
            config.alpha, config.delta, config.differentiate_weights,
        )
        loss = 0.5 * (loss + r_loss)
        g_q = 0.5 * (g_q + r_g_q)
        g_t = 0.5 * (g_t + r_g_t)
        g_theta = 0.5 * (g_theta + r_g_theta)

    return LossOutput(loss, g_q, g_t, g_theta, mask, weights, grad_logits)
