"""Finite-difference verification of the hand-written gradients.

The losses are piecewise smooth: the false-negative mask is a discrete
switch on target-target similarities, so configurations whose similarities
sit within a guard band of the threshold are redrawn before differencing
(the analytic gradient is only defined away from the switch).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import encode_backward, encode_batch, init_encoder_params
from .losses import ContrastiveBatch, LossConfig, whnm_loss
from .matrixops import normalize_rows

DELTA_GUARD_BAND = 1e-3


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function, coordinate by coordinate."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(x)
        flat[i] = orig - h
        down = f(x)
        flat[i] = orig
        out[i] = (up - down) / (2 * h)
    return g


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8,
                atol: float = 1e-9) -> float:
    """Largest |a - n| / max(|a|, |n|, floor) over all coordinates.

    Differences below ``atol`` count as zero: they sit under the resolution
    of central differencing itself (roundoff ~ eps * |f| / h), so a
    coordinate whose true gradient is ~1e-11 cannot be distinguished from
    zero and must not fail the check.
    """
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    diff = np.abs(a - n)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    rel = np.where(diff <= atol, 0.0, diff / scale)
    return float(np.max(rel))


def random_batch(rng: np.random.Generator, n: int, d: int,
                 delta: float | None = None, task_id: str = "t") -> ContrastiveBatch:
    """Random normalized batch; with a threshold, redrawn until no
    target-target similarity falls inside the guard band around it."""
    off_diag = ~np.eye(n, dtype=bool)
    for _ in range(200):
        q = normalize_rows(rng.normal(size=(n, d)))
        t = normalize_rows(rng.normal(size=(n, d)))
        if delta is not None:
            # Both matrices: symmetric mode masks on query-query sims too.
            near_t = np.abs((t @ t.T)[off_diag] - delta) < DELTA_GUARD_BAND
            near_q = np.abs((q @ q.T)[off_diag] - delta) < DELTA_GUARD_BAND
            if near_t.any() or near_q.any():
                continue
        perm = rng.permutation(n)
        return ContrastiveBatch(queries=q, targets=t, positive_index=perm, task_id=task_id)
    raise RuntimeError("could not draw a batch clear of the mask threshold")


@dataclass
class GradCheckReport:
    trials: int
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def check_loss_gradients(trials: int = 100, seed: int = 0, h: float = 1e-5,
                         tolerance: float = 1e-4) -> GradCheckReport:
    """Compare analytic whnm_loss gradients with central differences."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    alphas = (0.0, 1.0, 9.0)
    deltas = (None, 0.95)
    for trial in range(trials):
        n = int(rng.integers(2, 9))
        d = int(rng.integers(2, 17))
        alpha = alphas[trial % len(alphas)]
        delta = deltas[(trial // len(alphas)) % len(deltas)]
        theta = float(rng.uniform(-3.0, 0.0))
        # Stop-gradient weights intentionally diverge from the true
        # derivative, so differencing only makes sense with full
        # differentiation through the weights.
        symmetric = trial % 5 == 0
        batch = random_batch(rng, n, d, delta=delta)
        config = LossConfig(
            alpha=alpha, delta=delta, theta_per_task={"t": theta},
            differentiate_weights=True, symmetric=symmetric,
        )
        out = whnm_loss(batch, config)

        def loss_at(q=None, t=None, th=theta):
            b = ContrastiveBatch(
                queries=batch.queries if q is None else q,
                targets=batch.targets if t is None else t,
                positive_index=batch.positive_index,
                task_id="t",
            )
            cfg = LossConfig(alpha=alpha, delta=delta, theta_per_task={"t": th},
                             differentiate_weights=True, symmetric=symmetric)
            return whnm_loss(b, cfg).loss

        num_q = central_diff(lambda q: loss_at(q=q), batch.queries.copy(), h)
        num_t = central_diff(lambda t: loss_at(t=t), batch.targets.copy(), h)
        num_th = (loss_at(th=theta + h) - loss_at(th=theta - h)) / (2 * h)

        worst = max(
            worst,
            max_rel_err(out.grad_queries, num_q),
            max_rel_err(out.grad_targets, num_t),
            max_rel_err(np.array([out.grad_theta]), np.array([num_th])),
        )
    return GradCheckReport(trials=trials, max_rel_err=worst, tolerance=tolerance)


def check_encoder_gradients(trials: int = 50, seed: int = 0, h: float = 1e-6,
                            tolerance: float = 1e-4) -> GradCheckReport:
    """Compare analytic encoder parameter gradients with central differences.

    The scalar probe is a fixed random linear functional of the normalized
    outputs, which exercises the normalization chain without coupling to
    the loss module.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        d_in = int(rng.integers(2, 17))
        d_out = int(rng.integers(2, 13))
        rank = int(rng.integers(1, min(d_in, d_out) + 1))
        n = int(rng.integers(1, 5))
        params = init_encoder_params(d_in, d_out, rank, scaling=2.0, rng=rng)
        # Nonzero B so adapter gradients are exercised away from the zero init.
        params.adapter.B[...] = rng.normal(0.0, 0.1, size=params.adapter.B.shape)
        x = rng.normal(size=(n, d_in))
        probe = rng.normal(size=(n, d_out))
        train_base = bool(rng.integers(2))

        out, cache = encode_batch(x, params)
        grads = encode_backward(cache, params, probe, train_base=train_base)

        def scalar(p):
            u, _ = encode_batch(x, p)
            return float(np.sum(probe * u))

        checks = []
        if train_base:
            checks += [(grads.W, params.W), (grads.b, params.b)]
        checks += [(grads.A, params.adapter.A), (grads.B, params.adapter.B)]
        for analytic, arr in checks:
            # central_diff perturbs arr in place; scalar sees it through params.
            numeric = central_diff(lambda _: scalar(params), arr, h)
            worst = max(worst, max_rel_err(analytic, numeric))
    return GradCheckReport(trials=trials, max_rel_err=worst, tolerance=tolerance)
