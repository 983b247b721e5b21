"""Loss module: closed-form values, masking semantics, gradient checks.

The brute-force oracle below re-implements the per-query objective with
plain Python loops and direct exponentials (no log-domain tricks, no
vectorization), and is used to cross-check the production path.
"""

import math

import numpy as np
import pytest

from embedkit.errors import MissingTaskThetaError, TemperatureNonPositiveError
from embedkit.gradcheck import central_diff, check_loss_gradients, max_rel_err, random_batch
from embedkit.losses import (
    ContrastiveBatch,
    LossConfig,
    false_negative_mask,
    hardness_weights,
    infonce_loss,
    task_temperature,
    whnm_loss,
)
from embedkit.matrixops import normalize_rows


def brute_force_loss(queries, targets, pos, tau, alpha, delta):
    """Independent evaluation: explicit sums of w * exp(s / tau) per query."""
    n = len(queries)
    total = 0.0
    for i in range(n):
        p = pos[i]
        s_pos = float(np.dot(queries[i], targets[p]))
        denom = math.exp(s_pos / tau)
        for j in range(n):
            if j == p:
                continue
            if delta is not None and float(np.dot(targets[j], targets[p])) > delta:
                continue  # excluded from this query's denominator
            s = float(np.dot(queries[i], targets[j]))
            denom += math.exp(alpha * s) * math.exp(s / tau)
        total += -math.log(math.exp(s_pos / tau) / denom)
    return total / n


def unit(angle):
    return np.array([math.cos(angle), math.sin(angle)])


class TestTaskTemperature:
    def test_zero_theta_is_unit_tau(self):
        assert task_temperature(0.0) == 1.0

    def test_log_roundtrip(self):
        assert task_temperature(math.log(0.05)) == pytest.approx(0.05, rel=1e-15)

    def test_large_negative_theta_stays_positive(self):
        assert task_temperature(-700.0) > 0.0

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            task_temperature(float("inf"))


class TestFalseNegativeMask:
    def test_threshold_row(self):
        """Sims to the positive of 0.99 and 0.30 against delta 0.95."""
        t0 = unit(0.0)
        t1 = unit(math.acos(0.99))
        t2 = unit(math.acos(0.30))
        targets = np.stack([t0, t1, t2])
        mask = false_negative_mask(targets, np.arange(3), delta=0.95)
        assert not mask[0, 0]
        assert mask[0, 1]
        assert not mask[0, 2]

    def test_exact_duplicate_is_masked(self):
        t0 = unit(0.3)
        targets = np.stack([t0, unit(2.0), t0.copy()])
        mask = false_negative_mask(targets, np.arange(3), delta=0.95)
        assert mask[0, 2]
        assert mask[2, 0]

    def test_positive_diagonal_never_masked(self):
        rng = np.random.default_rng(0)
        targets = normalize_rows(rng.normal(size=(6, 3)))
        pos = rng.permutation(6)
        mask = false_negative_mask(targets, pos, delta=0.0)
        assert not mask[np.arange(6), pos].any()

    def test_respects_positive_index(self):
        # Query 0's positive is target 1; target 0 duplicates target 1,
        # so target 0 is a false negative for query 0 (and vice versa).
        t = unit(0.5)
        targets = np.stack([t.copy(), t, unit(2.5)])
        pos = np.array([1, 0, 2])
        mask = false_negative_mask(targets, pos, delta=0.95)
        assert mask[0, 0] and mask[1, 1]
        assert not mask[0, 1] and not mask[1, 0]  # positives stay in
        assert not mask[0, 2] and not mask[2, 0]

    def test_disabled_equivalent_all_false(self):
        rng = np.random.default_rng(1)
        targets = normalize_rows(rng.normal(size=(4, 5)))
        mask = false_negative_mask(targets, np.arange(4), delta=1.0)
        # delta = 1.0 keeps everything: sims cannot exceed 1
        assert not mask.any()


class TestHardnessWeights:
    def test_closed_form_at_alpha_nine(self):
        """w = exp(9 * 0.5) = 90.01713130052181, from the closed form."""
        s = np.array([[1.0, 0.5], [0.5, 1.0]])
        w = hardness_weights(s, alpha=9.0)
        assert w[0, 1] == pytest.approx(90.0171, abs=1e-3)
        assert w[0, 1] == pytest.approx(math.exp(4.5), rel=1e-15)

    def test_zero_alpha_gives_unit_weights(self):
        rng = np.random.default_rng(2)
        s = normalize_rows(rng.normal(size=(5, 3))) @ normalize_rows(rng.normal(size=(5, 3))).T
        w = hardness_weights(s, alpha=0.0)
        np.testing.assert_array_equal(w, np.ones((5, 5)))

    def test_monotone_in_similarity(self):
        s = np.array([[1.0, 0.2, 0.4, 0.6]] * 4)[:4, :4]
        s = np.array([
            [1.0, 0.2, 0.4, 0.6],
            [0.2, 1.0, 0.1, 0.3],
            [0.4, 0.1, 1.0, 0.5],
            [0.6, 0.3, 0.5, 1.0],
        ])
        w = hardness_weights(s, alpha=3.0)
        row = w[0]
        assert row[1] < row[2] < row[3]

    def test_positive_diagonal_is_one_and_masked_zero(self):
        s = np.full((3, 3), 0.5)
        mask = np.zeros((3, 3), dtype=bool)
        mask[0, 1] = True
        w = hardness_weights(s, alpha=9.0, mask=mask)
        np.testing.assert_array_equal(np.diag(w), 1.0)
        assert w[0, 1] == 0.0


class TestInfoNCE:
    def test_two_pair_closed_form(self):
        """s+ = 1, one negative at s = 0, tau = 1: loss = log(1 + e^-1)."""
        q = np.eye(2)
        t = np.eye(2)
        out = infonce_loss(ContrastiveBatch(queries=q, targets=t), tau=1.0)
        assert out.loss == pytest.approx(0.3132616875182228, abs=1e-12)

    def test_sharp_softmax_limit(self):
        """tau -> 0+ with the positive strictly hardest drives the loss to 0."""
        q = np.eye(2)
        t = np.eye(2)
        out = infonce_loss(ContrastiveBatch(queries=q, targets=t), tau=1e-3)
        assert out.loss < 1e-12

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(8)
        batch = random_batch(rng, 6, 8)
        out = infonce_loss(batch, tau=0.7)

        def loss_at(q=None, t=None, tau=0.7):
            b = ContrastiveBatch(
                queries=batch.queries if q is None else q,
                targets=batch.targets if t is None else t,
                positive_index=batch.positive_index,
            )
            return infonce_loss(b, tau).loss

        nq = central_diff(lambda q: loss_at(q=q), batch.queries.copy())
        nt = central_diff(lambda t: loss_at(t=t), batch.targets.copy())
        theta = math.log(0.7)
        h = 1e-5
        nth = (loss_at(tau=math.exp(theta + h)) - loss_at(tau=math.exp(theta - h))) / (2 * h)
        assert max_rel_err(out.grad_queries, nq) < 1e-6
        assert max_rel_err(out.grad_targets, nt) < 1e-6
        assert out.grad_theta == pytest.approx(nth, rel=1e-6)

    def test_nonpositive_tau_rejected(self):
        q = np.eye(2)
        with pytest.raises(TemperatureNonPositiveError):
            infonce_loss(ContrastiveBatch(queries=q, targets=q), tau=0.0)

    def test_loss_nonnegative(self):
        rng = np.random.default_rng(12)
        for _ in range(50):
            batch = random_batch(rng, int(rng.integers(2, 7)), 4)
            assert infonce_loss(batch, tau=float(rng.uniform(0.05, 2))).loss >= 0.0


class TestWHNM:
    def test_reduces_to_infonce(self):
        """alpha = 0 and masking off must reproduce the plain loss exactly."""
        rng = np.random.default_rng(21)
        for _ in range(50):
            batch = random_batch(rng, int(rng.integers(2, 8)), int(rng.integers(2, 10)))
            tau = float(rng.uniform(0.05, 2.0))
            cfg = LossConfig(alpha=0.0, delta=None,
                             theta_per_task={batch.task_id: math.log(tau)})
            a = whnm_loss(batch, cfg)
            b = infonce_loss(batch, tau)
            assert a.loss == pytest.approx(b.loss, abs=1e-12)
            np.testing.assert_allclose(a.grad_queries, b.grad_queries, atol=1e-12)
            np.testing.assert_allclose(a.grad_targets, b.grad_targets, atol=1e-12)
            assert a.grad_theta == pytest.approx(b.grad_theta, abs=1e-12)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(22)
        for _ in range(30):
            n = int(rng.integers(2, 7))
            batch = random_batch(rng, n, 5, delta=0.95)
            cfg = LossConfig(alpha=9.0, delta=0.95,
                             theta_per_task={batch.task_id: math.log(0.05)})
            out = whnm_loss(batch, cfg)
            expected = brute_force_loss(
                batch.queries, batch.targets, batch.positive_index, 0.05, 9.0, 0.95
            )
            assert out.loss == pytest.approx(expected, rel=1e-10)

    def test_duplicate_target_excluded_from_denominator(self):
        """A planted exact duplicate contributes nothing: the loss equals the
        brute-force value computed with it dropped from the denominator, and
        its logit gradient is exactly zero."""
        rng = np.random.default_rng(23)
        q = normalize_rows(rng.normal(size=(4, 6)))
        t = normalize_rows(rng.normal(size=(4, 6)))
        t[3] = t[0]  # exact duplicate of query 0's positive
        batch = ContrastiveBatch(queries=q, targets=t, task_id="x")
        cfg = LossConfig(alpha=9.0, delta=0.95, theta_per_task={"x": math.log(0.05)})
        out = whnm_loss(batch, cfg)
        assert out.mask[0, 3] and out.mask[3, 0]
        expected = brute_force_loss(q, t, np.arange(4), 0.05, 9.0, 0.95)
        assert out.loss == pytest.approx(expected, abs=1e-12)
        assert out.grad_logits[0, 3] == 0.0
        assert out.grad_logits[3, 0] == 0.0
        assert out.weights[0, 3] == 0.0

    def test_masked_entries_have_exactly_zero_gradient(self):
        rng = np.random.default_rng(24)
        hit = 0
        for _ in range(50):
            n = int(rng.integers(3, 8))
            batch = random_batch(rng, n, 3, delta=None)
            cfg = LossConfig(alpha=2.0, delta=0.6,
                             theta_per_task={batch.task_id: -1.0})
            out = whnm_loss(batch, cfg)
            if out.mask.any():
                hit += 1
                assert (out.grad_logits[out.mask] == 0.0).all()
                assert (out.weights[out.mask] == 0.0).all()
        assert hit > 5  # low-dim batches must actually exercise masking

    def test_missing_theta_rejected(self):
        batch = ContrastiveBatch(queries=np.eye(2), targets=np.eye(2), task_id="unknown")
        with pytest.raises(MissingTaskThetaError):
            whnm_loss(batch, LossConfig(theta_per_task={"other": 0.0}))

    def test_gradient_check_hundred_configs(self):
        report = check_loss_gradients(trials=100, seed=123)
        assert report.max_rel_err < 1e-4

    def test_permutation_invariance(self):
        """Relabeling pairs consistently leaves the loss unchanged."""
        rng = np.random.default_rng(25)
        for _ in range(20):
            n = 5
            batch = random_batch(rng, n, 4, delta=0.9)
            cfg = LossConfig(alpha=9.0, delta=0.9,
                             theta_per_task={batch.task_id: -2.0})
            base = whnm_loss(batch, cfg).loss
            perm_q = rng.permutation(n)
            perm_t = rng.permutation(n)
            # positive of relocated query i' = new row of its old positive
            inv_t = np.argsort(perm_t)
            new_pos = np.array([inv_t[batch.positive_index[i]] for i in perm_q])
            shuffled = ContrastiveBatch(
                queries=batch.queries[perm_q],
                targets=batch.targets[perm_t],
                positive_index=new_pos,
                task_id=batch.task_id,
            )
            assert whnm_loss(shuffled, cfg).loss == pytest.approx(base, abs=1e-12)

    def test_monotone_in_negative_similarity(self):
        """Raising one unmasked negative similarity, all others fixed, never
        lowers the loss. Block-structured embeddings isolate a single entry:
        only sim(q0, t1) varies with s below."""
        losses = []
        for s in np.linspace(0.0, 0.9, 10):
            q = np.array([
                [1.0, 0.0, 0.0, 0.0],
                [0.0, 1.0, 0.0, 0.0],
            ])
            t = np.array([
                [0.0, 0.0, 1.0, 0.0],
                [s, 0.0, 0.0, math.sqrt(1 - s * s)],
            ])
            batch = ContrastiveBatch(queries=q, targets=t, task_id="m")
            cfg = LossConfig(alpha=9.0, delta=0.95, theta_per_task={"m": -1.5})
            losses.append(whnm_loss(batch, cfg).loss)
        assert all(b >= a - 1e-12 for a, b in zip(losses, losses[1:]))

    def test_negative_logit_gradients_nonnegative(self):
        """Derivative form of hardness monotonicity: d(loss)/d(sim) >= 0 at
        every unmasked negative entry."""
        rng = np.random.default_rng(26)
        for _ in range(30):
            batch = random_batch(rng, 4, 6, delta=0.95)
            cfg = LossConfig(alpha=9.0, delta=0.95,
                             theta_per_task={batch.task_id: -1.5})
            out = whnm_loss(batch, cfg)
            neg = ~out.mask
            neg[np.arange(4), batch.positive_index] = False
            assert (out.grad_logits[neg] >= 0.0).all()

    def test_weight_ordering_matches_similarity_ordering(self):
        rng = np.random.default_rng(27)
        for _ in range(30):
            batch = random_batch(rng, 5, 7, delta=0.95)
            cfg = LossConfig(alpha=9.0, delta=0.95,
                             theta_per_task={batch.task_id: -2.0})
            out = whnm_loss(batch, cfg)
            sims = batch.queries @ batch.targets.T
            for i in range(5):
                pairs = [
                    (sims[i, j], out.weights[i, j])
                    for j in range(5)
                    if j != batch.positive_index[i] and not out.mask[i, j]
                ]
                pairs.sort()
                weights_in_sim_order = [w for _, w in pairs]
                assert weights_in_sim_order == sorted(weights_in_sim_order)

    def test_stop_gradient_weights(self):
        """With differentiate_weights=False the negative logit gradients lose
        the alpha term: they equal softmax / tau instead of softmax * (alpha + 1/tau)."""
        rng = np.random.default_rng(28)
        batch = random_batch(rng, 4, 5)
        tau = 0.2
        full = whnm_loss(batch, LossConfig(
            alpha=9.0, delta=None, theta_per_task={batch.task_id: math.log(tau)}))
        stopped = whnm_loss(batch, LossConfig(
            alpha=9.0, delta=None, theta_per_task={batch.task_id: math.log(tau)},
            differentiate_weights=False))
        assert stopped.loss == full.loss
        pos = batch.positive_index
        neg = np.ones((4, 4), dtype=bool)
        neg[np.arange(4), pos] = False
        ratio = full.grad_logits[neg] / stopped.grad_logits[neg]
        np.testing.assert_allclose(ratio, (9.0 + 1 / tau) * tau, rtol=1e-12)
        # positive entries identical in both modes
        np.testing.assert_allclose(
            full.grad_logits[np.arange(4), pos],
            stopped.grad_logits[np.arange(4), pos], rtol=1e-15,
        )

    def test_symmetric_mode_averages_directions(self):
        rng = np.random.default_rng(29)
        batch = random_batch(rng, 5, 6)
        theta = -1.0
        cfg = LossConfig(alpha=0.0, delta=None, theta_per_task={batch.task_id: theta},
                         symmetric=True)
        out = whnm_loss(batch, cfg)
        fwd = whnm_loss(batch, LossConfig(
            alpha=0.0, delta=None, theta_per_task={batch.task_id: theta}))
        rev_batch = ContrastiveBatch(
            queries=batch.targets, targets=batch.queries,
            positive_index=np.argsort(batch.positive_index), task_id=batch.task_id,
        )
        rev = whnm_loss(rev_batch, LossConfig(
            alpha=0.0, delta=None, theta_per_task={batch.task_id: theta}))
        assert out.loss == pytest.approx(0.5 * (fwd.loss + rev.loss), abs=1e-12)
