"""Adapter souping algebra and base-merge functional equivalence."""

import numpy as np
import pytest

from embedkit.encoder import EncoderParams, LoraAdapter, encode_batch, init_encoder_params
from embedkit.errors import ShapeMismatchError, WeightsInvalidError
from embedkit.souping import SoupSpec, merge_into_base, soup_adapters, uniform_weights


def random_adapter(rng, d_in=6, d_out=4, rank=2, scaling=2.0):
    return LoraAdapter(
        A=rng.normal(size=(rank, d_in)),
        B=rng.normal(size=(d_out, rank)),
        scaling=scaling,
    )


def strip_adapter(params):
    return EncoderParams(W=params.W.copy(), b=params.b.copy(), adapter=None)


class TestSoupAdapters:
    def test_single_adapter_identity(self):
        rng = np.random.default_rng(0)
        adapter = random_adapter(rng)
        result = soup_adapters(SoupSpec(adapters=[adapter], weights=[1.0]))
        np.testing.assert_array_equal(result.delta, adapter.delta())

    def test_identical_adapters_fixed_point(self):
        rng = np.random.default_rng(1)
        adapter = random_adapter(rng)
        result = soup_adapters(
            SoupSpec(adapters=[adapter, adapter.copy()], weights=[0.5, 0.5])
        )
        np.testing.assert_allclose(result.delta, adapter.delta(), atol=1e-15)

    def test_weighted_sum_oracle(self):
        """Element-wise oracle:0.3 * delta1 + 0.7 * delta2, computed densely."""
        rng = np.random.default_rng(2)
        a1, a2 = random_adapter(rng), random_adapter(rng)
        result = soup_adapters(SoupSpec(adapters=[a1, a2], weights=[0.3, 0.7]))
        expected = 0.3 * a1.scaling * (a1.B @ a1.A) + 0.7 * a2.scaling * (a2.B @ a2.A)
        np.testing.assert_allclose(result.delta, expected, atol=1e-12)

    def test_linearity(self):
        rng = np.random.default_rng(3)
        adapters = [random_adapter(rng) for _ in range(4)]
        weights = [0.1, 0.2, 0.3, 0.4]
        result = soup_adapters(SoupSpec(adapters=adapters, weights=weights))
        expected = sum(w * a.delta() for w, a in zip(weights, adapters))
        np.testing.assert_allclose(result.delta, expected, atol=1e-12)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(4)
        adapters = [random_adapter(rng) for _ in range(3)]
        weights = [0.2, 0.3, 0.5]
        fwd = soup_adapters(SoupSpec(adapters=adapters, weights=weights))
        rev = soup_adapters(SoupSpec(adapters=adapters[::-1], weights=weights[::-1]))
        np.testing.assert_allclose(fwd.delta, rev.delta, atol=1e-12)

    def test_factor_svd_recovers_full_rank_delta(self):
        """With svd_rank >= rank(delta) the refactorization is exact."""
        rng = np.random.default_rng(5)
        a1, a2 = random_adapter(rng, rank=2), random_adapter(rng, rank=2)
        spec = SoupSpec(adapters=[a1, a2], weights=[0.5, 0.5],
                        strategy="factor-svd", svd_rank=4)
        result = soup_adapters(spec)
        assert result.adapter is not None
        assert result.adapter.scaling == 1.0
        np.testing.assert_allclose(result.adapter.delta(), result.delta, atol=1e-9)

    def test_factor_svd_is_best_low_rank(self):
        """Truncated SVD beats the raw factor average in Frobenius error."""
        rng = np.random.default_rng(6)
        adapters = [random_adapter(rng, rank=2) for _ in range(3)]
        weights = uniform_weights(3)
        full = soup_adapters(SoupSpec(adapters=adapters, weights=weights)).delta
        svd = soup_adapters(SoupSpec(adapters=adapters, weights=weights,
                                     strategy="factor-svd")).adapter.delta()
        naive_a = sum(w * a.A for w, a in zip(weights, adapters))
        naive_b = sum(w * a.B for w, a in zip(weights, adapters))
        naive = adapters[0].scaling * (naive_b @ naive_a)
        assert np.linalg.norm(full - svd) <= np.linalg.norm(full - naive) + 1e-12

    def test_invalid_weights_rejected(self):
        rng = np.random.default_rng(7)
        adapters = [random_adapter(rng), random_adapter(rng)]
        with pytest.raises(WeightsInvalidError):
            soup_adapters(SoupSpec(adapters=adapters, weights=[0.5, 0.6]))
        with pytest.raises(WeightsInvalidError):
            soup_adapters(SoupSpec(adapters=adapters, weights=[-0.5, 1.5]))
        with pytest.raises(WeightsInvalidError):
            soup_adapters(SoupSpec(adapters=adapters, weights=[1.0]))

    def test_shape_mismatch_rejected(self):
        rng = np.random.default_rng(8)
        with pytest.raises(ShapeMismatchError):
            soup_adapters(SoupSpec(
                adapters=[random_adapter(rng, d_in=6), random_adapter(rng, d_in=7)],
                weights=[0.5, 0.5],
            ))


class TestMergeIntoBase:
    def test_zero_delta_identity(self):
        rng = np.random.default_rng(9)
        params = init_encoder_params(6, 4, rank=2, scaling=2.0, rng=rng)
        merged = merge_into_base(params, np.zeros((4, 6)))
        np.testing.assert_array_equal(merged.W, params.W)
        assert merged.adapter is None

    def test_functional_equivalence(self):
        """encode(base + adapter) == encode(merged) over 100 random inputs."""
        rng = np.random.default_rng(10)
        params = init_encoder_params(6, 4, rank=2, scaling=2.0, rng=rng)
        params.adapter.B[...] = rng.normal(size=params.adapter.B.shape)
        merged = merge_into_base(strip_adapter(params), params.adapter.delta())
        x = rng.normal(size=(100, 6))
        out_adapter, _ = encode_batch(x, params)
        out_merged, _ = encode_batch(x, merged)
        np.testing.assert_allclose(out_merged, out_adapter, atol=1e-12)

    def test_idempotent_zero_re_merge(self):
        rng = np.random.default_rng(11)
        params = init_encoder_params(5, 3, rank=1, scaling=1.0, rng=rng)
        once = merge_into_base(params, rng.normal(size=(3, 5)))
        twice = merge_into_base(once, np.zeros((3, 5)))
        np.testing.assert_array_equal(once.W, twice.W)

    def test_shape_checked(self):
        rng = np.random.default_rng(12)
        params = init_encoder_params(5, 3, rank=0, scaling=1.0, rng=rng)
        with pytest.raises(ShapeMismatchError):
            merge_into_base(params, np.zeros((4, 5)))
