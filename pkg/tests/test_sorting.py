"""Permutation properties, fusion, aggregation identities, entropy probe."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sortscan import autodiff as ad
from sortscan import sorting, ssm
from sortscan.autodiff import Tensor
from sortscan.prompt import ClassActivation, TokenGrid
from sortscan.verify import check_gradients


class TestSortByClass:
    def test_hand_case(self):
        probs = np.array([[0.9], [0.1], [0.5]])
        perm = sorting.sort_by_class(probs, 1)
        np.testing.assert_array_equal(perm.forward, [0, 2, 1])

    def test_ties_keep_original_order(self):
        probs = np.full((5, 2), 0.3)
        perm = sorting.sort_by_class(probs, 2)
        np.testing.assert_array_equal(perm.forward, np.arange(5))

    def test_out_of_range_class(self):
        with pytest.raises(ValueError):
            sorting.sort_by_class(np.zeros((3, 2)), 3)
        with pytest.raises(ValueError):
            sorting.sort_by_class(np.zeros((3, 2)), 0)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 10_000))
    def test_bijection_and_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 50))
        nc = int(rng.integers(1, 5))
        probs = rng.random((n, nc))
        ci = int(rng.integers(1, nc + 1))
        perm = sorting.sort_by_class(probs, ci)
        np.testing.assert_array_equal(np.sort(perm.forward), np.arange(n))
        np.testing.assert_array_equal(perm.inverse[perm.forward], np.arange(n))
        keys = probs[perm.forward, ci - 1]
        assert np.all(np.diff(keys) <= 0)
        seq = rng.standard_normal((n, 4))
        np.testing.assert_array_equal(seq[perm.forward][perm.inverse], seq)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.1, 100.0))
    def test_argsort_invariant_under_positive_scaling(self, seed, factor):
        rng = np.random.default_rng(seed)
        probs = rng.random((20, 3))
        base = sorting.sort_by_class(probs, 2)
        scaled = sorting.sort_by_class(probs * factor, 2)
        np.testing.assert_array_equal(base.forward, scaled.forward)


class TestPermutationTensorOps:
    def test_apply_then_restore_is_identity(self, rng):
        perm = sorting.Permutation.from_forward(rng.permutation(12))
        x = Tensor(rng.standard_normal((12, 3)), requires_grad=True, dtype=np.float64)
        out = perm.restore(perm.apply(x))
        np.testing.assert_array_equal(out.data, x.data)

    def test_gradient_flows_through_permutation(self, rng):
        perm = sorting.Permutation.from_forward(rng.permutation(8))
        x = Tensor(rng.standard_normal((8, 2)), requires_grad=True, dtype=np.float64)
        probe = Tensor(rng.standard_normal((8, 2)), dtype=np.float64)
        err = check_gradients(lambda: (perm.apply(x) * probe).sum(), [x])
        assert err < 1e-5


class TestPhenotypeFusion:
    def _fusion(self, rng, dim=3):
        ca = ClassActivation(dim, rng, dtype=np.float64)
        return sorting.PhenotypeFusion(dim, ca, rng, dtype=np.float64)

    def test_weight_zero_returns_raw_tokens(self, rng):
        fuse = self._fusion(rng)
        grid = TokenGrid(Tensor(rng.standard_normal((4, 4, 3)), dtype=np.float64), scale=4)
        out = fuse(grid, 0.0)
        np.testing.assert_allclose(out.data.data, grid.data.data, rtol=1e-12)

    def test_weight_one_returns_projection_only(self, rng):
        fuse = self._fusion(rng)
        grid = TokenGrid(Tensor(rng.standard_normal((4, 4, 3)), dtype=np.float64), scale=4)
        out_full = fuse(grid, 1.0).data.data
        # hand composition: conv3x3(CA(x)) only
        from sortscan import nn
        from sortscan.prompt import from_nchw, to_nchw

        x_s = from_nchw(nn.conv2d(to_nchw(fuse.ca(grid)), fuse.w, fuse.b), 4)
        np.testing.assert_allclose(out_full, x_s.data.data, rtol=1e-12)

    def test_default_weight_is_convex_combination(self, rng):
        fuse = self._fusion(rng)
        grid = TokenGrid(Tensor(rng.standard_normal((4, 4, 3)), dtype=np.float64), scale=4)
        lam = 0.2  # default fusion weight
        out = fuse(grid, lam).data.data
        hi = fuse(grid, 1.0).data.data
        lo = fuse(grid, 0.0).data.data
        np.testing.assert_allclose(out, lam * hi + (1 - lam) * lo, rtol=1e-10)

    def test_out_of_range_weight_rejected(self, rng):
        fuse = self._fusion(rng)
        grid = TokenGrid(Tensor(np.zeros((4, 4, 3)), dtype=np.float64), scale=4)
        with pytest.raises(ValueError):
            fuse(grid, 1.5)


class TestBaselineOrder:
    def test_bidirectional_n3(self):
        perms = sorting.baseline_order("bidirectional", 1, 3)
        assert len(perms) == 2
        np.testing.assert_array_equal(perms[0].forward, [0, 1, 2])
        np.testing.assert_array_equal(perms[1].forward, [2, 1, 0])

    def test_cross_scan_2x2_all_bijections(self):
        perms = sorting.baseline_order("cross_scan", 2, 2)
        assert len(perms) == 4
        for p in perms:
            np.testing.assert_array_equal(np.sort(p.forward), np.arange(4))

    def test_cross_scan_column_major_2x3(self):
        perms = sorting.baseline_order("cross_scan", 2, 3)
        np.testing.assert_array_equal(perms[2].forward, [0, 3, 1, 4, 2, 5])

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            sorting.baseline_order("zigzag", 2, 2)


class TestAggregateScan:
    def test_single_class_uniform_probs_equals_raster_scan(self, rng):
        params = ssm.init_ssm_params(3, 2, rng, dtype=np.float64)
        x = Tensor(rng.standard_normal((16, 3)), dtype=np.float64)
        probs = np.full((16, 1), 0.25)
        agg = sorting.aggregate_scan(x, probs, [params]).data
        plain = ssm.scan_sequential(x, params).data
        np.testing.assert_array_equal(agg, plain)  # bit-for-bit

    def test_identity_scan_gives_nc_times_input(self, rng):
        x = Tensor(rng.standard_normal((10, 4)), dtype=np.float64)
        probs = rng.random((10, 3))
        agg = sorting.aggregate_scan(x, probs, [None], scan_fn=lambda seq, p: seq).data
        np.testing.assert_array_equal(agg, 3 * x.data)

    def test_hand_unrolled_two_class_case(self, rng):
        params = [ssm.init_ssm_params(2, 2, rng, dtype=np.float64) for _ in range(2)]
        x = rng.standard_normal((4, 2))
        probs = np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4], [0.3, 0.7]])
        agg = sorting.aggregate_scan(Tensor(x, dtype=np.float64), probs, params).data
        # hand: class 1 order [0,2,3,1]; class 2 order [1,3,2,0]
        expected = np.zeros_like(x)
        for ci, order in ((0, [0, 2, 3, 1]), (1, [1, 3, 2, 0])):
            order = np.array(order)
            inv = np.empty_like(order)
            inv[order] = np.arange(4)
            y = ssm.scan_sequential(Tensor(x[order], dtype=np.float64), params[ci]).data
            expected += y[inv]
        np.testing.assert_allclose(agg, expected, rtol=1e-12)

    def test_token_count_mismatch_rejected(self, rng):
        params = ssm.init_ssm_params(2, 2, rng, dtype=np.float64)
        with pytest.raises(ValueError):
            sorting.aggregate_scan(Tensor(np.zeros((4, 2)), dtype=np.float64),
                                   np.zeros((5, 1)), [params])

    def test_gradient_flows_to_tokens(self, rng):
        params = [ssm.init_ssm_params(2, 2, rng, dtype=np.float64) for _ in range(2)]
        x = Tensor(rng.standard_normal((6, 2)), requires_grad=True, dtype=np.float64)
        probs = rng.random((6, 2))
        probe = Tensor(rng.standard_normal((6, 2)), dtype=np.float64)
        err = check_gradients(
            lambda: (sorting.aggregate_scan(x, probs, params) * probe).sum(), [x])
        assert err < 1e-5


class TestEntropyProbe:
    def test_one_hot_scores_zero_everywhere(self, rng):
        seq = np.eye(3)[rng.integers(0, 3, 20)]
        report = sorting.entropy_probe([seq], rng)
        for stats in report["orderings"].values():
            assert stats["mean_entropy"] == pytest.approx(0.0, abs=1e-12)

    def test_single_token_reports_marginal_entropy(self, rng):
        row = np.array([[0.5, 0.25, 0.25]])
        expected = -(row * np.log(row)).sum()
        report = sorting.entropy_probe([row], rng)
        for stats in report["orderings"].values():
            assert stats["mean_entropy"] == pytest.approx(expected, rel=1e-12)

    def test_invalid_distributions_rejected(self, rng):
        with pytest.raises(ValueError):
            sorting.prefix_predictive_entropy(np.array([[0.5, 0.2]]), np.array([0]))

    def test_mixture_trials_report_both_orderings(self, rng):
        seqs = sorting.mixture_sequences(5, 30, 3, rng)
        report = sorting.entropy_probe(seqs, rng)
        assert report["trials"] == 5
        assert len(report["orderings"]["sorted"]["per_trial"]) == 5
        assert len(report["orderings"]["random"]["per_trial"]) == 5
        assert "sorted_minus_random" in report
