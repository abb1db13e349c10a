"""Unit tests for the residual histogram, scoring, and surrogate loss."""

from __future__ import annotations

import numpy as np
import pytest

from mbasfm.distribution import (
    binary_score,
    build_histogram,
    cdf_at,
    marginalized_score,
    mba_loss,
    merge_histograms,
    pdf_at,
    robust_loss_baseline,
)
from mbasfm.errors import EmptyResidualSet


class TestBuildHistogram:
    def test_counts_and_total(self):
        hist = build_histogram([0.5, 1.5, 2.5, 25.0], tau_max=20.0, bin_count=100)
        assert hist.total == 4  # the 25.0 counts toward total
        assert hist.counts.sum() == 3  # but lands in no bin
        assert hist.counts[2] == 1  # 0.5 at bin width 0.2 -> bin 2
        np.testing.assert_array_equal(hist.cumulative, np.cumsum(hist.counts))

    def test_infinite_residuals_excluded(self):
        hist = build_histogram([1.0, np.inf, np.nan], tau_max=20.0)
        assert hist.total == 1

    def test_empty_raises(self):
        with pytest.raises(EmptyResidualSet):
            build_histogram([np.inf], tau_max=20.0)

    def test_bad_args(self):
        with pytest.raises(ValueError):
            build_histogram([1.0], tau_max=0.0)
        with pytest.raises(ValueError):
            build_histogram([1.0], tau_max=1.0, bin_count=1)

    def test_boundary_value_at_tau_max_not_binned(self):
        hist = build_histogram([20.0], tau_max=20.0)
        assert hist.counts.sum() == 0
        assert hist.total == 1


class TestCdfPdf:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.hist = build_histogram(rng.uniform(0, 25, 5000), tau_max=20.0)

    def test_cdf_monotone_and_bounded(self):
        r = np.linspace(0, 30, 2000)
        f = cdf_at(self.hist, r)
        assert np.all(np.diff(f) >= 0)
        assert cdf_at(self.hist, 0.0) == 0.0
        assert f[-1] <= 1.0

    def test_pdf_is_bin_interior_derivative(self):
        # inside a bin the CDF is linear, so a finite difference is exact
        width = self.hist.bin_width
        r = np.arange(100) * width + 0.5 * width
        h = 0.05 * width
        fd = (cdf_at(self.hist, r + h) - cdf_at(self.hist, r - h)) / (2 * h)
        np.testing.assert_allclose(fd, pdf_at(self.hist, r), rtol=1e-12)

    def test_pdf_zero_beyond_tau_max(self):
        assert pdf_at(self.hist, 20.0) == 0.0
        assert pdf_at(self.hist, 100.0) == 0.0


class TestMerge:
    def test_parallel_merge_equals_serial(self):
        rng = np.random.default_rng(1)
        chunks = [rng.uniform(0, 30, n) for n in (10, 500, 3)]
        serial = build_histogram(np.concatenate(chunks), 20.0)
        merged = merge_histograms([build_histogram(c, 20.0) for c in chunks])
        np.testing.assert_array_equal(serial.counts, merged.counts)
        np.testing.assert_array_equal(serial.cumulative, merged.cumulative)
        assert serial.total == merged.total

    def test_layout_mismatch_rejected(self):
        a = build_histogram([1.0], 20.0, 100)
        b = build_histogram([1.0], 10.0, 100)
        with pytest.raises(ValueError):
            merge_histograms([a, b])

    def test_empty_merge_raises(self):
        with pytest.raises(EmptyResidualSet):
            merge_histograms([])


class TestScoring:
    def test_binary_score_strict(self):
        assert binary_score([0.0, 1.0, 2.0], 2.0) == 2

    def test_marginalized_equals_brute_force(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            res = rng.uniform(0, 2.0, rng.integers(1, 400))
            tau_max, thresholds = 1.0, 100
            taus = np.arange(thresholds + 1) * (tau_max / thresholds)
            brute = sum(int(np.count_nonzero(res < t)) for t in taus)
            assert marginalized_score(res, tau_max, thresholds) == brute

    def test_single_threshold_reduces_to_inlier_count(self):
        res = [0.1, 0.4, 0.9, 1.5]
        # grid {0, tau}: the zero threshold contributes nothing
        assert marginalized_score(res, 1.0, thresholds=1) == binary_score(res, 1.0)

    def test_empty_and_bad_args(self):
        assert marginalized_score([], 1.0) == 0
        with pytest.raises(ValueError):
            marginalized_score([1.0], 1.0, thresholds=0)


class TestMbaLoss:
    def setup_method(self):
        rng = np.random.default_rng(3)
        self.hist = build_histogram(rng.uniform(0, 25, 4000), tau_max=20.0)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        width = self.hist.bin_width
        # interior points: away from bin boundaries so the FD never crosses one
        r = (rng.integers(0, 100, 200) + rng.uniform(0.2, 0.8, 200)) * width
        _, grad = mba_loss(r, self.hist)
        h = 0.01 * width
        for k in range(len(r)):
            up, dn = r.copy(), r.copy()
            up[k] += h
            dn[k] -= h
            fd = (mba_loss(up, self.hist)[0] - mba_loss(dn, self.hist)[0]) / (2 * h)
            np.testing.assert_allclose(grad[k], fd, rtol=1e-9, atol=1e-15)

    def test_residuals_beyond_tau_max_contribute_nothing(self):
        loss_a, grad_a = mba_loss([1.0], self.hist)
        loss_b, grad_b = mba_loss([1.0, 30.0, np.inf], self.hist)
        assert loss_a == loss_b
        assert grad_b[1] == 0.0 and grad_b[2] == 0.0

    def test_loss_is_negated_mean_cdf_mass(self):
        r = np.array([1.0, 5.0])
        loss, _ = mba_loss(r, self.hist)
        expected = -np.sum(cdf_at(self.hist, r)) / self.hist.total
        np.testing.assert_allclose(loss, expected, rtol=1e-12)


class TestRobustBaselines:
    @pytest.mark.parametrize("kind", ["l2", "soft_l1", "cauchy", "tukey"])
    def test_gradient_matches_finite_differences(self, kind):
        rng = np.random.default_rng(5)
        r = rng.uniform(-12, 12, 200)
        if kind == "tukey":  # keep away from the non-smooth cutoff |r| = s
            r = r[np.abs(np.abs(r) - 5.0) > 0.05]
        _, grad = robust_loss_baseline(r, kind, scale=5.0)
        h = 1e-6
        fd = (robust_loss_baseline(r + h, kind, 5.0)[0]
              - robust_loss_baseline(r - h, kind, 5.0)[0]) / (2 * h)
        np.testing.assert_allclose(grad, fd, rtol=1e-6, atol=1e-8)

    def test_bad_args(self):
        with pytest.raises(ValueError):
            robust_loss_baseline(1.0, "l2", scale=0.0)
        with pytest.raises(ValueError):
            robust_loss_baseline(1.0, "huberish", scale=1.0)
