"""Empirical residual distribution and the scoring / surrogate loss functions.

The distribution is a fixed-width histogram over [0, tau_max). The CDF is the
linear interpolation of cumulative bin counts and the PDF is the
piecewise-constant bin density, so the PDF is the exact derivative of the CDF
inside every bin. Residuals at or above tau_max count toward the
normalization but land in no bin; +inf residuals (invalid projections) are
excluded entirely.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyResidualSet


@dataclass(frozen=True)
class ResidualHistogram:
    tau_max: float
    bin_count: int
    counts: np.ndarray  # (bin_count,) int64
    cumulative: np.ndarray  # (bin_count,) int64 prefix sums of counts
    total: int  # all finite residuals, including those >= tau_max

    @property
    def bin_width(self):
        return self.tau_max / self.bin_count


def build_histogram(residuals, tau_max, bin_count=100) -> ResidualHistogram:
    """Bin residuals below tau_max; count every finite residual in `total`.

    Raises:
        EmptyResidualSet: no finite residual in the input.
    """
    if tau_max <= 0:
        raise ValueError(f"tau_max must be positive, got {tau_max}")
    if bin_count < 2:
        raise ValueError(f"bin_count must be >= 2, got {bin_count}")
    residuals = np.asarray(residuals, dtype=np.float64).ravel()
    finite = residuals[np.isfinite(residuals)]
    if finite.size == 0:
        raise EmptyResidualSet("no finite residual to build a histogram from")
    width = tau_max / bin_count
    below = finite[finite < tau_max]
    bins = np.minimum((below / width).astype(np.int64), bin_count - 1)
    counts = np.bincount(bins, minlength=bin_count).astype(np.int64)
    return ResidualHistogram(
        tau_max=float(tau_max),
        bin_count=int(bin_count),
        counts=counts,
        cumulative=np.cumsum(counts),
        total=int(finite.size),
    )


def merge_histograms(parts) -> ResidualHistogram:
    """Exact, order-independent merge of partial histograms (integer addition)."""
    parts = list(parts)
    if not parts:
        raise EmptyResidualSet("nothing to merge")
    first = parts[0]
    for p in parts[1:]:
        if p.tau_max != first.tau_max or p.bin_count != first.bin_count:
            raise ValueError("histogram layouts differ")
    counts = np.sum([p.counts for p in parts], axis=0)
    return ResidualHistogram(
        tau_max=first.tau_max,
        bin_count=first.bin_count,
        counts=counts,
        cumulative=np.cumsum(counts),
        total=int(sum(p.total for p in parts)),
    )


def cdf_at(hist: ResidualHistogram, r):
    """F(r): linearly interpolated cumulative fraction. Vectorized over r."""
    r = np.asarray(r, dtype=np.float64)
    width = hist.bin_width
    idx = np.clip((r / width).astype(np.int64), 0, hist.bin_count - 1)
    below = np.where(idx > 0, hist.cumulative[np.maximum(idx - 1, 0)], 0)
    frac = np.clip(r / width - idx, 0.0, 1.0)
    value = (below + frac * hist.counts[idx]) / hist.total
    value = np.where(r >= hist.tau_max, hist.cumulative[-1] / hist.total, value)
    value = np.where(r <= 0, 0.0, value)
    return value if value.ndim else float(value)


def pdf_at(hist: ResidualHistogram, r):
    """p(r): piecewise-constant bin density; 0 at or above tau_max. Vectorized."""
    r = np.asarray(r, dtype=np.float64)
    width = hist.bin_width
    idx = np.clip((r / width).astype(np.int64), 0, hist.bin_count - 1)
    value = hist.counts[idx] / (hist.total * width)
    value = np.where(r >= hist.tau_max, 0.0, value)
    return value if value.ndim else float(value)


def binary_score(residuals, tau):
    """Count of residuals strictly below tau."""
    residuals = np.asarray(residuals, dtype=np.float64).ravel()
    return int(np.count_nonzero(residuals < tau))


def marginalized_score(residuals, tau_max, thresholds=100):
    """Sum of inlier counts over the threshold grid tau_i = (i/T) * tau_max, i = 0..T.

    Computed exactly on the step CDF: for each threshold, the inlier count is
    the strict-rank of that threshold in the sorted residual list.
    """
    if thresholds < 1:
        raise ValueError(f"thresholds must be >= 1, got {thresholds}")
    residuals = np.sort(np.asarray(residuals, dtype=np.float64).ravel())
    if residuals.size == 0:
        return 0
    taus = np.arange(thresholds + 1) * (tau_max / thresholds)
    return int(np.searchsorted(residuals, taus, side="left").sum())


def mba_loss(residuals, hist: ResidualHistogram):
    """Surrogate loss and its prescribed per-residual gradient.

    loss = -(1/total) * sum_k F(r_k) * 1[r_k < tau_max]
    dL/dr_k = -(1/total) * p(r_k) * 1[r_k < tau_max]

    The histogram is a detached constant: gradients flow only through each
    residual's own slot. Residuals >= tau_max (including +inf) contribute
    exactly zero to both.
    """
    residuals = np.asarray(residuals, dtype=np.float64).ravel()
    active = np.isfinite(residuals) & (residuals < hist.tau_max)
    loss = 0.0
    grad = np.zeros_like(residuals)
    if np.any(active):
        r_act = residuals[active]
        loss = -float(np.sum(cdf_at(hist, r_act))) / hist.total
        grad[active] = -pdf_at(hist, r_act) / hist.total
    return loss, grad


def robust_loss_baseline(residual, kind, scale):
    """Classic robust losses and exact derivatives, for the ablation baselines.

    Vectorized over `residual`. Kinds: l2, soft_l1, cauchy, tukey.
    """
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    r = np.asarray(residual, dtype=np.float64)
    s = float(scale)
    if kind == "l2":
        loss, grad = r**2, 2.0 * r
    elif kind == "soft_l1":
        root = np.sqrt(1.0 + (r / s) ** 2)
        loss = 2.0 * s**2 * (root - 1.0)
        grad = 2.0 * r / root
    elif kind == "cauchy":
        loss = s**2 * np.log1p((r / s) ** 2)
        grad = 2.0 * r / (1.0 + (r / s) ** 2)
    elif kind == "tukey":
        u = np.clip(1.0 - (r / s) ** 2, 0.0, None)
        loss = (s**2 / 6.0) * (1.0 - u**3)
        grad = np.where(np.abs(r) <= s, r * u**2, 0.0)
    else:
        raise ValueError(f"unknown robust loss kind {kind!r}")
    if loss.ndim == 0:
        return float(loss), float(grad)
    return loss, grad
