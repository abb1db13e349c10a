"""Standalone essential-matrix RANSAC scored by the marginalized inlier count."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .distribution import marginalized_score
from .errors import DegenerateConfiguration, NoValidHypothesis
from .fivepoint import estimate_essential_fivepoint

def sampson_residual(e_mat, x_src, x_dst):
    """First-order (Sampson) epipolar error in normalized coordinates.

    Vectorized over (n, 2) point arrays; a zero denominator yields +inf.
    """
    scalar = np.asarray(x_src).ndim == 1
    x_src = np.atleast_2d(np.asarray(x_src, dtype=np.float64))
    x_dst = np.atleast_2d(np.asarray(x_dst, dtype=np.float64))
    n = len(x_src)
    src_h = np.column_stack([x_src, np.ones(n)])
    dst_h = np.column_stack([x_dst, np.ones(n)])
    ex = src_h @ e_mat.T  # rows: E x
    etx = dst_h @ e_mat  # rows: E^T x'
    num = np.einsum("ni,ni->n", dst_h, ex) ** 2
    den = ex[:, 0] ** 2 + ex[:, 1] ** 2 + etx[:, 0] ** 2 + etx[:, 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(den > 0, num / den, np.inf)
    return float(out[0]) if scalar else out


@dataclass(frozen=True)
class RansacResult:
    e_mat: np.ndarray
    score: int
    inlier_mask: np.ndarray
    hypothesis_index: int


def estimate_essential_marginalized(norm_corrs_src, norm_corrs_dst, hypotheses=64,
                                    tau_max=1e-4, thresholds=100, seed=0,
                                    keep_ties=False, tie_margin=0.05):
    """Draw minimal samples, score every real solution by the marginalized
    inlier count over Sampson residuals, and return the maximizer.

    Ties break toward the lowest hypothesis index. The inlier mask is taken
    at the single threshold tau_max for downstream decomposition. With
    `keep_ties` every candidate within `tie_margin` (relative) of the top
    score is returned, best score first; near-planar scenes produce spurious
    essentials that fit the correspondences almost as well as the true one,
    and only cheirality can separate those.

    Raises:
        NoValidHypothesis: every minimal sample was degenerate.
    """
    src = np.asarray(norm_corrs_src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(norm_corrs_dst, dtype=np.float64).reshape(-1, 2)
    n = len(src)
    if n < 5:
        raise ValueError(f"need at least 5 correspondences, got {n}")
    rng = np.random.default_rng(seed)
    results = []
    hyp_index = 0
    for _ in range(hypotheses):
        picks = rng.choice(n, size=5, replace=False)
        try:
            solutions = estimate_essential_fivepoint(src[picks], dst[picks])
        except DegenerateConfiguration:
            continue
        for e_mat in solutions:
            res = sampson_residual(e_mat, src, dst)
            score = marginalized_score(res, tau_max, thresholds)
            results.append(RansacResult(e_mat=e_mat, score=score,
                                        inlier_mask=res < tau_max,
                                        hypothesis_index=hyp_index))
            hyp_index += 1
    if not results:
        raise NoValidHypothesis("all minimal samples were degenerate")
    results.sort(key=lambda r: (-r.score, r.hypothesis_index))
    if not keep_ties:
        return results[0]
    floor = (1.0 - tie_margin) * results[0].score
    return [r for r in results if r.score >= floor]
