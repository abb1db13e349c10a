"""Coarse and fine bundle-adjustment stages and the end-to-end SfM driver.

Both stages run Adam for a fixed iteration budget. The coarse stage scores
log-compressed residuals against per-star-subgraph distributions; the fine
stage scores raw pixel residuals against one global distribution.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .distribution import ResidualHistogram, build_histogram
from .errors import AllSubgraphsEmpty, EmptyResidualSet, InsufficientCalibrationPoints
from .geometry import CameraIntrinsics, CameraPose, FrameState, TrainableFlags
from .initialization import calibrate_from_pointmap, register_spanning_tree, shared_focal
from .posegraph import (
    DataMatrix,
    build_pose_graph,
    greedy_spanning_tree,
    sample_data_matrix,
    star_decomposition,
)
from .torchcore import PackedRecords, SceneParameters, compute_residuals, mba_surrogate

logger = logging.getLogger(__name__)

ROBUST_KINDS = ("soft_l1", "cauchy", "tukey", "l2")
LOSS_KINDS = ("mba",) + ROBUST_KINDS


@dataclass(frozen=True)
class OptimizerConfig:
    iterations_coarse: int = 25000
    iterations_fine: int = 25000
    lr: float = 1e-3
    intrinsics_lr_multiplier: float = 50.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    tau_max_fine: float = 20.0
    tau_bar_max_coarse: float = 10.0
    bin_count: int = 100
    loss_kind: str = "mba"
    robust_scale: float = 5.0
    histogram_rebuild_interval: int = 1
    kappa: int = 200
    nu: float = 0.15
    chi: float = 0.2
    workers: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.iterations_coarse < 0 or self.iterations_fine < 0:
            raise ValueError("iteration counts must be nonnegative")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.tau_max_fine <= 0 or self.tau_bar_max_coarse <= 0:
            raise ValueError("tau values must be positive")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}")


def _make_optimizer(scene: SceneParameters, cfg: OptimizerConfig):
    groups = [
        {"params": [scene.rot6d, scene.trans], "lr": cfg.lr},
        {"params": [scene.log_focal], "lr": cfg.lr * cfg.intrinsics_lr_multiplier},
        {"params": [scene.log_alpha, scene.beta], "lr": cfg.lr},
    ]
    return torch.optim.Adam(groups, betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps)


def _robust_loss_torch(residuals, kind, scale):
    active = torch.isfinite(residuals)
    if not torch.any(active):
        raise EmptyResidualSet("no finite residual for the robust baseline")
    r = residuals[active]
    s = scale
    if kind == "l2":
        per = r**2
    elif kind == "soft_l1":
        per = 2.0 * s**2 * (torch.sqrt(1.0 + (r / s) ** 2) - 1.0)
    elif kind == "cauchy":
        per = s**2 * torch.log1p((r / s) ** 2)
    elif kind == "tukey":
        u = torch.clamp(1.0 - (r / s) ** 2, min=0.0)
        per = (s**2 / 6.0) * (1.0 - u**3)
    else:
        raise ValueError(f"unknown robust loss {kind!r}")
    return per.sum() / r.numel()


def _chunk_slices(n, workers):
    bounds = np.linspace(0, n, max(workers, 1) + 1).astype(int)
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def fine_stage(scene: SceneParameters, packed: PackedRecords, cfg: OptimizerConfig,
               progress=None):
    """Optimize against the global residual distribution (or a robust baseline).

    Returns the per-iteration loss history. `progress(iteration, stage, loss,
    inlier_fraction)` is called when provided.
    """
    history = []
    if cfg.iterations_fine == 0 or packed.count == 0:
        return history
    optimizer = _make_optimizer(scene, cfg)
    chunks = _chunk_slices(packed.count, cfg.workers)
    hist = None
    normalizer = 1.0
    for it in range(cfg.iterations_fine):
        optimizer.zero_grad()
        residuals = compute_residuals(scene, packed)
        if cfg.loss_kind == "mba":
            if hist is None or it % cfg.histogram_rebuild_interval == 0:
                hist = build_histogram(
                    residuals.detach().numpy(), cfg.tau_max_fine, cfg.bin_count
                )
                normalizer = hist.total
            loss = sum(mba_surrogate(residuals[c], hist, normalizer) for c in chunks)
            inlier_fraction = hist.cumulative[-1] / hist.total
        else:
            loss = _robust_loss_torch(residuals, cfg.loss_kind, cfg.robust_scale)
            finite = torch.isfinite(residuals)
            inlier_fraction = float(
                (residuals[finite] < cfg.tau_max_fine).double().mean()
            )
        loss.backward()
        scene.apply_grad_masks()
        optimizer.step()
        history.append(float(loss.detach()))
        if progress is not None:
            progress(it, "fine", float(loss.detach()), float(inlier_fraction))
    return history


def coarse_stage(scene: SceneParameters, packed: PackedRecords, stars, cfg: OptimizerConfig,
                 progress=None):
    """Optimize log-compressed residuals per star subgraph.

    `stars` maps each center frame to the list of directed pairs whose
    residuals enter its subgraph loss.

    Raises:
        AllSubgraphsEmpty: no subgraph has a residual below tau_bar_max.
    """
    history = []
    if cfg.iterations_coarse == 0 or packed.count == 0:
        return history
    star_indices = []
    for _, pairs in stars:
        idx = packed.indices_for_pairs(pairs)
        star_indices.append(torch.as_tensor(idx, dtype=torch.long))
    n_stars = len(star_indices)
    optimizer = _make_optimizer(scene, cfg)
    cache = [None] * n_stars  # (hist, normalizer) per star
    for it in range(cfg.iterations_coarse):
        optimizer.zero_grad()
        residuals = compute_residuals(scene, packed)
        logres = torch.log1p(residuals)
        rebuild = it % cfg.histogram_rebuild_interval == 0 or cache[0] is None
        terms = []
        for s, idx in enumerate(star_indices):
            if idx.numel() == 0:
                continue
            subset = logres[idx]
            if rebuild or cache[s] is None:
                vals = subset.detach().numpy()
                below = vals[np.isfinite(vals) & (vals < cfg.tau_bar_max_coarse)]
                if below.size == 0:
                    cache[s] = None
                    continue
                cache[s] = (
                    build_histogram(vals, cfg.tau_bar_max_coarse, cfg.bin_count),
                    below.size,
                )
            if cache[s] is None:
                continue
            hist, norm = cache[s]
            terms.append(mba_surrogate(subset, hist, norm))
        if not terms:
            raise AllSubgraphsEmpty("no subgraph has a residual below tau_bar_max")
        loss = sum(terms) / n_stars
        loss.backward()
        scene.apply_grad_masks()
        optimizer.step()
        history.append(float(loss.detach()))
        if progress is not None:
            finite = np.isfinite(logres.detach().numpy())
            inlier_fraction = float(np.mean(finite)) if finite.size else 0.0
            progress(it, "coarse", float(loss.detach()), inlier_fraction)
    return history


@dataclass
class SceneInputs:
    """Everything the pipeline consumes, decoded from files or synthesized."""

    frame_sizes: dict  # frame_id -> (width, height)
    depth_maps: dict  # frame_id -> (h, w) float array
    correspondences: dict  # (i, j) -> (n, 5) array
    pointmaps: dict = field(default_factory=dict)  # frame_id -> (h, w, 3)
    intrinsics: dict = field(default_factory=dict)  # frame_id -> CameraIntrinsics
    shared_intrinsics: bool = False


@dataclass
class SfmResult:
    states: dict  # frame_id -> FrameState (final, registered frames updated)
    registered: list
    unregistered: list
    failures: dict  # frame_id -> message
    final_histogram: ResidualHistogram | None
    coarse_history: list
    fine_history: list
    config: OptimizerConfig
    graph_edges: list


def _initial_intrinsics(inputs: SceneInputs):
    """Per-frame intrinsics: provided, else calibrated from the pointmap."""
    intr = {}
    estimates = {}
    for fid, size in inputs.frame_sizes.items():
        if fid in inputs.intrinsics:
            intr[fid] = inputs.intrinsics[fid]
            estimates[fid] = inputs.intrinsics[fid].focal
        elif fid in inputs.pointmaps:
            focal = calibrate_from_pointmap(inputs.pointmaps[fid])
            intr[fid] = CameraIntrinsics.centered(focal, size)
            estimates[fid] = focal
        else:
            raise InsufficientCalibrationPoints(
                f"frame {fid}: no intrinsics and no pointmap to calibrate from"
            )
    if inputs.shared_intrinsics:
        focal = shared_focal(list(estimates.values()))
        intr = {
            fid: CameraIntrinsics.centered(focal, inputs.frame_sizes[fid])
            for fid in inputs.frame_sizes
        }
    return intr


def run_sfm(inputs: SceneInputs, cfg: OptimizerConfig = OptimizerConfig(),
            progress=None) -> SfmResult:
    """Full pipeline: graph, sampling, initialization, coarse stage, fine stage."""
    intrinsics = _initial_intrinsics(inputs)
    base_states = {
        fid: FrameState(frame_id=fid, intrinsics=intrinsics[fid], pose=CameraPose.identity())
        for fid in inputs.frame_sizes
    }
    graph = build_pose_graph(inputs.correspondences, inputs.frame_sizes, cfg.nu, cfg.chi)
    data = sample_data_matrix(
        graph, inputs.correspondences, inputs.depth_maps, cfg.kappa, cfg.chi, cfg.seed
    )
    sequence, outside = greedy_spanning_tree(graph)
    registered_states, failures = register_spanning_tree(
        sequence, data, base_states, seed=cfg.seed
    )
    for fid in outside:
        failures.setdefault(fid, "outside the largest connected component")

    if not registered_states:
        return SfmResult(
            states=base_states, registered=[], unregistered=sorted(failures),
            failures=failures, final_histogram=None, coarse_history=[],
            fine_history=[], config=cfg, graph_edges=sorted(graph.edges),
        )

    # Gauge: the root's pose pins the world rotation and translation. The
    # scale direction is left free — pinning it through the root's depth
    # correction couples that frame's (alpha, beta) to a global rescale of
    # everything else, which Adam traverses too slowly to recover the root's
    # own correction. A flat scale direction costs nothing: the loss is
    # projective and all reported metrics are similarity-invariant.
    root = sequence[0][0] if sequence else None
    if root is not None and root in registered_states:
        registered_states[root] = replace(
            registered_states[root],
            trainable=TrainableFlags(pose=False, focal=registered_states[root].trainable.focal,
                                     alpha=True, beta=True),
        )

    reg_ids = set(registered_states)
    trimmed = DataMatrix(kappa=data.kappa, seed=data.seed)
    trimmed.records = {
        (i, j): rec for (i, j), rec in data.records.items()
        if i in reg_ids and j in reg_ids
    }
    scene = SceneParameters.from_states(registered_states, inputs.shared_intrinsics)
    packed = PackedRecords(scene, trimmed)
    stars = []
    for center, edges in star_decomposition(graph):
        if center not in reg_ids:
            continue
        pairs = []
        for a, b in edges:
            if a in reg_ids and b in reg_ids:
                pairs.extend([(a, b), (b, a)])
        stars.append((center, pairs))

    coarse_history = coarse_stage(scene, packed, stars, cfg, progress)
    fine_history = fine_stage(scene, packed, cfg, progress)

    final_states = dict(base_states)
    final_states.update(scene.to_states(registered_states))
    final_hist = None
    if packed.count:
        residuals = compute_residuals(scene, packed).detach().numpy()
        if np.any(np.isfinite(residuals)):
            final_hist = build_histogram(residuals, cfg.tau_max_fine, cfg.bin_count)
    return SfmResult(
        states=final_states,
        registered=sorted(reg_ids),
        unregistered=sorted(set(inputs.frame_sizes) - reg_ids),
        failures=failures,
        final_histogram=final_hist,
        coarse_history=coarse_history,
        fine_history=fine_history,
        config=cfg,
        graph_edges=sorted(graph.edges),
    )
