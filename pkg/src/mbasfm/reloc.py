"""Registration of query frames against a frozen, already-optimized map.

Each query is bootstrapped from its most covisible map frame (two-view pose
plus scale resolution), then the regular coarse and fine stages run over the
combined graph with every map parameter frozen.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    MbaError,
    QueryUnreachable,
    ScaleResolutionFailure,
    TwoViewFailure,
)
from .geometry import AffineDepthCorrection, CameraPose, FrameState, TrainableFlags
from .initialization import (
    resolve_depth_scale,
    resolve_translation_scale,
    two_view_pose,
)
from .posegraph import DataMatrix, build_pose_graph, sample_data_matrix, star_decomposition
from .solver import OptimizerConfig, coarse_stage, fine_stage
from .torchcore import PackedRecords, SceneParameters

logger = logging.getLogger(__name__)


@dataclass
class RelocProblem:
    """A frozen map plus query frames to localize inside it.

    `map_states` must carry valid poses and depth corrections; `query_states`
    need intrinsics only (poses are ignored and re-estimated). Depth maps and
    correspondences cover both populations; query-to-query correspondences
    are used unless `query_edges` is off.
    """

    map_states: dict  # frame_id -> FrameState (pose + correction valid)
    query_states: dict  # frame_id -> FrameState (intrinsics valid)
    depth_maps: dict  # frame_id -> (h, w) raw depth
    correspondences: dict  # (i, j) -> (n, 5)
    query_edges: bool = True

    def __post_init__(self):
        overlap = set(self.map_states) & set(self.query_states)
        if overlap:
            raise ValueError(f"frames {sorted(overlap)} are both map and query")


@dataclass
class RelocResult:
    query_states: dict  # frame_id -> FrameState (optimized where successful)
    success: dict  # frame_id -> bool
    failures: dict  # frame_id -> message
    coarse_history: list = field(default_factory=list)
    fine_history: list = field(default_factory=list)


# The map is treated as converged; queries need far fewer steps than a cold
# reconstruction, so the default budget is shorter than the solver's.
RELOC_ITERATIONS = 5000


def _reloc_config(cfg: OptimizerConfig | None) -> OptimizerConfig:
    if cfg is not None:
        return cfg
    return OptimizerConfig(iterations_coarse=RELOC_ITERATIONS,
                           iterations_fine=RELOC_ITERATIONS)


def _best_map_neighbor(graph, query, map_ids):
    best, best_cov = None, -1.0
    for (a, b), cov in graph.covisibility.items():
        if query not in (a, b):
            continue
        other = b if a == query else a
        if other in map_ids and cov > best_cov:
            best, best_cov = other, cov
    return best


def _init_query(query_state, map_state, data, cfg, seed):
    """Pose and depth scale for one query from one registered map frame."""
    map_id, query_id = map_state.frame_id, query_state.frame_id
    fwd = data.records.get((map_id, query_id))
    rev = data.records.get((query_id, map_id))
    if fwd is None or rev is None:
        raise TwoViewFailure(
            f"no data-matrix records for map pair ({map_id}, {query_id})"
        )
    k_map, k_query = map_state.intrinsics, query_state.intrinsics
    tau = (4.0 / k_map.focal) ** 2
    est = two_view_pose(
        fwd["src_pixels"], fwd["dst_pixels"], k_map, k_query,
        inlier_tau=tau, seed=seed + query_id,
    )
    corrected = map_state.correction.apply(fwd["src_depths"])
    mask = est.inlier_mask
    baseline = resolve_translation_scale(
        est, fwd["src_pixels"][mask], corrected[mask],
        fwd["dst_pixels"][mask], k_map, k_query,
    )
    rel = CameraPose.from_rt(est.rotation, baseline * est.translation_dir)
    pose = rel.compose_with(map_state.pose)
    inv = rel.inverse()
    alpha = resolve_depth_scale(
        inv.rotation, inv.translation,
        rev["src_pixels"], rev["src_depths"], rev["dst_pixels"],
        k_query, k_map,
    )
    return query_state.with_pose(pose).with_correction(
        AffineDepthCorrection.from_alpha_beta(alpha, 0.0)
    )


def relocalize(problem: RelocProblem, cfg: OptimizerConfig | None = None,
               progress=None) -> RelocResult:
    """Localize every query frame inside the frozen map.

    Queries without a map edge above the covisibility threshold are flagged
    unsuccessful (QueryUnreachable is recorded, not raised); the rest are
    initialized from their best map frame and jointly refined with map
    gradients disabled. Map parameters are bit-identical before and after.
    """
    cfg = _reloc_config(cfg)
    map_ids = set(problem.map_states)
    query_ids = set(problem.query_states)

    correspondences = problem.correspondences
    if not problem.query_edges:
        correspondences = {
            (i, j): c for (i, j), c in correspondences.items()
            if not (i in query_ids and j in query_ids)
        }
    frame_sizes = {
        fid: s.intrinsics.image_size
        for fid, s in {**problem.map_states, **problem.query_states}.items()
    }
    graph = build_pose_graph(correspondences, frame_sizes, cfg.nu, cfg.chi)
    data = sample_data_matrix(
        graph, correspondences, problem.depth_maps, cfg.kappa, cfg.chi, cfg.seed
    )

    frozen_map = {
        fid: replace(s, trainable=TrainableFlags.frozen())
        for fid, s in problem.map_states.items()
    }
    # queries: intrinsics are provided, so only pose and depth correction move
    query_flags = TrainableFlags(pose=True, focal=False, alpha=True, beta=True)

    initialized = {}
    failures = {}
    for qid in sorted(query_ids):
        anchor = _best_map_neighbor(graph, qid, map_ids)
        if anchor is None:
            err = QueryUnreachable(qid)
            failures[qid] = str(err)
            logger.warning("%s", err)
            continue
        try:
            state = _init_query(
                problem.query_states[qid], frozen_map[anchor], data, cfg, cfg.seed
            )
        except (TwoViewFailure, ScaleResolutionFailure, MbaError) as exc:
            failures[qid] = str(exc)
            logger.warning("query %d initialization failed: %s", qid, exc)
            continue
        initialized[qid] = replace(state, trainable=query_flags)

    result_states = dict(problem.query_states)
    success = {qid: False for qid in query_ids}
    if not initialized:
        return RelocResult(query_states=result_states, success=success,
                           failures=failures)

    active = dict(frozen_map)
    active.update(initialized)
    active_ids = set(active)
    trimmed = DataMatrix(kappa=data.kappa, seed=data.seed)
    trimmed.records = {
        (i, j): rec for (i, j), rec in data.records.items()
        if i in active_ids and j in active_ids
    }
    scene = SceneParameters.from_states(active, shared_focal=False)
    packed = PackedRecords(scene, trimmed)
    stars = []
    for center, edges in star_decomposition(graph):
        if center not in active_ids:
            continue
        pairs = []
        for a, b in edges:
            if a in active_ids and b in active_ids:
                pairs.extend([(a, b), (b, a)])
        stars.append((center, pairs))

    coarse_history = coarse_stage(scene, packed, stars, cfg, progress)
    fine_history = fine_stage(scene, packed, cfg, progress)

    final = scene.to_states(active)
    for qid in initialized:
        result_states[qid] = final[qid]
        success[qid] = True
    return RelocResult(query_states=result_states, success=success,
                       failures=failures, coarse_history=coarse_history,
                       fine_history=fine_history)
