"""Co-visibility pose graph, data-matrix subsampling, star decomposition,
and the greedy spanning tree used to order registration."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import NoValidSamples

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PoseGraph:
    frame_count: int
    edges: frozenset  # frozenset of (i, j) tuples with i < j
    covisibility: dict  # (i, j) i < j -> score in [0, 1]

    def neighbors(self, i):
        out = []
        for a, b in self.edges:
            if a == i:
                out.append(b)
            elif b == i:
                out.append(a)
        return sorted(out)

    def degree(self, i):
        return sum(1 for a, b in self.edges if i in (a, b))


@dataclass(frozen=True)
class DataRecord:
    src_pixel: np.ndarray  # (2,)
    dst_pixel: np.ndarray  # (2,)
    src_depth: float  # raw, pre-correction


@dataclass
class DataMatrix:
    """Per directed pair (i -> j): kappa sampled records, stored as arrays.

    records[(i, j)] is a dict with keys src_pixels (k,2), dst_pixels (k,2),
    src_depths (k,). Both directions of every undirected edge are present.
    """

    kappa: int
    seed: int
    records: dict = field(default_factory=dict)

    @property
    def directed_pairs(self):
        return sorted(self.records.keys())

    def record_count(self):
        return sum(v["src_depths"].size for v in self.records.values())


def _edge_key(i, j):
    return (i, j) if i < j else (j, i)


def build_pose_graph(correspondences, frame_sizes, nu, chi) -> PoseGraph:
    """Build the undirected co-visibility graph.

    Args:
        correspondences: dict (i, j) -> array (n, 5) of
            [u_i, v_i, u_j, v_j, confidence]; ordered pairs, either or both
            directions may be present.
        frame_sizes: dict frame_id -> (width, height).
        nu: covisibility inclusion threshold in (0, 1].
        chi: confidence threshold in [0, 1).

    Covisibility of an edge is the max over its two directions of
    (#correspondences with confidence > chi) / (source frame pixel count).
    """
    if not (0 < nu <= 1):
        raise ValueError(f"nu must be in (0, 1], got {nu}")
    if not (0 <= chi < 1):
        raise ValueError(f"chi must be in [0, 1), got {chi}")
    scores = {}
    for (i, j), corr in correspondences.items():
        corr = np.asarray(corr, dtype=np.float64).reshape(-1, 5)
        confident = int(np.count_nonzero(corr[:, 4] > chi))
        w, h = frame_sizes[i]
        score = confident / float(w * h)
        key = _edge_key(i, j)
        scores[key] = max(scores.get(key, 0.0), score)
    edges = frozenset(k for k, s in scores.items() if s >= nu)
    return PoseGraph(
        frame_count=len(frame_sizes),
        edges=edges,
        covisibility={k: scores[k] for k in edges},
    )


def _depth_lookup(depth_map, pixels):
    """Nearest-pixel depth lookup; returns per-pixel depth (NaN when out of bounds)."""
    h, w = depth_map.shape
    # pixel centers sit at integer + 0.5, so floor gives the nearest pixel
    uv = np.floor(np.asarray(pixels, dtype=np.float64)).astype(np.int64)
    valid = (uv[:, 0] >= 0) & (uv[:, 0] < w) & (uv[:, 1] >= 0) & (uv[:, 1] < h)
    depths = np.full(len(uv), np.nan)
    depths[valid] = depth_map[uv[valid, 1], uv[valid, 0]]
    return depths


def sample_data_matrix(graph: PoseGraph, correspondences, depth_maps, kappa, chi, seed) -> DataMatrix:
    """Sample kappa records per directed pair, uniformly with replacement.

    Eligible correspondences have confidence >= chi and a valid (positive,
    finite) source depth at the nearest pixel. Edges with no eligible
    correspondence in some direction are dropped with a warning
    (NoValidSamples is recorded, not raised).
    """
    rng = np.random.default_rng(seed)
    matrix = DataMatrix(kappa=int(kappa), seed=int(seed))
    dropped = []
    for i, j in sorted(graph.edges):
        for src, dst in ((i, j), (j, i)):
            corr = correspondences.get((src, dst))
            if corr is None and (dst, src) in correspondences:
                # mirror the reverse direction
                rev = np.asarray(correspondences[(dst, src)], dtype=np.float64).reshape(-1, 5)
                corr = rev[:, [2, 3, 0, 1, 4]]
            if corr is None:
                dropped.append((src, dst))
                continue
            corr = np.asarray(corr, dtype=np.float64).reshape(-1, 5)
            depths = _depth_lookup(depth_maps[src], corr[:, :2])
            eligible = (corr[:, 4] >= chi) & np.isfinite(depths) & (depths > 0)
            idx_pool = np.flatnonzero(eligible)
            if idx_pool.size == 0:
                dropped.append((src, dst))
                continue
            picks = idx_pool[rng.integers(0, idx_pool.size, size=kappa)]
            matrix.records[(src, dst)] = {
                "src_pixels": corr[picks, :2].copy(),
                "dst_pixels": corr[picks, 2:4].copy(),
                "src_depths": depths[picks].copy(),
            }
    for src, dst in dropped:
        err = NoValidSamples(src, dst)
        logger.warning("dropping pair (%d, %d): %s", src, dst, err)
        matrix.records.pop((dst, src), None)  # keep pairs symmetric
    return matrix


def star_decomposition(graph: PoseGraph):
    """Per-frame star subgraphs: frame i, its neighbors, and the incident edges.

    Returns a list of (center, edge list) over all frames; every graph edge
    appears in exactly two stars.
    """
    stars = []
    for i in range(graph.frame_count):
        incident = sorted(e for e in graph.edges if i in e)
        stars.append((i, incident))
    return stars


def greedy_spanning_tree(graph: PoseGraph):
    """Greedy registration order over the largest connected component.

    Root = highest-degree node (ties: lowest id). Each step adds the frontier
    node of highest graph degree (ties: lowest id), parented to its registered
    neighbor of highest covisibility (ties: lowest id).

    Returns:
        (sequence, unregistered): sequence is a list of (node, parent) with
        the root first as (root, None); unregistered is a sorted list of
        nodes outside the chosen component.
    """
    if graph.frame_count == 0:
        return [], []
    degrees = {i: graph.degree(i) for i in range(graph.frame_count)}

    # largest connected component (ties: component holding the lowest id)
    seen, components = set(), []
    for start in range(graph.frame_count):
        if start in seen:
            continue
        comp, stack = set(), [start]
        while stack:
            n = stack.pop()
            if n in comp:
                continue
            comp.add(n)
            stack.extend(m for m in graph.neighbors(n) if m not in comp)
        seen |= comp
        components.append(comp)
    component = max(components, key=lambda c: (len(c), -min(c)))

    root = max(component, key=lambda n: (degrees[n], -n))
    sequence = [(root, None)]
    registered = {root}
    while len(registered) < len(component):
        frontier = sorted(
            {m for n in registered for m in graph.neighbors(n)} - registered
        )
        nxt = max(frontier, key=lambda n: (degrees[n], -n))
        parents = [m for m in graph.neighbors(nxt) if m in registered]
        parent = max(parents, key=lambda m: (graph.covisibility[_edge_key(nxt, m)], -m))
        sequence.append((nxt, parent))
        registered.add(nxt)
    unregistered = sorted(set(range(graph.frame_count)) - component)
    return sequence, unregistered
