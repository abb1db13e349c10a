"""Bit-exact file formats: depth maps, pointmaps, correspondences, scene
manifests, result documents, and PLY export.

All binary payloads are little-endian regardless of host. Readers reject
trailing garbage: the file length must match the header-implied length.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    ConfidenceOutOfRange,
    DimensionOverflow,
    TruncatedFile,
)
from .geometry import AffineDepthCorrection, CameraIntrinsics, CameraPose, FrameState

_DEPTH_MAGIC = b"MBAD"
_POINTMAP_MAGIC = b"MBAP"
_CORR_MAGIC = b"MBAC"
_VERSION = 1
_MAX_PIXELS = 2**31


def _read_exact(path):
    data = Path(path).read_bytes()
    return data


def _check_header(data, magic, path):
    if len(data) < 12:
        raise TruncatedFile(f"{path}: too short for a header")
    if data[:4] != magic:
        raise BadMagic(f"{path}: expected magic {magic!r}, got {data[:4]!r}")
    version, reserved = struct.unpack_from("<HH", data, 4)
    if version != _VERSION:
        raise BadMagic(f"{path}: unsupported version {version}")
    return reserved


def _grid_header(data, magic, path, channels):
    _check_header(data, magic, path)
    if len(data) < 16:
        raise TruncatedFile(f"{path}: too short for a grid header")
    height, width = struct.unpack_from("<II", data, 8)
    if height * width > _MAX_PIXELS:
        raise DimensionOverflow(f"{path}: {height}x{width} exceeds the pixel limit")
    expected = 16 + height * width * channels * 4
    if len(data) != expected:
        raise TruncatedFile(f"{path}: length {len(data)}, expected {expected}")
    return height, width


def write_depth(path, depth):
    """Depth grid to MBAD file; values <= 0 or NaN mark invalid pixels."""
    depth = np.asarray(depth, dtype=np.float32)
    h, w = depth.shape
    if h * w > _MAX_PIXELS:
        raise DimensionOverflow(f"{h}x{w} exceeds the pixel limit")
    with open(path, "wb") as fh:
        fh.write(_DEPTH_MAGIC)
        fh.write(struct.pack("<HHII", _VERSION, 0, h, w))
        fh.write(depth.astype("<f4").tobytes())


def read_depth(path):
    data = _read_exact(path)
    h, w = _grid_header(data, _DEPTH_MAGIC, path, channels=1)
    return np.frombuffer(data[16:], dtype="<f4").reshape(h, w).astype(np.float32)


def write_pointmap(path, pointmap):
    """(h, w, 3) camera-frame point grid to MBAP file."""
    pointmap = np.asarray(pointmap, dtype=np.float32)
    h, w, c = pointmap.shape
    if c != 3:
        raise ValueError(f"pointmap must have 3 channels, got {c}")
    if h * w > _MAX_PIXELS:
        raise DimensionOverflow(f"{h}x{w} exceeds the pixel limit")
    with open(path, "wb") as fh:
        fh.write(_POINTMAP_MAGIC)
        fh.write(struct.pack("<HHII", _VERSION, 0, h, w))
        fh.write(pointmap.astype("<f4").tobytes())


def read_pointmap(path):
    data = _read_exact(path)
    h, w = _grid_header(data, _POINTMAP_MAGIC, path, channels=3)
    return np.frombuffer(data[16:], dtype="<f4").reshape(h, w, 3).astype(np.float32)


def write_correspondences(path, frame_i, frame_j, records):
    """(n, 5) [u_i, v_i, u_j, v_j, confidence] records to MBAC file."""
    records = np.asarray(records, dtype=np.float32).reshape(-1, 5)
    conf = records[:, 4]
    if records.size and (np.any(conf < 0) or np.any(conf > 1) or not np.all(np.isfinite(conf))):
        raise ConfidenceOutOfRange("confidence values must lie in [0, 1]")
    with open(path, "wb") as fh:
        fh.write(_CORR_MAGIC)
        fh.write(struct.pack("<HHIIQ", _VERSION, 0, frame_i, frame_j, len(records)))
        fh.write(records.astype("<f4").tobytes())


def read_correspondences(path):
    """Returns (frame_i, frame_j, (n, 5) float32 array)."""
    data = _read_exact(path)
    _check_header(data, _CORR_MAGIC, path)
    if len(data) < 24:
        raise TruncatedFile(f"{path}: too short for a correspondence header")
    frame_i, frame_j, count = struct.unpack_from("<IIQ", data, 8)
    expected = 24 + count * 20
    if len(data) != expected:
        raise TruncatedFile(f"{path}: length {len(data)}, expected {expected}")
    records = np.frombuffer(data[24:], dtype="<f4").reshape(-1, 5).astype(np.float32)
    conf = records[:, 4]
    if records.size and (np.any(conf < 0) or np.any(conf > 1) or not np.all(np.isfinite(conf))):
        raise ConfidenceOutOfRange(f"{path}: confidence outside [0, 1]")
    return int(frame_i), int(frame_j), records


@dataclass
class ManifestFrame:
    frame_id: int
    width: int
    height: int
    depth_path: str
    pointmap_path: str | None = None
    intrinsics: dict | None = None  # {"focal", "cx", "cy"}


@dataclass
class SceneManifest:
    frames: list
    pairs: list  # [{"i", "j", "correspondence_path"}]
    shared_intrinsics: bool = False

    def __post_init__(self):
        ids = [f.frame_id for f in self.frames]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate frame ids in manifest")
        known = set(ids)
        for p in self.pairs:
            if p["i"] not in known or p["j"] not in known:
                raise ValueError(f"pair ({p['i']}, {p['j']}) references unknown frames")


def save_manifest(manifest: SceneManifest, path):
    doc = {
        "frames": [asdict(f) for f in manifest.frames],
        "pairs": manifest.pairs,
        "shared_intrinsics": manifest.shared_intrinsics,
    }
    Path(path).write_text(json.dumps(doc, indent=2))


def load_manifest(path) -> SceneManifest:
    doc = json.loads(Path(path).read_text())
    frames = [ManifestFrame(**f) for f in doc["frames"]]
    return SceneManifest(frames=frames, pairs=doc["pairs"],
                         shared_intrinsics=doc.get("shared_intrinsics", False))


def load_scene(manifest_path):
    """Resolve a manifest into in-memory SceneInputs (paths relative to it)."""
    from .solver import SceneInputs  # local import: solver also imports this module

    manifest_path = Path(manifest_path)
    manifest = load_manifest(manifest_path)
    base = manifest_path.parent
    frame_sizes, depth_maps, pointmaps, intrinsics = {}, {}, {}, {}
    for f in manifest.frames:
        frame_sizes[f.frame_id] = (f.width, f.height)
        depth_maps[f.frame_id] = read_depth(base / f.depth_path)
        if f.pointmap_path:
            pointmaps[f.frame_id] = read_pointmap(base / f.pointmap_path)
        if f.intrinsics:
            intrinsics[f.frame_id] = CameraIntrinsics(
                focal=f.intrinsics["focal"],
                principal_point=np.array([f.intrinsics["cx"], f.intrinsics["cy"]]),
                image_size=(f.width, f.height),
            )
    correspondences = {}
    for p in manifest.pairs:
        i, j, records = read_correspondences(base / p["correspondence_path"])
        if (i, j) != (p["i"], p["j"]):
            raise ValueError(
                f"correspondence file {p['correspondence_path']} is for pair "
                f"({i}, {j}), manifest says ({p['i']}, {p['j']})"
            )
        correspondences[(i, j)] = records.astype(np.float64)
    return SceneInputs(
        frame_sizes=frame_sizes,
        depth_maps=depth_maps,
        correspondences=correspondences,
        pointmaps=pointmaps,
        intrinsics=intrinsics,
        shared_intrinsics=manifest.shared_intrinsics,
    )


def _exact(value):
    """Round-trip-exact JSON representation of a float."""
    return float(f"{float(value):.17g}")


def write_result(result, path):
    """Serialize an SfmResult (or a bare states dict) to the pose JSON format."""
    if hasattr(result, "states"):
        states = result.states
        registered = set(result.registered)
        meta = {
            "seed": result.config.seed,
            "config": asdict(result.config),
            "unregistered": result.unregistered,
        }
        if result.final_histogram is not None:
            h = result.final_histogram
            meta["residual_histogram"] = {
                "tau_max": _exact(h.tau_max),
                "bin_count": h.bin_count,
                "total": h.total,
                "below_tau_max": int(h.cumulative[-1]),
            }
    else:
        states = result
        registered = set(states)
        meta = {}
    frames = []
    for fid in sorted(states):
        s = states[fid]
        entry = {
            "frame_id": fid,
            "registered": fid in registered,
            "width": s.intrinsics.image_size[0],
            "height": s.intrinsics.image_size[1],
            "focal": _exact(s.intrinsics.focal),
            "cx": _exact(s.intrinsics.principal_point[0]),
            "cy": _exact(s.intrinsics.principal_point[1]),
        }
        if fid in registered:
            rot = s.pose.rotation
            entry["rotation"] = [[_exact(v) for v in row] for row in rot]
            entry["translation"] = [_exact(v) for v in s.pose.translation]
            entry["alpha"] = _exact(s.correction.alpha)
            entry["beta"] = _exact(s.correction.beta)
        frames.append(entry)
    Path(path).write_text(json.dumps({"frames": frames, "metadata": meta}, indent=2))


def read_result(path):
    """Returns (states dict, registered id list, metadata dict)."""
    doc = json.loads(Path(path).read_text())
    states, registered = {}, []
    for entry in doc["frames"]:
        fid = entry["frame_id"]
        intr = CameraIntrinsics(
            focal=entry["focal"],
            principal_point=np.array([entry["cx"], entry["cy"]]),
            image_size=(entry["width"], entry["height"]),
        )
        if entry["registered"]:
            pose = CameraPose.from_rt(np.array(entry["rotation"]), np.array(entry["translation"]))
            correction = AffineDepthCorrection.from_alpha_beta(entry["alpha"], entry["beta"])
            registered.append(fid)
        else:
            pose = CameraPose.identity()
            correction = AffineDepthCorrection()
        states[fid] = FrameState(frame_id=fid, intrinsics=intr, pose=pose, correction=correction)
    return states, registered, doc.get("metadata", {})


def export_ply(states, depth_maps, path, stride=1, registered=None):
    """ASCII PLY of back-projected corrected depths in world coordinates.

    Grayscale color from per-frame normalized depth. Unregistered frames
    (when `registered` is given) are skipped.
    """
    vertices = []
    for fid in sorted(states):
        if registered is not None and fid not in registered:
            continue
        state = states[fid]
        depth = np.asarray(depth_maps[fid], dtype=np.float64)
        h, w = depth.shape
        rows, cols = np.meshgrid(np.arange(0, h, stride), np.arange(0, w, stride), indexing="ij")
        d = depth[rows, cols]
        valid = np.isfinite(d) & (d > 0)
        if not np.any(valid):
            continue
        d = state.correction.apply(d[valid])
        us, vs = cols[valid] + 0.5, rows[valid] + 0.5
        f = state.intrinsics.focal
        cx, cy = state.intrinsics.principal_point
        x = (us - cx) * d / f
        y = (vs - cy) * d / f
        pts_cam = np.column_stack([x, y, d])
        rot, t = state.pose.rotation, state.pose.translation
        pts = (pts_cam - t) @ rot
        lo, hi = d.min(), d.max()
        gray = np.full_like(d, 128) if hi <= lo else (255 * (1 - (d - lo) / (hi - lo)))
        gray = gray.astype(np.uint8)
        vertices.append((pts, gray))
    total = sum(len(p) for p, _ in vertices)
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {total}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        fh.write("end_header\n")
        for pts, gray in vertices:
            for (x, y, z), g in zip(pts, gray):
                fh.write(f"{x:.6f} {y:.6f} {z:.6f} {g} {g} {g}\n")
