"""Command-line front end: sfm, reloc, ransac2v, synth, and eval subcommands.

Exit codes: 0 success, 1 usage or I/O error, 2 algorithmic failure. Every
error goes to stderr as `error[<CODE>]: message`.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import fields as dataclass_fields
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from .errors import IoNotFound, MbaError
from .geometry import CameraPose, FrameState
from .io_formats import (
    export_ply,
    load_scene,
    read_correspondences,
    read_result,
    write_result,
)
from .solver import LOSS_KINDS, OptimizerConfig, run_sfm

# Errors in this set mean the input files or flags were unusable (exit 1);
# every other MbaError is an algorithmic failure (exit 2).
_IO_CODES = frozenset({
    "IO_NOT_FOUND", "BAD_MAGIC", "TRUNCATED_FILE", "DIMENSION_OVERFLOW",
    "CONFIDENCE_OUT_OF_RANGE",
})


def _add_solver_flags(p):
    p.add_argument("--loss", choices=LOSS_KINDS, default="mba",
                   help="optimization objective (default: mba)")
    p.add_argument("--kappa", type=int, default=200,
                   help="records sampled per directed frame pair")
    p.add_argument("--nu", type=float, default=0.15,
                   help="covisibility threshold for pose-graph edges")
    p.add_argument("--chi", type=float, default=0.2,
                   help="minimum correspondence confidence")
    p.add_argument("--tau-max", type=float, default=20.0,
                   help="fine-stage residual cap in pixels")
    p.add_argument("--tau-bar-max", type=float, default=10.0,
                   help="coarse-stage cap on log-compressed residuals")
    p.add_argument("--bins", type=int, default=100,
                   help="residual histogram bin count")
    p.add_argument("--iters-coarse", type=int, default=25000,
                   help="coarse-stage iterations")
    p.add_argument("--iters-fine", type=int, default=25000,
                   help="fine-stage iterations")
    p.add_argument("--lr", type=float, default=1e-3,
                   help="Adam learning rate")
    p.add_argument("--intrinsics-lr-mult", type=float, default=50.0,
                   help="learning-rate multiplier for focal lengths")
    p.add_argument("--workers", type=int, default=1,
                   help="worker count (MBA_WORKERS overrides)")
    p.add_argument("--seed", type=int, default=0, help="random seed")


def _solver_config(args) -> OptimizerConfig:
    workers = args.workers
    env = os.environ.get("MBA_WORKERS")
    if env is not None:
        workers = int(env)
    return OptimizerConfig(
        iterations_coarse=args.iters_coarse,
        iterations_fine=args.iters_fine,
        lr=args.lr,
        intrinsics_lr_multiplier=args.intrinsics_lr_mult,
        tau_max_fine=args.tau_max,
        tau_bar_max_coarse=args.tau_bar_max,
        bin_count=args.bins,
        loss_kind=args.loss,
        kappa=args.kappa,
        nu=args.nu,
        chi=args.chi,
        workers=workers,
        seed=args.seed,
    )


def _require(path, what):
    path = Path(path)
    if not path.exists():
        raise IoNotFound(f"{what} not found: {path}")
    return path


def _write_histogram_csv(hist, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lower", "bin_upper", "count", "cumulative"])
        width = hist.bin_width
        for b in range(hist.bin_count):
            writer.writerow([
                f"{b * width:.17g}", f"{(b + 1) * width:.17g}",
                int(hist.counts[b]), int(hist.cumulative[b]),
            ])


def _cmd_sfm(args) -> int:
    manifest = _require(args.manifest, "manifest")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inputs = load_scene(manifest)
    if args.shared_intrinsics:
        inputs.shared_intrinsics = True
    cfg = _solver_config(args)
    try:
        result = run_sfm(inputs, cfg)
    except KeyboardInterrupt:
        # Clean partial write: a valid result file with every frame
        # unregistered, so downstream tooling still parses.
        write_result(
            SimpleNamespace(states={}, registered=[], config=cfg,
                            unregistered=sorted(inputs.frame_sizes),
                            final_histogram=None),
            out / "result.json",
        )
        print("error[INTERRUPTED]: optimization interrupted; wrote empty result",
              file=sys.stderr)
        return 2
    write_result(result, out / "result.json")
    if result.final_histogram is not None:
        _write_histogram_csv(result.final_histogram, out / "residual_histogram.csv")
    if args.ply is not None:
        export_ply(result.states, inputs.depth_maps, out / "cloud.ply",
                   stride=args.ply, registered=set(result.registered))
    print(f"registered {len(result.registered)}/{len(inputs.frame_sizes)} frames")
    for fid, msg in sorted(result.failures.items()):
        print(f"frame {fid}: {msg}", file=sys.stderr)
    return 0 if len(result.registered) >= 2 else 2


def _cmd_reloc(args) -> int:
    from .reloc import RelocProblem, relocalize

    map_path = _require(args.map, "map result")
    manifest = _require(args.manifest, "manifest")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    map_states_all, registered, _ = read_result(map_path)
    map_states = {fid: map_states_all[fid] for fid in registered}
    inputs = load_scene(manifest)
    query_states = {}
    for fid in inputs.frame_sizes:
        if fid in map_states:
            continue
        if fid not in inputs.intrinsics:
            raise IoNotFound(
                f"query frame {fid} has no intrinsics in the manifest"
            )
        query_states[fid] = FrameState(
            frame_id=fid, intrinsics=inputs.intrinsics[fid],
            pose=CameraPose.identity(),
        )
    cfg = _solver_config(args)
    problem = RelocProblem(
        map_states=map_states,
        query_states=query_states,
        depth_maps=inputs.depth_maps,
        correspondences=inputs.correspondences,
        query_edges=not args.no_query_query,
    )
    result = relocalize(problem, cfg)
    good = sorted(q for q, ok in result.success.items() if ok)
    write_result(
        SimpleNamespace(states=result.query_states, registered=good, config=cfg,
                        unregistered=sorted(set(query_states) - set(good)),
                        final_histogram=None),
        out / "result.json",
    )
    print(f"localized {len(good)}/{len(query_states)} query frames")
    for fid, msg in sorted(result.failures.items()):
        print(f"query {fid}: {msg}", file=sys.stderr)
    return 0 if good else 2


def _print_pose(e_mat, rotation, translation, inliers, tau, score):
    print(f"tau_max = {tau:g}  score = {score}  inliers = {inliers}")
    print("E =")
    for row in e_mat:
        print("  " + "  ".join(f"{v: .9f}" for v in row))
    print("R =")
    for row in rotation:
        print("  " + "  ".join(f"{v: .9f}" for v in row))
    print("t_hat = " + "  ".join(f"{v: .9f}" for v in translation))


def _cmd_ransac2v(args) -> int:
    from .fivepoint import select_pose_by_cheirality

    path = _require(args.corrs, "correspondence file")
    _, _, records = read_correspondences(path)
    f, cx, cy = args.fx, args.cx, args.cy
    src = (records[:, 0:2] - [cx, cy]) / f
    dst = (records[:, 2:4] - [cx, cy]) / f
    taus = [args.tau_max]
    if args.grid:
        taus = [float(t) for t in args.grid.split(",")]
    from .ransac2v import estimate_essential_marginalized

    for tau in taus:
        best = estimate_essential_marginalized(
            src, dst, hypotheses=args.hypotheses, tau_max=tau, seed=args.seed
        )
        mask = best.inlier_mask
        selected = select_pose_by_cheirality(best.e_mat, src[mask], dst[mask])
        if selected is None:
            print(f"tau_max = {tau:g}: no cheirality-consistent decomposition",
                  file=sys.stderr)
            continue
        rotation, translation, _ = selected
        _print_pose(best.e_mat, rotation, translation,
                    int(np.count_nonzero(mask)), tau, best.score)
    return 0


def _cmd_synth(args) -> int:
    from .synthetic import SyntheticConfig, generate

    config_path = _require(args.config, "config file")
    doc = json.loads(config_path.read_text())
    known = {f.name for f in dataclass_fields(SyntheticConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    for key in ("image_size", "affine_alpha_range", "affine_beta_range"):
        if key in doc:
            doc[key] = tuple(doc[key])
    cfg = SyntheticConfig(**doc)
    out = Path(args.out)
    scene = generate(cfg, out_dir=out)
    write_result(scene.true_states, out / "ground_truth.json")
    print(f"wrote {cfg.frame_count} frames, {len(scene.correspondences)} "
          f"correspondence pairs to {out}")
    print(f"depth_scale = {scene.depth_scale:g}  "
          f"scene_diameter = {scene.scene_diameter:g}")
    return 0


def _cmd_eval(args) -> int:
    from .evaluation import ate, auc_pose, pairwise_pose_errors, rra_rta

    est_states, est_registered, _ = read_result(_require(args.est, "estimate"))
    gt_states, gt_registered, _ = read_result(_require(args.gt, "ground truth"))
    est = {fid: est_states[fid] for fid in est_registered}
    gt = {fid: gt_states[fid] for fid in gt_registered}
    rra, rta = rra_rta(est, gt, args.tau)
    errors = pairwise_pose_errors(est, gt)
    rot = [e[0] for e in errors.values()]
    trans = [e[1] for e in errors.values()]
    report = {
        f"RRA@{args.tau:g}": rra,
        f"RTA@{args.tau:g}": rta,
        f"AUC_rot@{args.tau:g}": auc_pose(rot, args.tau),
        f"AUC_trans@{args.tau:g}": auc_pose(trans, args.tau),
    }
    common = sorted(set(est) & set(gt))
    if len(common) >= 3:
        report["ATE"] = ate(
            [est[fid].pose.camera_center() for fid in common],
            [gt[fid].pose.camera_center() for fid in common],
        )
    if args.json:
        print(json.dumps(report, indent=2))
    else:
        for key, value in report.items():
            print(f"{key} = {round(value, 6)}")
    return 0


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="mbasfm",
        description="Structure from motion and relocalization over "
                    "precomputed monocular depth maps.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sfm", help="reconstruct a scene from a manifest")
    p.add_argument("--manifest", required=True, help="scene manifest JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--shared-intrinsics", action="store_true",
                   help="optimize one focal length shared by all frames")
    p.add_argument("--ply", type=int, default=None, metavar="STRIDE",
                   help="also export a point cloud at this pixel stride")
    _add_solver_flags(p)
    p.set_defaults(func=_cmd_sfm)

    p = sub.add_parser("reloc", help="localize query frames in a frozen map")
    p.add_argument("--map", required=True, help="map result JSON from `sfm`")
    p.add_argument("--manifest", required=True,
                   help="manifest covering map and query frames")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--no-query-query", action="store_true",
                   help="drop correspondences between query frames")
    _add_solver_flags(p)
    p.set_defaults(func=_cmd_reloc)

    p = sub.add_parser("ransac2v",
                       help="two-view essential matrix with marginalized scoring")
    p.add_argument("--corrs", required=True, help="correspondence file")
    p.add_argument("--fx", type=float, required=True, help="focal length")
    p.add_argument("--cx", type=float, required=True, help="principal point x")
    p.add_argument("--cy", type=float, required=True, help="principal point y")
    p.add_argument("--hypotheses", type=int, default=64,
                   help="minimal samples to draw")
    p.add_argument("--tau-max", type=float, default=1e-4,
                   help="residual cap in normalized coordinates")
    p.add_argument("--grid", default=None, metavar="t1,t2,...",
                   help="sweep tau_max over these values instead")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.set_defaults(func=_cmd_ransac2v)

    p = sub.add_parser("synth", help="generate a synthetic scene")
    p.add_argument("--config", required=True, help="scene config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("eval", help="score an estimate against ground truth")
    p.add_argument("--est", required=True, help="estimated result JSON")
    p.add_argument("--gt", required=True, help="ground-truth result JSON")
    p.add_argument("--tau", type=float, default=5.0,
                   help="accuracy threshold in degrees")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.set_defaults(func=_cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error[IO_NOT_FOUND]: {exc}", file=sys.stderr)
        return 1
    except MbaError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        return 1 if exc.code in _IO_CODES else 2
    except ValueError as exc:
        print(f"error[INVALID_VALUE]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
