"""Batched, differentiable residual evaluation for the optimization stages.

Everything here is float64 torch on CPU. The scene is packed into flat
per-frame tensors; the data matrix into flat per-record tensors. The
surrogate loss has a hand-specified backward: the histogram is a detached
constant, and each residual's gradient is the negative bin density.
"""

from __future__ import annotations

import numpy as np
import torch

from .distribution import ResidualHistogram, cdf_at, pdf_at
from .geometry import (
    DEPTH_FLOOR,
    Z_FLOOR,
    AffineDepthCorrection,
    CameraIntrinsics,
    CameraPose,
    FrameState,
)

_DT = torch.float64


def rotation_from_6d_torch(seed):
    """Batched Gram-Schmidt: (n, 6) seeds -> (n, 3, 3) proper rotations."""
    a, b = seed[:, :3], seed[:, 3:]
    c1 = a / a.norm(dim=1, keepdim=True)
    b_perp = b - (b * c1).sum(dim=1, keepdim=True) * c1
    c2 = b_perp / b_perp.norm(dim=1, keepdim=True)
    c3 = torch.cross(c1, c2, dim=1)
    return torch.stack([c1, c2, c3], dim=2)


class SceneParameters(torch.nn.Module):
    """Optimizable per-frame state as flat tensors, with freeze masks.

    Frames are indexed densely 0..n-1 in `frame_ids` order. Masks multiply
    gradients after backward, so frozen slots never move (Adam's update is
    exactly zero for a zero gradient with zero moments).
    """

    def __init__(self, frame_ids, rot6d, trans, log_focal, log_alpha, beta,
                 principal_points, pose_mask, focal_mask, alpha_mask, beta_mask,
                 shared_focal, image_sizes):
        super().__init__()
        self.frame_ids = list(frame_ids)
        self.index = {fid: k for k, fid in enumerate(self.frame_ids)}
        self.shared_focal = shared_focal
        self.image_sizes = list(image_sizes)
        self.rot6d = torch.nn.Parameter(torch.as_tensor(rot6d, dtype=_DT))
        self.trans = torch.nn.Parameter(torch.as_tensor(trans, dtype=_DT))
        self.log_focal = torch.nn.Parameter(torch.as_tensor(log_focal, dtype=_DT))
        self.log_alpha = torch.nn.Parameter(torch.as_tensor(log_alpha, dtype=_DT))
        self.beta = torch.nn.Parameter(torch.as_tensor(beta, dtype=_DT))
        self.register_buffer("pp", torch.as_tensor(principal_points, dtype=_DT))
        self.register_buffer("pose_mask", torch.as_tensor(pose_mask, dtype=_DT))
        self.register_buffer("focal_mask", torch.as_tensor(focal_mask, dtype=_DT))
        self.register_buffer("alpha_mask", torch.as_tensor(alpha_mask, dtype=_DT))
        self.register_buffer("beta_mask", torch.as_tensor(beta_mask, dtype=_DT))

    @staticmethod
    def from_states(states, shared_focal=False):
        """Pack a dict of FrameState (registered frames only)."""
        frame_ids = sorted(states.keys())
        rot6d, trans, log_alpha, beta, pps, sizes = [], [], [], [], [], []
        focals, pose_m, focal_m, alpha_m, beta_m = [], [], [], [], []
        for fid in frame_ids:
            s = states[fid]
            rot6d.append(s.pose.rotation_6d)
            trans.append(s.pose.translation)
            log_alpha.append(s.correction.log_alpha)
            beta.append(s.correction.beta)
            focals.append(np.log(s.intrinsics.focal))
            pps.append(s.intrinsics.principal_point)
            sizes.append(s.intrinsics.image_size)
            pose_m.append(1.0 if s.trainable.pose else 0.0)
            focal_m.append(1.0 if s.trainable.focal else 0.0)
            alpha_m.append(1.0 if s.trainable.alpha else 0.0)
            beta_m.append(1.0 if s.trainable.beta else 0.0)
        if shared_focal:
            log_focal = [float(np.median(focals))]
            focal_mask = [1.0 if all(m > 0 for m in focal_m) else 0.0]
        else:
            log_focal, focal_mask = focals, focal_m
        return SceneParameters(
            frame_ids, np.array(rot6d), np.array(trans), np.array(log_focal),
            np.array(log_alpha), np.array(beta), np.array(pps),
            np.array(pose_m), np.array(focal_mask), np.array(alpha_m),
            np.array(beta_m), shared_focal, sizes,
        )

    def focal_per_frame(self):
        f = torch.exp(self.log_focal)
        if self.shared_focal:
            f = f.expand(len(self.frame_ids))
        return f

    def apply_grad_masks(self):
        if self.rot6d.grad is not None:
            self.rot6d.grad *= self.pose_mask[:, None]
        if self.trans.grad is not None:
            self.trans.grad *= self.pose_mask[:, None]
        if self.log_focal.grad is not None:
            self.log_focal.grad *= self.focal_mask
        if self.log_alpha.grad is not None:
            self.log_alpha.grad *= self.alpha_mask
        if self.beta.grad is not None:
            self.beta.grad *= self.beta_mask

    def to_states(self, template_states):
        """Unpack back into FrameState objects, keeping ids/flags from the templates."""
        out = {}
        focal = self.focal_per_frame().detach().numpy()
        for k, fid in enumerate(self.frame_ids):
            t = template_states[fid]
            intr = t.intrinsics
            if abs(focal[k] - intr.focal) > 0:
                intr = CameraIntrinsics(
                    focal=float(focal[k]),
                    principal_point=intr.principal_point,
                    image_size=intr.image_size,
                )
            out[fid] = FrameState(
                frame_id=fid,
                intrinsics=intr,
                pose=CameraPose(
                    rotation_6d=self.rot6d[k].detach().numpy().copy(),
                    translation=self.trans[k].detach().numpy().copy(),
                ),
                correction=AffineDepthCorrection(
                    log_alpha=float(self.log_alpha[k].detach()),
                    beta=float(self.beta[k].detach()),
                ),
                trainable=t.trainable,
            )
        return out


class PackedRecords:
    """Data matrix packed as (pair, record) tensors, flat order pair-major.

    Every directed pair carries the same record count (the data matrix
    samples exactly kappa with replacement), so frame-indexed quantities are
    gathered once per pair instead of once per record.
    """

    def __init__(self, scene: SceneParameters, data_matrix):
        pairs = list(data_matrix.directed_pairs)
        counts = {data_matrix.records[p]["src_depths"].size for p in pairs}
        if len(counts) > 1:
            raise ValueError(f"unequal per-pair record counts: {sorted(counts)}")
        self.per_pair = counts.pop() if counts else 0
        self.pair_slices = {}
        src_idx, dst_idx, src_px, dst_px, depths = [], [], [], [], []
        for k, (i, j) in enumerate(pairs):
            rec = data_matrix.records[(i, j)]
            src_idx.append(scene.index[i])
            dst_idx.append(scene.index[j])
            src_px.append(rec["src_pixels"])
            dst_px.append(rec["dst_pixels"])
            depths.append(rec["src_depths"])
            self.pair_slices[(i, j)] = slice(k * self.per_pair, (k + 1) * self.per_pair)
        self.count = len(pairs) * self.per_pair

        def stack(parts, cols=None):
            if not parts:
                shape = (0, self.per_pair) if cols is None else (0, self.per_pair, cols)
                return torch.zeros(shape, dtype=_DT)
            return torch.as_tensor(np.stack(parts), dtype=_DT)

        self.src_idx = torch.as_tensor(src_idx, dtype=torch.long)
        self.dst_idx = torch.as_tensor(dst_idx, dtype=torch.long)
        self.src_px = stack(src_px, cols=2)
        self.dst_px = stack(dst_px, cols=2)
        self.depths = stack(depths)
        # principal points are never trainable, so pixel centering is constant
        self.src_centered = self.src_px - scene.pp[self.src_idx][:, None, :]
        self.dst_centered = self.dst_px - scene.pp[self.dst_idx][:, None, :]

    def indices_for_pairs(self, pairs):
        idx = [np.arange(s.start, s.stop) for p in pairs if (s := self.pair_slices.get(p))]
        if not idx:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(idx)


def compute_residuals(scene: SceneParameters, packed: PackedRecords):
    """All projective residuals (pixels) for the packed records; +inf = invalid.

    Differentiable through every scene parameter; invalid records are
    detached (their gradient is exactly zero). Output is flat, pair-major,
    matching `indices_for_pairs`.
    """
    rotations = rotation_from_6d_torch(scene.rot6d)
    focal = scene.focal_per_frame()
    alpha = torch.exp(scene.log_alpha)

    si, di = packed.src_idx, packed.dst_idx  # (p,)
    corrected = alpha[si][:, None] * packed.depths + scene.beta[si][:, None]
    valid_depth = corrected > DEPTH_FLOOR
    safe_depth = torch.where(valid_depth, corrected, torch.ones_like(corrected))

    # fold both camera poses into one per-pair relative transform:
    # p_dst = R_rel p_src + t_off, with p_src = depth * (x/f, y/f, 1)
    r_src, r_dst = rotations[si], rotations[di]
    r_rel = r_dst @ r_src.transpose(1, 2)
    t_off = scene.trans[di] - (r_rel @ scene.trans[si][:, :, None]).squeeze(-1)
    dirs = packed.src_centered @ r_rel[:, :, :2].transpose(1, 2)
    dirs = dirs / focal[si][:, None, None] + r_rel[:, :, 2][:, None, :]
    p_dst = safe_depth[:, :, None] * dirs + t_off[:, None, :]

    z = p_dst[:, :, 2]
    valid = valid_depth & (z > Z_FLOOR)
    safe_z = torch.where(valid, z, torch.ones_like(z))
    diff = focal[di][:, None, None] * p_dst[:, :, :2] / safe_z[:, :, None] - packed.dst_centered
    # tiny epsilon keeps the norm differentiable at exactly zero
    dist = torch.sqrt((diff**2).sum(dim=2) + 1e-24)
    inf = torch.full_like(dist, float("inf"))
    return torch.where(valid, dist, inf).reshape(-1)


class _MbaSurrogate(torch.autograd.Function):
    """Minimization form of the distribution loss: sum F(r) / norm, gradient
    p(r) / norm, truncated at tau_max.

    Gradient descent then shrinks each residual at a rate proportional to its
    density, which is what maximizes the marginalized inlier score; rare
    (outlier) residuals receive vanishing gradient. The score-convention
    value is the negative of this forward.
    """

    @staticmethod
    def forward(ctx, residuals, hist: ResidualHistogram, normalizer: float):
        r = residuals.detach().numpy()
        active = np.isfinite(r) & (r < hist.tau_max)
        loss = 0.0
        grad = np.zeros_like(r)
        if np.any(active):
            loss = float(np.sum(cdf_at(hist, r[active]))) / normalizer
            grad[active] = pdf_at(hist, r[active]) / normalizer
        ctx.save_for_backward(torch.as_tensor(grad, dtype=residuals.dtype))
        return residuals.new_tensor(loss)

    @staticmethod
    def backward(ctx, grad_output):
        (grad,) = ctx.saved_tensors
        return grad_output * grad, None, None


def mba_surrogate(residuals, hist, normalizer):
    return _MbaSurrogate.apply(residuals, hist, float(normalizer))
