"""Self-supervised plane-sweep depth estimation.

A variance cost volume is built over D fronto-parallel planes, regularised
slice by slice with a small 2-D residual stack (a stand-in for a 3-D CNN),
turned into a probability volume with a softmax over depth, and reduced to
depth by soft argmin.  The per-pixel quality is the probability mass of
the four hypotheses around the regressed depth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Conv2d, Module, ResBlockStack, Tensor, as_tensor, ops
from .geometry import bilinear_sample


@dataclass
class DepthNetConfig:
    D: int = 128
    d_min: float = 0.1
    d_max: float = 10.0
    reg_blocks: int = 2
    reg_channels: int = 4
    feature_channels: int = 8
    init_sharpness: float = 50.0

    def __post_init__(self):
        if not (self.d_min > 0 and self.d_max > self.d_min):
            raise ValueError(f"invalid depth range [{self.d_min}, {self.d_max}]")
        if self.D < 2:
            raise ValueError("need at least two depth hypotheses")

    def hypotheses(self):
        return np.linspace(self.d_min, self.d_max, self.D)


class DepthNet(Module):
    """Matching features plus the per-slice cost regulariser."""

    def __init__(self, config, rng):
        self.config = config
        self.feat = Conv2d(3, config.feature_channels, rng)
        self.reg_head = Conv2d(1, config.reg_channels, rng)
        self.reg_body = ResBlockStack(config.reg_blocks, config.reg_channels, rng)
        self.reg_tail = Conv2d(config.reg_channels, 1, rng, zero_init=True)
        self.log_sharpness = Tensor(np.log([config.init_sharpness]), requires_grad=True)

    def features(self, image):
        image = as_tensor(image)
        return ops.concat([image, ops.leaky_relu(self.feat(image))], axis=-1)


def plane_sweep_coords(ref_cam, src_cam, depths):
    """Source-image coordinates of every reference pixel on every plane, (D, H*W)."""
    rays = ref_cam.rays()
    R_rel = src_cam.R @ ref_cam.R.T
    t_rel = src_cam.t - R_rel @ ref_cam.t
    a = rays @ R_rel.T
    x = depths[:, None, None] * a[None] + t_rel[None, None, :]
    z = x[..., 2]
    front = z > 1e-9
    zs = np.where(front, z, 1.0)
    u = src_cam.fx * x[..., 0] / zs + src_cam.cx
    v = src_cam.fy * x[..., 1] / zs + src_cam.cy
    u = np.where(front, u, -1e6)
    v = np.where(front, v, -1e6)
    return u, v


def build_cost_volume(ref_feats, src_feats, ref_cam, src_cams, config):
    """Variance of the features across views, averaged over channels; (H, W, D)."""
    if len(src_feats) < 1:
        raise ValueError("cost volume needs at least 2 views")
    ref_feats = as_tensor(ref_feats)
    H, W, C = ref_feats.shape
    D = config.D
    depths = config.hypotheses()
    n_views = 1 + len(src_feats)
    ref_b = ops.broadcast_to(ops.reshape(ref_feats, (1, H * W, C)), (D, H * W, C))
    total = ref_b
    total_sq = ref_b * ref_b
    for feats, cam in zip(src_feats, src_cams):
        u, v = plane_sweep_coords(ref_cam, cam, depths)
        warped, _ = bilinear_sample(feats, u, v)
        total = total + warped
        total_sq = total_sq + warped * warped
    mean = total * (1.0 / n_views)
    var = total_sq * (1.0 / n_views) - mean * mean
    cost = ops.mean(var, axis=-1)
    return ops.transpose(ops.reshape(cost, (D, H, W)), (1, 2, 0))


def regress_depth(cost, config, net):
    """Regularise, softmax over depth of the negated cost, soft argmin.

    Returns the (H, W) depth tensor and the (H, W, D) probability volume.
    """
    cost = as_tensor(cost)
    H, W, D = cost.shape
    slices = ops.reshape(ops.transpose(cost, (2, 0, 1)), (D, H, W, 1))
    hidden = ops.relu(net.reg_head(slices))
    reg = slices + net.reg_tail(net.reg_body(hidden))
    reg = ops.transpose(ops.reshape(reg, (D, H, W)), (1, 2, 0))
    sharp = ops.reshape(ops.exp(net.log_sharpness), (1, 1, 1))
    logits = -(reg * ops.broadcast_to(sharp, (H, W, D)))
    prob = ops.softmax(logits, axis=-1)
    return soft_argmin(prob, config), prob


def soft_argmin(prob, config):
    prob = as_tensor(prob)
    H, W, D = prob.shape
    depths = Tensor(np.broadcast_to(config.hypotheses(), (H, W, D)).copy())
    return ops.sum(prob * depths, axis=-1)


def probability_map(prob, depth, config):
    """Probability mass of the four hypotheses nearest the regressed depth.

    The window is ``[k-1, k+2]`` around ``k = floor(index(depth))``, clipped
    to the valid range.
    """
    prob = as_tensor(prob)
    H, W, D = prob.shape
    d = np.clip(np.asarray(as_tensor(depth).data, dtype=np.float64), config.d_min, config.d_max)
    step = (config.d_max - config.d_min) / (D - 1)
    k = np.floor((d - config.d_min) / step + 1e-9).astype(np.int64)
    k = np.clip(k, 0, D - 1)
    flat = ops.reshape(prob, (H * W * D,))
    base = (np.arange(H * W) * D).reshape(H, W)
    total = None
    for off in (-1, 0, 1, 2):
        idx = k + off
        ok = (idx >= 0) & (idx < D)
        gathered = ops.take(flat, (base + np.clip(idx, 0, D - 1)).reshape(-1))
        term = ops.reshape(gathered, (H, W)) * Tensor(ok.astype(float))
        total = term if total is None else total + term
    return total


def estimate_depth(images, cams, ref_index, net, config):
    """Depth, probability volume and quality map for view ``ref_index``."""
    feats = [net.features(img) for img in images]
    others = [i for i in range(len(images)) if i != ref_index]
    cost = build_cost_volume(feats[ref_index], [feats[i] for i in others], cams[ref_index],
                             [cams[i] for i in others], config)
    depth, prob = regress_depth(cost, config, net)
    return depth, prob, probability_map(prob, depth, config)
