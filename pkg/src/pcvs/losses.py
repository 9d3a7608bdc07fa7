"""Training objectives and image-quality metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, make_node, no_grad, ops
from .autodiff.nn import glorot_uniform

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
PSNR_CAP = 99.0


@dataclass(frozen=True)
class DepthLossWeights:
    self_term: float = 12.0
    ssim_term: float = 6.0
    smooth_term: float = 0.18


class PerceptualSurrogate:
    """Fixed random feature pyramid standing in for pretrained VGG layers.

    Five stride-2 3x3 conv stages with ReLU.  Kernels are zero-mean and the
    borders are edge-replicated, so a constant offset of the input leaves
    every stage unchanged.  Stage ``l`` is weighted by 1 / (C_l H_l W_l).
    """

    def __init__(self, seed=0, channels=(8, 16, 32, 32, 32)):
        rng = np.random.default_rng(seed)
        self.seed = seed
        self.kernels = []
        c_in = 3
        for c_out in channels:
            w = glorot_uniform(rng, (3, 3, c_in, c_out), 9 * c_in, 9 * c_out)
            w -= w.mean(axis=(0, 1, 2), keepdims=True)
            self.kernels.append(w)
            c_in = c_out

    def features(self, image):
        x = as_tensor(image)
        outs = []
        for w in self.kernels:
            x = ops.relu(ops.conv2d(x, Tensor(w), None, stride=2, padding="edge"))
            outs.append(x)
        return outs

    @staticmethod
    def stage_weights(features):
        return [1.0 / f.size for f in features]


def _check_same(op, a, b):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def photometric_loss(pred, target, perceptual):
    """Mean L1 plus the weighted L1 distance of the pyramid features."""
    pred = as_tensor(pred)
    target = as_tensor(target)
    _check_same("photometric_loss", pred, target)
    loss = ops.mean(ops.abs(pred - target))
    with no_grad():
        target_feats = perceptual.features(target)
    pred_feats = perceptual.features(pred)
    for lam, fp, ft in zip(perceptual.stage_weights(pred_feats), pred_feats, target_feats):
        loss = loss + ops.sum(ops.abs(fp - ft)) * lam
    return loss


def total_photometric(coarse, inpainted, final, target, perceptual):
    return (photometric_loss(coarse, target, perceptual)
            + photometric_loss(inpainted, target, perceptual)
            + photometric_loss(final, target, perceptual))


def depth_self_loss(image, warped, masks):
    """Masked L1 between a view and the images warped onto it.

    Each term is averaged over its valid pixels (and channels); a term
    whose mask is empty contributes zero.
    """
    image = as_tensor(image)
    C = image.shape[-1]
    total = Tensor(0.0)
    for w, m in zip(warped, masks):
        m = np.asarray(m, dtype=np.float64)
        count = m.sum()
        if count == 0:
            continue
        m3 = Tensor(np.repeat(m[..., None], C, axis=-1))
        total = total + ops.sum(ops.abs((image - w) * m3)) * (1.0 / (count * C))
    return total


def _gaussian_1d(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _band(n, g):
    k = len(g)
    out = np.zeros((n - k + 1, n))
    for i in range(n - k + 1):
        out[i, i:i + k] = g
    return out


def gaussian_filter(x, size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    """Separable Gaussian window over an (H, W, C) tensor, 'valid' extent."""
    x = as_tensor(x)
    H, W, _ = x.shape
    if H < size or W < size:
        raise ValueError(f"image {H}x{W} smaller than the {size}x{size} window")
    g = _gaussian_1d(size, sigma)
    Ah = _band(H, g).astype(x.dtype)
    Aw = _band(W, g).astype(x.dtype)
    out = np.einsum("ih,hwc,jw->ijc", Ah, x.data, Aw, optimize=True)

    def bw(grad):
        return (np.einsum("ih,ijc,jw->hwc", Ah, grad, Aw, optimize=True),)

    return make_node(out, (x,), bw, "gaussian_filter")


def ssim(x, y):
    """Mean SSIM over the valid window positions and channels."""
    x = as_tensor(x)
    y = as_tensor(y)
    _check_same("ssim", x, y)
    mu_x = gaussian_filter(x)
    mu_y = gaussian_filter(y)
    sxx = gaussian_filter(x * x) - mu_x * mu_x
    syy = gaussian_filter(y * y) - mu_y * mu_y
    sxy = gaussian_filter(x * y) - mu_x * mu_y
    num = (mu_x * mu_y * 2.0 + SSIM_C1) * (sxy * 2.0 + SSIM_C2)
    den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (sxx + syy + SSIM_C2)
    return ops.mean(num / den)


def ssim_loss(x, y, mask=None):
    """(1 - SSIM(M*X, M*Y)) / 2, in [0, 1]."""
    x = as_tensor(x)
    y = as_tensor(y)
    if mask is not None:
        m = Tensor(np.repeat(np.asarray(mask, dtype=np.float64)[..., None], x.shape[-1], axis=-1))
        x = x * m
        y = y * m
    return (1.0 - ssim(x, y)) * 0.5


def smoothness_loss(depth):
    """Mean over pixels of |forward dx| + |forward dy| (zero on the last row/column)."""
    depth = as_tensor(depth)
    H, W = depth.shape
    gx = ops.sum(ops.abs(depth[:, 1:] - depth[:, :-1]))
    gy = ops.sum(ops.abs(depth[1:, :] - depth[:-1, :]))
    return (gx + gy) * (1.0 / (H * W))


def total_depth_loss(per_view_terms, weights=DepthLossWeights()):
    """Sum over views of the weighted (self, ssim, smooth) terms."""
    total = 0.0
    for self_term, ssim_term, smooth_term in per_view_terms:
        total = (total + self_term * weights.self_term + ssim_term * weights.ssim_term
                 + smooth_term * weights.smooth_term)
    return total


def total_loss(render_loss, depth_loss, mode):
    if mode in ("depth", "depth-given"):
        return render_loss
    if mode in ("selfdepth", "self-estimated"):
        return render_loss + depth_loss
    raise ValueError(f"unknown mode {mode!r}")


# -- metrics --------------------------------------------------------------------

def psnr(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    mse = float(np.mean((pred - target) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def ssim_metric(pred, target):
    with no_grad():
        return float(ssim(np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)).data)


def metrics(pred, target):
    return psnr(pred, target), ssim_metric(pred, target)
