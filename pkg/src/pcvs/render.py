"""Differentiable point splatting.

Each point covers a disc of radius ``r`` pixels around its projected
centre with opacity ``1 - (dist / r)^2``.  Per pixel the ``K_pp`` nearest
(smallest camera z, ties by point index) covering points are composited
front to back over the background.  Gradients reach the attributes and
the projected centres (hence world positions); the z ordering is treated
as constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .autodiff import Tensor, as_tensor, make_node, ops
from .geometry import project_points


@dataclass
class SplatParams:
    radius: float = 1.5
    max_points_per_pixel: int = 8
    background: float = 0.0

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("splat radius must be positive")
        if self.max_points_per_pixel < 1:
            raise ValueError("max_points_per_pixel must be >= 1")


@dataclass
class RenderOutput:
    image: Tensor
    mask: np.ndarray
    opacity: np.ndarray


def _rasterize(u, v, z, valid, H, W, params):
    """Ordered per-pixel candidate lists, padded with -1.

    Every point only visits pixels inside its bounding square, which plays
    the role of a screen-space bin; the surviving (point, pixel) pairs are
    then ordered by (pixel, z, point index).
    """
    r = float(params.radius)
    K = params.max_points_per_pixel
    idx = np.flatnonzero(valid & np.isfinite(u) & np.isfinite(v))
    span = int(np.floor(2 * r)) + 2
    oy, ox = np.divmod(np.arange(span * span), span)
    px = np.floor(u[idx] - r).astype(np.int64)[:, None] + ox[None, :]
    py = np.floor(v[idx] - r).astype(np.int64)[:, None] + oy[None, :]
    dx = px - u[idx, None]
    dy = py - v[idx, None]
    d2 = dx * dx + dy * dy
    keep = (d2 < r * r) & (px >= 0) & (px < W) & (py >= 0) & (py < H)
    pts = np.broadcast_to(idx[:, None], px.shape)[keep]
    pix = (py * W + px)[keep]
    dx, dy, d2 = dx[keep], dy[keep], d2[keep]
    order = np.lexsort((pts, z[pts], pix))
    pts, pix, dx, dy, d2 = pts[order], pix[order], dx[order], dy[order], d2[order]
    first = np.r_[True, pix[1:] != pix[:-1]] if pix.size else np.zeros(0, bool)
    starts = np.flatnonzero(first)
    group = np.cumsum(first) - 1
    rank = np.arange(pix.size) - starts[group] if pix.size else np.zeros(0, np.int64)
    sel = rank < K
    pts, pix, rank, dx, dy, d2 = pts[sel], pix[sel], rank[sel], dx[sel], dy[sel], d2[sel]
    slot_pt = np.full((H * W, K), -1, dtype=np.int64)
    alpha = np.zeros((H * W, K))
    slot_pt[pix, rank] = pts
    alpha[pix, rank] = 1.0 - d2 / (r * r)
    return slot_pt, alpha, (pts, pix, rank, dx, dy)


def _splat_screen(u, v, z, valid, attrs, H, W, params):
    """Core op over screen-space centres ``u, v`` (tensors) and attributes."""
    attrs = as_tensor(attrs)
    M, C = attrs.shape
    u_np = np.asarray(u.data, dtype=np.float64)
    v_np = np.asarray(v.data, dtype=np.float64)
    slot_pt, alpha, pairs = _rasterize(u_np, v_np, np.asarray(z, dtype=np.float64), valid, H, W, params)
    K = slot_pt.shape[1]
    trans = np.empty((H * W, K))
    w = np.empty((H * W, K))
    T = np.ones(H * W)
    for j in range(K):
        trans[:, j] = T
        w[:, j] = alpha[:, j] * T
        T = T * (1.0 - alpha[:, j])
    used = slot_pt >= 0
    rows = np.broadcast_to(np.arange(H * W)[:, None], (H * W, K))[used]
    Wm = sp.csr_matrix((w[used], (rows, slot_pt[used])), shape=(H * W, M))
    bg = np.broadcast_to(np.asarray(params.background, dtype=np.float64), (C,))
    attr64 = attrs.data.astype(np.float64)
    out = Wm @ attr64 + T[:, None] * bg[None, :]
    opacity = 1.0 - T

    def bw(g):
        g = g.reshape(H * W, C).astype(np.float64)
        g_attr = (Wm.T @ g).astype(attrs.dtype) if attrs.requires_grad else None
        g_u = g_v = None
        if u.requires_grad or v.requires_grad:
            g_alpha = np.zeros((H * W, K))
            behind = np.broadcast_to(bg, (H * W, C)).copy()
            for j in range(K - 1, -1, -1):
                a_j = np.where(used[:, j:j + 1], attr64[np.maximum(slot_pt[:, j], 0)], 0.0)
                g_alpha[:, j] = trans[:, j] * np.einsum("pc,pc->p", g, a_j - behind)
                behind = alpha[:, j:j + 1] * a_j + (1.0 - alpha[:, j:j + 1]) * behind
            pts, pix, rank, dx, dy = pairs
            ga = g_alpha[pix, rank] * 2.0 / (params.radius ** 2)
            g_u = np.bincount(pts, weights=ga * dx, minlength=M).astype(u.dtype)
            g_v = np.bincount(pts, weights=ga * dy, minlength=M).astype(v.dtype)
        return g_u, g_v, g_attr

    node = make_node(out.astype(attrs.dtype).reshape(H, W, C), (u, v, attrs), bw, "splat")
    return node, opacity.reshape(H, W)


def splat(points, attrs, cam, params=None):
    """Render (M, C) point attributes into an (H, W, C) image for ``cam``."""
    params = params or SplatParams()
    points = as_tensor(points)
    attrs = as_tensor(attrs)
    if points.ndim != 2 or points.shape[1] != 3 or attrs.ndim != 2 or attrs.shape[0] != points.shape[0]:
        raise ValueError(f"splat expects (M, 3) points and (M, C) attrs, got {points.shape}, {attrs.shape}")
    H, W = cam.height, cam.width
    if points.shape[0] == 0:
        C = attrs.shape[1]
        bg = np.broadcast_to(np.asarray(params.background, dtype=np.float64), (C,))
        img = Tensor(np.broadcast_to(bg, (H, W, C)).copy())
        return RenderOutput(img, np.zeros((H, W), bool), np.zeros((H, W)))
    u, v, z, valid = project_points(points, cam)
    image, opacity = _splat_screen(u, v, z.data, valid, attrs, H, W, params)
    return RenderOutput(image, opacity > 0, opacity)


def render_depth(points, cam, params=None):
    """Camera-z map, normalised by accumulated opacity; 0 where uncovered."""
    params = params or SplatParams()
    points = as_tensor(points)
    H, W = cam.height, cam.width
    if points.shape[0] == 0:
        return Tensor(np.zeros((H, W))), np.zeros((H, W), bool)
    u, v, z, valid = project_points(points, cam)
    attrs = ops.concat([ops.reshape(z, (-1, 1)), Tensor(np.ones((points.shape[0], 1)))], axis=1)
    zero_bg = SplatParams(params.radius, params.max_points_per_pixel, 0.0)
    image, opacity = _splat_screen(u, v, z.data, valid, attrs, H, W, zero_bg)
    mask = opacity > 0
    acc = image[:, :, 1] + Tensor((~mask).astype(float))
    depth = image[:, :, 0] / acc
    return depth, mask


def brute_force_reference(points, attrs, cam, params=None, depth=False):
    """Pixel-by-pixel evaluation of the same splatting model (test oracle).

    With ``depth=True`` the attribute is camera z and the result is
    normalised by accumulated opacity, mirroring :func:`render_depth`.
    Returns numpy arrays ``(image, mask, opacity)``.
    """
    params = params or SplatParams()
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    H, W = cam.height, cam.width
    x_cam = points @ cam.R.T + cam.t
    z = x_cam[:, 2]
    if depth:
        attrs = z[:, None]
        bg = np.zeros(1)
    else:
        attrs = np.asarray(attrs, dtype=np.float64).reshape(len(points), -1)
        bg = np.broadcast_to(np.asarray(params.background, dtype=np.float64), (attrs.shape[1],))
    C = attrs.shape[1]
    front = z > 1e-9
    zs = np.where(front, z, 1.0)
    u = cam.fx * x_cam[:, 0] / zs + cam.cx
    v = cam.fy * x_cam[:, 1] / zs + cam.cy
    r2 = params.radius ** 2
    image = np.zeros((H, W, C))
    opacity = np.zeros((H, W))
    for py in range(H):
        for px in range(W):
            d2 = (px - u) ** 2 + (py - v) ** 2
            cand = np.flatnonzero(front & (d2 < r2))
            cand = sorted(cand.tolist(), key=lambda i: (z[i], i))[:params.max_points_per_pixel]
            T = 1.0
            acc = np.zeros(C)
            for i in cand:
                a = 1.0 - d2[i] / r2
                acc += T * a * attrs[i]
                T *= 1.0 - a
            opacity[py, px] = 1.0 - T
            if depth:
                image[py, px] = acc / (1.0 - T) if T < 1.0 else 0.0
            else:
                image[py, px] = acc + T * bg
    return image, opacity > 0, opacity
