"""Pinhole cameras, pixel <-> world mapping and depth-guided backward warping.

Conventions: pixel centres sit on integer coordinates, ``u`` is the column
and ``v`` the row, the image origin is top-left, camera +z looks forward
and +y points down.  Poses are world-to-camera: ``x_cam = R @ X + t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .autodiff import Tensor, as_tensor, make_node, ops

Z_EPS = 1e-9


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    width: int = 0
    height: int = 0

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if np.abs(self.R.T @ self.R - np.eye(3)).max() > 1e-6:
            raise ValueError("rotation matrix is not orthonormal")

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def world_to_camera(self):
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    @property
    def center(self):
        return -self.R.T @ self.t

    @classmethod
    def from_matrices(cls, K, world_to_camera, width=0, height=0):
        K = np.asarray(K, dtype=np.float64).reshape(3, 3)
        T = np.asarray(world_to_camera, dtype=np.float64).reshape(4, 4)
        return cls(K[0, 0], K[1, 1], K[0, 2], K[1, 2], T[:3, :3], T[:3, 3], int(width), int(height))

    @classmethod
    def look_at(cls, eye, target, fx, fy, cx, cy, width=0, height=0, up=(0.0, -1.0, 0.0)):
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        return cls(fx, fy, cx, cy, R, -R @ eye, width, height)

    def with_size(self, width, height):
        return Camera(self.fx, self.fy, self.cx, self.cy, self.R, self.t, width, height)

    def pixel_grid(self):
        """(H*W, 2) array of (u, v) pixel centres in row-major order."""
        v, u = np.mgrid[0:self.height, 0:self.width]
        return np.stack([u.ravel(), v.ravel()], axis=1).astype(np.float64)

    def rays(self):
        """Camera-space rays K^-1 (u, v, 1) for every pixel, shape (H*W, 3)."""
        uv = self.pixel_grid()
        return np.stack([(uv[:, 0] - self.cx) / self.fx, (uv[:, 1] - self.cy) / self.fy,
                         np.ones(len(uv))], axis=1)


def unproject(pixel, depth, cam):
    """World point(s) seen at pixel(s) ``(u, v)`` with camera-z ``depth``."""
    pixel = np.asarray(pixel, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise ValueError("unproject needs positive depth")
    depth = np.broadcast_to(depth, pixel.shape[:-1])
    u = pixel[..., 0]
    v = pixel[..., 1]
    x_cam = np.stack([(u - cam.cx) / cam.fx * depth, (v - cam.cy) / cam.fy * depth, depth], axis=-1)
    return (x_cam - cam.t) @ cam.R


def project(points, cam):
    """Project world points; returns ``(uv, z, valid)`` with valid = z > eps."""
    points = np.asarray(points, dtype=np.float64)
    x_cam = points @ cam.R.T + cam.t
    z = x_cam[..., 2]
    valid = z > Z_EPS
    z_safe = np.where(np.abs(z) < Z_EPS, 1.0, z)
    u = cam.fx * x_cam[..., 0] / z_safe + cam.cx
    v = cam.fy * x_cam[..., 1] / z_safe + cam.cy
    return np.stack([u, v], axis=-1), z, valid


# -- differentiable counterparts ---------------------------------------------

def to_camera(points, cam):
    """Tensor (N, 3) of world points -> camera coordinates."""
    points = as_tensor(points)
    R = Tensor(cam.R.T)
    t = ops.broadcast_to(Tensor(cam.t), points.shape)
    return points @ R + t


def unproject_depth(depth, cam):
    """Differentiable unprojection of an (H, W) depth tensor to (H*W, 3) world points."""
    depth = as_tensor(depth)
    n = cam.height * cam.width
    if depth.shape != (cam.height, cam.width):
        raise ValueError(f"depth shape {depth.shape} does not match camera {(cam.height, cam.width)}")
    d = ops.broadcast_to(ops.reshape(depth, (n, 1)), (n, 3))
    x_cam = d * Tensor(cam.rays())
    return (x_cam - ops.broadcast_to(Tensor(cam.t), (n, 3))) @ Tensor(cam.R)


def project_points(points, cam):
    """Differentiable projection; returns tensors ``u, v, z`` and a validity mask.

    Points with z <= eps get a substitute denominator so their (masked)
    outputs stay finite.
    """
    x_cam = to_camera(points, cam)
    x, y, z = x_cam[:, 0], x_cam[:, 1], x_cam[:, 2]
    valid = z.data > Z_EPS
    fix = Tensor(np.where(valid, 0.0, 1.0 - z.data))
    z_safe = z + fix
    u = x / z_safe * cam.fx + cam.cx
    v = y / z_safe * cam.fy + cam.cy
    return u, v, z, valid


def _bilinear_taps(u, v, H, W):
    inside = (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
    x0 = np.clip(np.floor(u), 0, max(W - 2, 0)).astype(np.int64)
    y0 = np.clip(np.floor(v), 0, max(H - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    ax = np.where(inside, u - x0, 0.0)
    ay = np.where(inside, v - y0, 0.0)
    return inside, x0, x1, y0, y1, ax, ay


def bilinear_sample(image, u, v):
    """Sample an (H, W, C) image at float pixel coordinates.

    ``u`` and ``v`` are arrays or tensors of identical shape.  Returns the
    samples (shape ``u.shape + (C,)``) and a boolean mask that is False when
    any tap with non-zero weight would fall outside the image; masked
    samples are zero.  Gradients flow to the image and to tensor coords.
    """
    image = as_tensor(image)
    H, W, C = image.shape
    u_t = u if isinstance(u, Tensor) else None
    v_t = v if isinstance(v, Tensor) else None
    u_np = np.asarray(u.data if u_t is not None else u, dtype=np.float64)
    v_np = np.asarray(v.data if v_t is not None else v, dtype=np.float64)
    if u_np.shape != v_np.shape:
        raise ValueError(f"coordinate shapes differ: {u_np.shape} vs {v_np.shape}")
    out_shape = u_np.shape
    uf, vf = u_np.reshape(-1), v_np.reshape(-1)
    inside, x0, x1, y0, y1, ax, ay = _bilinear_taps(uf, vf, H, W)
    n = uf.size
    w00 = (1 - ax) * (1 - ay) * inside
    w01 = ax * (1 - ay) * inside
    w10 = (1 - ax) * ay * inside
    w11 = ax * ay * inside
    rows = np.tile(np.arange(n), 4)
    cols = np.concatenate([y0 * W + x0, y0 * W + x1, y1 * W + x0, y1 * W + x1])
    vals = np.concatenate([w00, w01, w10, w11])
    S = sp.csr_matrix((vals, (rows, cols)), shape=(n, H * W))
    flat = image.data.reshape(H * W, C)
    out = np.asarray(S @ flat, dtype=image.dtype).reshape(out_shape + (C,))

    parents = [image]
    if u_t is not None:
        parents.append(u_t)
    if v_t is not None:
        parents.append(v_t)
    need_coords = (u_t is not None and u_t.requires_grad) or (v_t is not None and v_t.requires_grad)
    if need_coords:
        i00 = flat[y0 * W + x0]
        i01 = flat[y0 * W + x1]
        i10 = flat[y1 * W + x0]
        i11 = flat[y1 * W + x1]
        dx = ((1 - ay)[:, None] * (i01 - i00) + ay[:, None] * (i11 - i10)) * inside[:, None]
        dy = ((1 - ax)[:, None] * (i10 - i00) + ax[:, None] * (i11 - i01)) * inside[:, None]

    def bw(g):
        g2 = g.reshape(n, C)
        grads = [np.asarray(S.T @ g2, dtype=image.dtype).reshape(H, W, C) if image.requires_grad else None]
        if u_t is not None:
            grads.append((dx * g2).sum(axis=1).astype(u_t.dtype).reshape(out_shape) if need_coords else None)
        if v_t is not None:
            grads.append((dy * g2).sum(axis=1).astype(v_t.dtype).reshape(out_shape) if need_coords else None)
        return tuple(grads)

    return make_node(out, tuple(parents), bw, "bilinear_sample"), inside.reshape(out_shape)


def backward_warp(src, src_cam, tgt_cam, tgt_depth):
    """Warp a source image into the target view using the target's depth.

    Returns the warped (H, W, C) tensor and a float mask that is 1 where the
    target pixel has positive depth, lands in front of the source camera
    and projects inside the source image.  No occlusion reasoning.
    """
    tgt_depth = as_tensor(tgt_depth)
    H, W = tgt_depth.shape
    has_depth = tgt_depth.data.reshape(-1) > 0
    world = unproject_depth(tgt_depth, tgt_cam)
    u, v, z, front = project_points(world, src_cam)
    samples, inside = bilinear_sample(src, u, v)
    mask = (has_depth & front & inside).astype(samples.dtype)
    C = samples.shape[-1]
    warped = samples * Tensor(np.repeat(mask[:, None], C, axis=1))
    return ops.reshape(warped, (H, W, C)), mask.reshape(H, W)
