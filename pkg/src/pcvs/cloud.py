"""Sub-point clouds, their union, anchor sampling and exact KNN."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .autodiff import Tensor, as_tensor, ops
from .geometry import unproject_depth

FEATURE_DIM = 32
DESCRIPTOR_DIM = 3 + FEATURE_DIM


@dataclass
class SubPointCloud:
    """Points unprojected from one source view.

    ``positions``, ``descriptors`` and ``quality`` are tensors so that
    gradients can reach the encoder (and the depth network when depth is
    estimated).  ``pixel_index`` records the flat pixel each point came from.
    """

    positions: Tensor
    colors: np.ndarray
    descriptors: Tensor
    quality: Tensor | None
    source_view: int
    pixel_index: np.ndarray

    def __len__(self):
        return len(self.colors)


@dataclass
class PointUnion:
    positions: Tensor
    colors: np.ndarray
    descriptors: Tensor
    quality: Tensor | None
    origin: np.ndarray

    def __len__(self):
        return len(self.origin)


@dataclass
class AnchorSet:
    indices: np.ndarray
    seed: int | None


def build_sub_cloud(view, depth, features, quality, cam, source_view=0):
    """One point per valid-depth pixel of ``view``.

    ``view``: (H, W, 3) array; ``depth``: (H, W) array or tensor (values
    <= 0 or non-finite are invalid); ``features``: (H, W, 32) tensor;
    ``quality``: (H, W) tensor/array or None.
    """
    view = np.asarray(view)
    depth = as_tensor(depth)
    features = as_tensor(features)
    H, W = depth.shape
    if view.shape[:2] != (H, W) or features.shape[:2] != (H, W):
        raise ValueError(f"shape mismatch: view {view.shape}, depth {depth.shape}, features {features.shape}")
    valid = np.isfinite(depth.data) & (depth.data > 0)
    idx = np.flatnonzero(valid.reshape(-1))
    if idx.size == 0:
        raise ValueError("empty sub-cloud")
    safe_depth = depth if valid.all() else depth * Tensor(valid.astype(float)) + Tensor((~valid).astype(float))
    world = unproject_depth(safe_depth, cam)
    positions = ops.take(world, idx)
    colors = view.reshape(-1, 3)[idx]
    feats = ops.take(ops.reshape(features, (H * W, features.shape[-1])), idx)
    descriptors = build_descriptor(Tensor(colors), feats)
    q = None
    if quality is not None:
        q = ops.take(ops.reshape(as_tensor(quality), (H * W,)), idx)
    return SubPointCloud(positions, colors, descriptors, q, source_view, idx)


def build_descriptor(color, feature):
    """Concatenate colour (…, 3) and feature (…, 32) into a 35-wide descriptor."""
    color = as_tensor(color)
    feature = as_tensor(feature)
    if color.shape[-1] != 3 or feature.shape[-1] != FEATURE_DIM:
        raise ValueError(f"descriptor needs widths 3 and {FEATURE_DIM}, got {color.shape[-1]} and {feature.shape[-1]}")
    return ops.concat([color, feature], axis=-1)


def union(subclouds):
    if not subclouds:
        raise ValueError("union of zero sub-clouds")
    has_q = [c.quality is not None for c in subclouds]
    if any(has_q) and not all(has_q):
        raise ValueError("either all or none of the sub-clouds carry quality")
    return PointUnion(
        positions=ops.concat([c.positions for c in subclouds], axis=0),
        colors=np.concatenate([c.colors for c in subclouds], axis=0),
        descriptors=ops.concat([c.descriptors for c in subclouds], axis=0),
        quality=ops.concat([c.quality for c in subclouds], axis=0) if all(has_q) else None,
        origin=np.concatenate([np.full(len(c), c.source_view) for c in subclouds]),
    )


def sample_anchors(n_points, M, seed=None, rng=None):
    """Uniform sampling of ``M`` distinct indices out of ``n_points``."""
    n = len(n_points) if hasattr(n_points, "__len__") else int(n_points)
    if not 1 <= M <= n:
        raise ValueError(f"anchor count {M} out of range [1, {n}]")
    gen = rng if rng is not None else np.random.default_rng(seed)
    return AnchorSet(np.sort(gen.choice(n, size=M, replace=False)), seed)


def anchor_count(ratio, height, width, available):
    """``ratio`` x (H x W), capped at the number of available points."""
    return int(min(max(1, round(ratio * height * width)), available))


class KdTree:
    """Immutable 3-D index returning exact KNN, ties broken by point index."""

    def __init__(self, points):
        self.points = np.ascontiguousarray(np.asarray(points, dtype=np.float64))
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"KdTree expects (N, 3) points, got {self.points.shape}")
        self._tree = cKDTree(self.points)

    def __len__(self):
        return len(self.points)

    def query(self, queries, k):
        """Return ``(indices, distances)`` of shape (Q, k), nondecreasing distance."""
        n = len(self.points)
        if not 1 <= k <= n:
            raise ValueError(f"K={k} out of range [1, {n}]")
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        out_idx = np.empty((len(queries), k), dtype=np.int64)
        todo = np.arange(len(queries))
        kk = min(n, k + 4)
        while todo.size:
            _, cand = self._tree.query(queries[todo], k=kk)
            cand = np.asarray(cand).reshape(len(todo), kk)
            d2 = squared_distances(queries[todo], self.points[cand])
            order = np.lexsort((cand, d2), axis=-1)
            cand = np.take_along_axis(cand, order, axis=1)
            d2 = np.take_along_axis(d2, order, axis=1)
            # exact only if the k-th distance is strictly inside the candidate radius
            ok = (kk == n) | (d2[:, k - 1] < d2[:, -1] * (1.0 - 1e-9))
            out_idx[todo[ok]] = cand[ok, :k]
            todo = todo[~ok]
            kk = min(n, 2 * kk)
        dist = np.sqrt(squared_distances(queries, self.points[out_idx]))
        return out_idx, dist


def squared_distances(queries, neighbors):
    """Squared Euclidean distance between (Q, 3) queries and (Q, k, 3) neighbours."""
    diff = neighbors - queries[:, None, :]
    return (diff * diff).sum(axis=-1)


def knn(tree, anchors, K):
    return tree.query(anchors, K)


# -- PLY -----------------------------------------------------------------------

def export_ply(positions, colors, path):
    """ASCII PLY with ``x y z r g b`` vertices, colours quantised to 0-255."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    rgb = np.clip(np.round(colors * 255.0), 0, 255).astype(np.int64)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(positions)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    for p, c in zip(positions, rgb):
        lines.append(f"{p[0]:.8g} {p[1]:.8g} {p[2]:.8g} {c[0]} {c[1]} {c[2]}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_ply(path):
    """Read back what :func:`export_ply` writes; returns (positions, colors in [0,1])."""
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != "ply":
        raise ValueError(f"{path}: not a PLY file")
    end = lines.index("end_header")
    count = 0
    for line in lines[:end]:
        if line.startswith("element vertex"):
            count = int(line.split()[-1])
    body = lines[end + 1:end + 1 + count]
    if len(body) != count:
        raise ValueError(f"{path}: expected {count} vertices, found {len(body)}")
    if count == 0:
        return np.zeros((0, 3)), np.zeros((0, 3))
    rows = np.array([line.split() for line in body], dtype=np.float64)
    return rows[:, :3], rows[:, 3:6] / 255.0
