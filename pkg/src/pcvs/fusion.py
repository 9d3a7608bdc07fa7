"""Learned KNN fusion of sub-point clouds into one unified cloud.

For every anchor sampled from the union of the sub-clouds, the K nearest
union points are embedded (relative offset, distance, optional depth
quality, descriptor cosine similarity), two MLPs score each neighbour,
and a per-head softmax over the K scores gives convex weights for the
fused position and the fused descriptor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import MLP, MlpSpec, Module, Tensor, as_tensor, ops
from .cloud import (
    KdTree,
    SubPointCloud,
    anchor_count,
    build_descriptor,
    sample_anchors,
    union,
)

__all__ = [
    "FusionConfig", "FusionNet", "FusionWeights", "NeighborEmbedding", "UnifiedPointCloud",
    "build_descriptor", "build_embedding", "cascade_fuse", "fuse_clouds", "fuse_neighborhood",
    "neighbor_embeddings", "passthrough_union", "predict_weights",
]


@dataclass
class FusionConfig:
    K: int = 8
    anchor_ratio: float = 1.1
    use_quality: bool = False
    hidden: tuple = (32, 32, 32)
    # drop the relative offset from the embedding (rotation-invariant variant)
    rotation_invariant: bool = False

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.anchor_ratio <= 0:
            raise ValueError("anchor_ratio must be positive")

    @property
    def embedding_dim(self):
        return (2 if self.rotation_invariant else 5) + (1 if self.use_quality else 0)


@dataclass
class NeighborEmbedding:
    offset: np.ndarray
    distance: float
    similarity: float
    quality: float | None = None

    def as_vector(self):
        head = [*self.offset, self.distance]
        if self.quality is not None:
            head.append(self.quality)
        return np.array(head + [self.similarity])


@dataclass
class FusionWeights:
    position: Tensor
    descriptor: Tensor


@dataclass
class UnifiedPointCloud:
    positions: Tensor
    descriptors: Tensor
    quality: Tensor | None = None
    anchor_index: np.ndarray | None = None
    neighbor_index: np.ndarray | None = None
    weights: FusionWeights | None = None
    passes: int = 1
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return self.positions.shape[0]

    @property
    def colors(self):
        return self.descriptors.data[:, :3]


def _cosine(a, b):
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def build_embedding(anchor, neighbor, anchor_descriptor, neighbor_descriptor, quality=None):
    """Embedding of one neighbour relative to its anchor (plain arrays)."""
    offset = np.asarray(neighbor, dtype=np.float64) - np.asarray(anchor, dtype=np.float64)
    return NeighborEmbedding(
        offset=offset,
        distance=float(np.linalg.norm(offset)),
        similarity=_cosine(np.asarray(neighbor_descriptor, dtype=np.float64),
                           np.asarray(anchor_descriptor, dtype=np.float64)),
        quality=None if quality is None else float(quality),
    )


def neighbor_embeddings(anchor_pos, nbr_pos, anchor_desc, nbr_desc, nbr_quality=None,
                        rotation_invariant=False):
    """Batched embeddings, shape (M, K, E); order is (dx, d, [p], s).

    anchor_pos (M, 3), nbr_pos (M, K, 3), anchor_desc (M, C), nbr_desc (M, K, C),
    nbr_quality (M, K) or None.
    """
    M, K, _ = nbr_pos.shape
    C = nbr_desc.shape[-1]
    offset = nbr_pos - ops.broadcast_to(ops.reshape(anchor_pos, (M, 1, 3)), (M, K, 3))
    dist = ops.sqrt(ops.clamp_min(ops.sum(ops.square(offset), axis=-1, keepdims=True), 1e-24))
    # exact zero distance: report 0 rather than sqrt(1e-24)
    dist = dist * Tensor((dist.data > 1e-12).astype(float))
    a = ops.broadcast_to(ops.reshape(anchor_desc, (M, 1, C)), (M, K, C))
    dot = ops.sum(a * nbr_desc, axis=-1, keepdims=True)
    na2 = ops.sum(ops.square(a), axis=-1, keepdims=True)
    nb2 = ops.sum(ops.square(nbr_desc), axis=-1, keepdims=True)
    zero = (na2.data <= 0) | (nb2.data <= 0)
    denom = ops.sqrt(na2 * nb2 + Tensor(zero.astype(float)))
    sim = dot / denom
    parts = [dist] if rotation_invariant else [offset, dist]
    if nbr_quality is not None:
        parts.append(ops.reshape(nbr_quality, (M, K, 1)))
    parts.append(sim)
    return ops.concat(parts, axis=-1)


class FusionNet(Module):
    """The two weight predictors: one for positions, one for descriptors."""

    def __init__(self, config, rng):
        widths = (config.embedding_dim, *config.hidden, 1)
        self.position_mlp = MLP(MlpSpec(widths, "leaky_relu"), rng)
        self.descriptor_mlp = MLP(MlpSpec(widths, "leaky_relu"), rng)
        self.config = config


def predict_weights(embeddings, net):
    """Softmax-normalised weights per anchor for both heads; embeddings (M, K, E)."""
    embeddings = as_tensor(embeddings)
    M, K, E = embeddings.shape
    flat = ops.reshape(embeddings, (M * K, E))
    logits_p = ops.reshape(net.position_mlp(flat), (M, K))
    logits_f = ops.reshape(net.descriptor_mlp(flat), (M, K))
    return FusionWeights(ops.softmax(logits_p, axis=1), ops.softmax(logits_f, axis=1))


def fuse_neighborhood(nbr_pos, nbr_desc, weights):
    """Weighted sums over the K neighbours: positions (M, 3), descriptors (M, C)."""
    nbr_pos = as_tensor(nbr_pos)
    nbr_desc = as_tensor(nbr_desc)
    M, K, _ = nbr_pos.shape
    C = nbr_desc.shape[-1]
    wp = ops.broadcast_to(ops.reshape(weights.position, (M, K, 1)), (M, K, 3))
    wf = ops.broadcast_to(ops.reshape(weights.descriptor, (M, K, 1)), (M, K, C))
    return ops.sum(wp * nbr_pos, axis=1), ops.sum(wf * nbr_desc, axis=1)


def _fuse_union(pu, M, config, net, rng, anchors=None):
    if anchors is None:
        anchors = sample_anchors(len(pu), M, rng=rng).indices
    K = min(config.K, len(pu))
    tree = KdTree(pu.positions.data)
    nbr_idx, _ = tree.query(pu.positions.data[anchors], K)
    anchor_pos = ops.take(pu.positions, anchors)
    anchor_desc = ops.take(pu.descriptors, anchors)
    nbr_pos = ops.take(pu.positions, nbr_idx)
    nbr_desc = ops.take(pu.descriptors, nbr_idx)
    nbr_q = None
    if config.use_quality:
        if pu.quality is None:
            raise ValueError("use_quality is set but the sub-clouds carry no quality")
        nbr_q = ops.take(pu.quality, nbr_idx)
    emb = neighbor_embeddings(anchor_pos, nbr_pos, anchor_desc, nbr_desc, nbr_q,
                              rotation_invariant=config.rotation_invariant)
    weights = predict_weights(emb, net)
    pos, desc = fuse_neighborhood(nbr_pos, nbr_desc, weights)
    quality = None
    if pu.quality is not None:
        quality = ops.sum(weights.position * ops.take(pu.quality, nbr_idx), axis=1)
    return UnifiedPointCloud(pos, desc, quality, anchors, nbr_idx, weights)


def _unified_as_sub(cloud):
    return SubPointCloud(cloud.positions, cloud.colors, cloud.descriptors, cloud.quality, -1,
                         np.arange(len(cloud)))


def fuse_clouds(subclouds, config, net, image_size, seed=None, rng=None, anchors=None):
    """Union -> anchors -> KNN -> embeddings -> weights -> fused cloud.

    ``subclouds`` may mix :class:`SubPointCloud` and already fused clouds.
    ``image_size`` is (H, W) of the source views; the anchor count is
    ``anchor_ratio * H * W`` capped at the union size.  ``anchors`` fixes
    the anchor indices explicitly.
    """
    parts = [_unified_as_sub(c) if isinstance(c, UnifiedPointCloud) else c for c in subclouds]
    if not parts:
        raise ValueError("fuse_clouds needs at least one sub-cloud")
    pu = union(parts)
    H, W = image_size
    M = anchor_count(config.anchor_ratio, H, W, len(pu)) if anchors is None else len(anchors)
    gen = rng if rng is not None else np.random.default_rng(seed)
    return _fuse_union(pu, M, config, net, gen, anchors)


def cascade_fuse(subclouds, config, net, image_size, seed=None, rng=None):
    """Fuse the first three sub-clouds, then fold in each remaining one."""
    subclouds = list(subclouds)
    gen = rng if rng is not None else np.random.default_rng(seed)
    if len(subclouds) < 4:
        return fuse_clouds(subclouds, config, net, image_size, rng=gen)
    current = fuse_clouds(subclouds[:3], config, net, image_size, rng=gen)
    passes = 1
    for extra in subclouds[3:]:
        current = fuse_clouds([_unified_as_sub(current), extra], config, net, image_size, rng=gen)
        passes += 1
    current.passes = passes
    return current


def passthrough_union(subclouds):
    """No-fusion path: the raw union, re-labelled as a unified cloud."""
    pu = union(list(subclouds))
    return UnifiedPointCloud(pu.positions, pu.descriptors, pu.quality,
                             anchor_index=np.arange(len(pu)), passes=0)
