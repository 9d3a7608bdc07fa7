"""The full view-synthesis model and its forward pass.

encode -> sub-clouds -> [depth estimation] -> fuse (or plain union) ->
splat descriptors -> hole filling -> render depth -> warp sources -> refine
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from .autodiff import Module, Tensor, as_tensor
from .cloud import build_sub_cloud
from .depthnet import DepthNet, DepthNetConfig, estimate_depth
from .fusion import FusionConfig, FusionNet, cascade_fuse, fuse_clouds, passthrough_union
from .geometry import backward_warp
from .losses import (
    DepthLossWeights,
    depth_self_loss,
    photometric_loss,
    smoothness_loss,
    ssim_loss,
    total_depth_loss,
    total_loss,
)
from .render import SplatParams, render_depth, splat
from .restore import FeatureEncoder, fill_holes, hole_filler, refine, refiner

MODES = {"depth": "depth", "depth-given": "depth", "selfdepth": "selfdepth", "self-estimated": "selfdepth"}

# checkpoint prefixes of the parameter groups
GROUPS = {
    "encoder": "encoder.",
    "position": "fusion.position_mlp.",
    "descriptor": "fusion.descriptor_mlp.",
    "hole": "hole.",
    "refine": "refiner.",
    "depth": "depth.",
}


@dataclass
class ModelConfig:
    n_views: int = 2
    mode: str = "depth"
    K: int = 8
    anchor_ratio: float = 1.1
    splat_radius: float = 1.5
    points_per_pixel: int = 8
    restore_channels: int = 32
    hole_blocks: int = 6
    refine_blocks: int = 4
    refine_masks: bool = True
    encoder_width: int = 16
    depth_planes: int = 128
    depth_min: float = 0.1
    depth_max: float = 10.0
    use_fusion: bool = True
    use_inpaint: bool = True
    use_refine: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r} (expected depth or selfdepth)")
        self.mode = MODES[self.mode]
        if self.n_views < 1:
            raise ValueError("need at least one source view")
        if self.mode == "selfdepth" and self.n_views < 2:
            raise ValueError("self-estimated depth needs at least two source views")

    @property
    def fusion(self):
        return FusionConfig(K=self.K, anchor_ratio=self.anchor_ratio, use_quality=self.mode == "selfdepth")

    @property
    def splat(self):
        return SplatParams(self.splat_radius, self.points_per_pixel, 0.0)

    @property
    def depthnet(self):
        return DepthNetConfig(D=self.depth_planes, d_min=self.depth_min, d_max=self.depth_max)

    def with_depth_range(self, depth_range):
        return replace(self, depth_min=float(depth_range[0]), depth_max=float(depth_range[1]))

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_strings(cls, values):
        """Build from ``key=value`` strings, ignoring unknown keys."""
        kwargs = {}
        for f in fields(cls):
            if f.name in values:
                kwargs[f.name] = _coerce(values[f.name], type(getattr(cls(), f.name)))
        return cls(**kwargs)


def _coerce(text, kind):
    if isinstance(text, kind):
        return text
    if kind is bool:
        low = str(text).strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    return kind(text)


class ViewSynthesisModel(Module):
    def __init__(self, config, seed=0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.encoder = FeatureEncoder(rng, width=config.encoder_width)
        self.fusion = FusionNet(config.fusion, rng)
        self.hole = hole_filler(rng, config.restore_channels, config.hole_blocks)
        self.refiner = refiner(config.n_views, rng, config.restore_channels, config.refine_blocks,
                               with_masks=config.refine_masks)
        self.depth = DepthNet(config.depthnet, rng) if config.mode == "selfdepth" else None

    def group(self, name):
        prefix = GROUPS[name]
        return {k: v for k, v in self.named_parameters() if k.startswith(prefix)}


@dataclass
class Synthesis:
    coarse: Tensor
    inpainted: Tensor
    final: Tensor
    descriptor_map: Tensor
    coverage: np.ndarray
    unified: object
    novel_depth: Tensor | None = None
    warped: list = field(default_factory=list)
    warp_masks: list = field(default_factory=list)
    source_depths: list = field(default_factory=list)
    depth_terms: list = field(default_factory=list)


def _source_depths(model, images, depths, cams, depth_range):
    """Depth maps (and quality maps) used to build the sub-clouds."""
    cfg = model.config
    if cfg.mode == "depth":
        return [as_tensor(np.asarray(d)) for d in depths], [None] * len(images), None
    dcfg = cfg.depthnet if depth_range is None else cfg.with_depth_range(depth_range).depthnet
    out_d, out_q, probs = [], [], []
    for n in range(len(images)):
        d, prob, q = estimate_depth(images, cams, n, model.depth, dcfg)
        out_d.append(d)
        out_q.append(q)
        probs.append(prob)
    return out_d, out_q, probs


def self_depth_terms(images, cams, depths, target_image=None, target_cam=None):
    """(self, ssim, smooth) per source view, warping the other views onto it."""
    terms = []
    for n, (img, cam, depth) in enumerate(zip(images, cams, depths)):
        others = [(images[i], cams[i]) for i in range(len(images)) if i != n]
        if target_image is not None:
            others.insert(0, (target_image, target_cam))
        warped, masks = [], []
        for other, ocam in others:
            w, m = backward_warp(other, ocam, cam, depth)
            warped.append(w)
            masks.append(m)
        self_term = depth_self_loss(img, warped, masks)
        ssim_term = None
        for w, m in zip(warped, masks):
            s = ssim_loss(img, w, m)
            ssim_term = s if ssim_term is None else ssim_term + s
        ssim_term = ssim_term * (1.0 / len(warped))
        terms.append((self_term, ssim_term, smoothness_loss(depth)))
    return terms


def synthesize(model, images, depths, cams, target_cam, rng, depth_range=None,
               use_refine=None, target_image=None):
    """Run the pipeline for one target camera.

    ``depths`` is ignored in self-estimated mode.  ``target_image`` (training
    only) adds the target-to-source warps to the depth loss terms.
    ``use_refine`` overrides the config flag (phase 1 trains without f_r).
    """
    cfg = model.config
    if len(images) != cfg.n_views:
        raise ValueError(f"model expects {cfg.n_views} source views, got {len(images)}")
    use_refine = cfg.use_refine if use_refine is None else use_refine
    images = [np.asarray(i, dtype=np.float64) for i in images]
    H, W = images[0].shape[:2]
    feats = [model.encoder(Tensor(img)) for img in images]
    src_depths, quality, _ = _source_depths(model, images, depths, cams, depth_range)
    subs = [build_sub_cloud(img, d, f, q, cam, n)
            for n, (img, d, f, q, cam) in enumerate(zip(images, src_depths, feats, quality, cams))]
    if cfg.use_fusion:
        fuse = cascade_fuse if len(subs) >= 4 else fuse_clouds
        unified = fuse(subs, cfg.fusion, model.fusion, (H, W), rng=rng)
    else:
        unified = passthrough_union(subs)
    rendered = splat(unified.positions, unified.descriptors, target_cam, cfg.splat)
    descriptor_map = rendered.image
    coarse = descriptor_map[:, :, 0:3]
    inpainted = fill_holes(descriptor_map, coarse, model.hole) if cfg.use_inpaint else coarse
    out = Synthesis(coarse, inpainted, inpainted, descriptor_map, rendered.mask, unified,
                    source_depths=src_depths)
    if use_refine:
        novel_depth, _ = render_depth(unified.positions, target_cam, cfg.splat)
        for img, cam in zip(images, cams):
            w, m = backward_warp(img, cam, target_cam, novel_depth)
            out.warped.append(w)
            out.warp_masks.append(m)
        masks = out.warp_masks if cfg.refine_masks else None
        out.final = refine(inpainted, out.warped, masks, model.refiner)
        out.novel_depth = novel_depth
    if cfg.mode == "selfdepth":
        out.depth_terms = self_depth_terms(images, cams, src_depths, target_image, target_cam)
    return out


@dataclass
class LossBreakdown:
    total: Tensor
    coarse: float
    inpainted: float
    final: float
    depth: float


def training_loss(model, synthesis, target, perceptual, weights=DepthLossWeights()):
    parts = [photometric_loss(x, target, perceptual)
             for x in (synthesis.coarse, synthesis.inpainted, synthesis.final)]
    render_loss = parts[0] + parts[1] + parts[2]
    depth_loss = total_depth_loss(synthesis.depth_terms, weights) if synthesis.depth_terms else Tensor(0.0)
    total = total_loss(render_loss, depth_loss, model.config.mode)
    return LossBreakdown(total, *(float(p.data) for p in parts), float(as_tensor(depth_loss).data))

