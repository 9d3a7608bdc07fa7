"""Finite-difference checks of every differentiable stage on a tiny scene."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, default_dtype, grad_check, ops
from .cloud import SubPointCloud
from .depthnet import DepthNet, DepthNetConfig, build_cost_volume, regress_depth
from .fusion import FusionConfig, FusionNet, fuse_clouds
from .geometry import backward_warp
from .losses import PerceptualSurrogate, depth_self_loss, photometric_loss, smoothness_loss, ssim_loss
from .model import ModelConfig, ViewSynthesisModel, synthesize, training_loss
from .render import SplatParams, splat
from .restore import FeatureEncoder, fill_holes, hole_filler, refine, refiner
from .scenes import SceneSpec, generate_scene


def _wake_zero_params(module, rng, scale=0.05):
    """Replace all-zero parameters (zero-initialised tails, biases) with small noise."""
    for p in module.parameters().values():
        if not np.any(p.data):
            p.data = rng.normal(0, scale, p.shape)


def _check(fn, inputs, **kw):
    # small steps keep ReLU kinks out of the difference quotient; atol skips
    # tensors whose true gradient is zero (softmax-invariant biases)
    return grad_check(fn, inputs, eps=1e-6, atol=1e-6, **kw)


def _projection(shape, rng):
    return Tensor(rng.normal(size=shape))


def end_to_end_gradcheck(size=16, seed=0, samples=6):
    """Max relative error per stage (64-bit); ``end_to_end`` covers the whole graph."""
    report = {}
    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        scene = generate_scene(SceneSpec(height=size, width=size, seed=seed, n_objects=(1, 2)))
        imgs = scene.source_images
        cams = scene.source_cams

        enc = FeatureEncoder(rng)
        _wake_zero_params(enc, rng)
        x = Tensor(imgs[0], requires_grad=True)
        R = _projection((size, size, 32), rng)
        ins = {"image": x, **enc.parameters()}
        report["encoder"] = _check(lambda: ops.sum(enc(x) * R), ins, max_samples=samples, seed=seed)

        report["fusion"] = _fusion_check(rng, seed, samples)

        pts = Tensor(rng.uniform([-0.5, -0.5, 1.5], [0.5, 0.5, 2.5], (40, 3)), requires_grad=True)
        attrs = Tensor(rng.uniform(0, 1, (40, 3)), requires_grad=True)
        cam = scene.target_cam
        Rs = _projection((size, size, 3), rng)
        params = SplatParams(radius=1.5, max_points_per_pixel=4, background=0.1)
        report["splat"] = _check(lambda: ops.sum(splat(pts, attrs, cam, params).image * Rs),
                                     {"points": pts, "attrs": attrs}, max_samples=30, seed=seed)

        hole = hole_filler(rng, channels=4, blocks=6)
        _wake_zero_params(hole, rng)
        fmap = Tensor(rng.normal(size=(size, size, 35)), requires_grad=True)
        coarse = Tensor(rng.uniform(size=(size, size, 3)), requires_grad=True)
        report["fill_holes"] = _check(lambda: ops.sum(fill_holes(fmap, coarse, hole) * Rs),
                                          {"features": fmap, "coarse": coarse, **hole.parameters()},
                                          max_samples=samples, seed=seed)

        ref = refiner(2, rng, channels=4, blocks=4)
        _wake_zero_params(ref, rng)
        warped = [Tensor(rng.uniform(size=(size, size, 3)), requires_grad=True) for _ in range(2)]
        masks = [np.ones((size, size)), (rng.uniform(size=(size, size)) > 0.3).astype(float)]
        report["refine"] = _check(lambda: ops.sum(refine(coarse, warped, masks, ref) * Rs),
                                      {"inpainted": coarse, "warp0": warped[0], **ref.parameters()},
                                      max_samples=samples, seed=seed)

        depth = Tensor(scene.target_depth + (scene.target_depth <= 0) * 3.0 + 0.013, requires_grad=True)
        src = Tensor(imgs[0], requires_grad=True)
        report["backward_warp"] = _check(
            lambda: ops.sum(backward_warp(src, cams[0], scene.target_cam, depth)[0] * Rs),
            {"source": src, "depth": depth}, max_samples=40, seed=seed)

        report["losses"] = _loss_check(rng, size, seed)
        report["depthnet"] = _depthnet_check(rng, imgs, cams, seed, samples)
        report["end_to_end"] = _pipeline_check(scene, seed, samples)
    return report


def _fusion_check(rng, seed, samples):
    cfg = FusionConfig(K=4, anchor_ratio=1.0)
    net = FusionNet(cfg, rng)
    pos = Tensor(rng.normal(size=(10, 3)), requires_grad=True)
    desc = Tensor(rng.uniform(size=(10, 35)), requires_grad=True)
    sub = SubPointCloud(pos, desc.data[:, :3], desc, None, 0, np.arange(10))
    anchors = np.array([0, 3, 5, 7, 9])
    R1 = _projection((5, 3), rng)
    R2 = _projection((5, 35), rng)

    def fn():
        u = fuse_clouds([sub], cfg, net, (1, 10), anchors=anchors)
        return ops.sum(u.positions * R1) + ops.sum(u.descriptors * R2)

    return _check(fn, {"positions": pos, "descriptors": desc, **net.parameters()},
                      max_samples=samples * 4, seed=seed)


def _loss_check(rng, size, seed):
    perc = PerceptualSurrogate(seed)
    target = rng.uniform(size=(size, size, 3))
    pred = Tensor(np.clip(target + rng.normal(0, 0.1, target.shape), 0, 1), requires_grad=True)
    other = [rng.uniform(size=(size, size, 3))]
    mask = [(rng.uniform(size=(size, size)) > 0.2).astype(float)]
    d = Tensor(rng.uniform(1, 3, (size, size)), requires_grad=True)

    def fn():
        return (photometric_loss(pred, target, perc) + ssim_loss(pred, target, mask[0])
                + depth_self_loss(pred, other, mask) + smoothness_loss(d))

    return _check(fn, {"pred": pred, "depth": d}, max_samples=60, seed=seed)


def _depthnet_check(rng, imgs, cams, seed, samples):
    cfg = DepthNetConfig(D=8, d_min=1.0, d_max=6.0)
    net = DepthNet(cfg, rng)
    _wake_zero_params(net, rng)
    images = [Tensor(i) for i in imgs]
    Rd = _projection(imgs[0].shape[:2], rng)

    def fn():
        feats = [net.features(i) for i in images]
        cost = build_cost_volume(feats[0], feats[1:], cams[0], cams[1:], cfg)
        depth, _ = regress_depth(cost, cfg, net)
        return ops.sum(depth * Rd)

    # the regression softmax makes some biases gradient-free; atol skips those
    return _check(fn, net.parameters(), max_samples=samples, seed=seed)


def _pipeline_check(scene, seed, samples):
    cfg = ModelConfig(n_views=2, restore_channels=4, K=4)
    model = ViewSynthesisModel(cfg, seed=seed)
    _wake_zero_params(model, np.random.default_rng(seed + 1))
    perc = PerceptualSurrogate(seed)
    params = model.parameters()
    # one tensor from every learnable group keeps the run short
    picked = {k: params[k] for k in (
        "encoder.conv1.weight", "encoder.res.blocks.0.conv2.weight",
        "fusion.position_mlp.layers.0.weight", "fusion.descriptor_mlp.layers.0.weight",
        "hole.head.weight", "hole.tail.weight", "refiner.head.weight", "refiner.tail.weight",
    ) if k in params}

    def fn():
        out = synthesize(model, scene.source_images, scene.source_depths, scene.source_cams,
                         scene.target_cam, np.random.default_rng(seed))
        return training_loss(model, out, scene.target_image, perc).total

    return _check(fn, picked, max_samples=samples, seed=seed)
