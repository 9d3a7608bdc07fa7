"""Training loop, evaluation and checkpoint helpers."""

from __future__ import annotations

import csv
import io as _io
from dataclasses import dataclass, field

import numpy as np

from .autodiff import AdamState, adam_step, backward, find_nonfinite, no_grad
from .geometry import backward_warp
from .io import load_checkpoint, save_checkpoint
from .losses import PerceptualSurrogate, metrics
from .model import ModelConfig, ViewSynthesisModel, synthesize, training_loss
from .render import render_depth
from .restore import refine
from .scenes import add_depth_noise


class NumericAbort(RuntimeError):
    """Raised when the loss stops being finite."""


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 1e-5
    iterations: int = 1000
    # phase 2 (f_r only, everything else frozen); 0 disables it
    refine_iterations: int = 0
    two_phase: bool = True
    seed: int = 0
    # std of the input-depth noise as a fraction of each scene's depth range
    depth_noise: float = 0.0
    # redraw the noise every iteration; fixed per-scene noise gets memorised
    resample_noise: bool = True
    perceptual_seed: int = 0


@dataclass
class TrainResult:
    model: ViewSynthesisModel
    history: list
    log_lines: list


def noisy_depths(scenes, fraction, seed):
    """Per-scene fixed depth noise; the same (seed, scene index) always gives the same maps."""
    if fraction <= 0:
        return [list(s.source_depths) for s in scenes]
    out = []
    for i, s in enumerate(scenes):
        rng = np.random.default_rng([seed, i, 7919])
        out.append(_noisy_views(s, fraction, rng))
    return out


def _noisy_views(scene, fraction, rng):
    sigma = fraction * (scene.depth_range[1] - scene.depth_range[0])
    return [add_depth_noise(d, sigma, rng) for d in scene.source_depths]


def _fmt(x):
    return f"{x:.9g}"


def log_line(it, phase, loss):
    return (f"{it} {_fmt(float(loss.total.data))} phase={phase} coarse={_fmt(loss.coarse)} "
            f"inpaint={_fmt(loss.inpainted)} final={_fmt(loss.final)} depth={_fmt(loss.depth)}")


def check_finite(total, it):
    if not np.isfinite(total.data).all():
        bad = find_nonfinite(total)
        where = "unknown" if bad is None else f"{bad.op} {bad.name or ''} shape {bad.shape}".replace("  ", " ")
        raise NumericAbort(f"non-finite loss at iteration {it}; first non-finite tensor: {where}")


def _scene_order(n_scenes, iterations, rng):
    order = []
    while len(order) < iterations:
        order.extend(rng.permutation(n_scenes).tolist())
    return order[:iterations]


def train(config, scenes, model=None, log=None, phases=(1, 2)):
    """Optimise ``model`` (created from the config if None) on ``scenes``.

    Phase 1 trains everything except f_r with f_r left out of the graph;
    phase 2 trains f_r alone on top of the frozen phase-1 output.  With
    ``two_phase=False`` a single joint run over all parameters replaces both.
    Each iteration appends one text line to ``log`` (a callable or None).
    """
    if not scenes:
        raise ValueError("training needs at least one scene")
    cfg = config.model
    for s in scenes:
        if s.n_views != cfg.n_views:
            raise ValueError(f"scene {s.name} has {s.n_views} source views, config expects {cfg.n_views}")
    model = model or ViewSynthesisModel(cfg, seed=config.seed)
    perceptual = PerceptualSurrogate(config.perceptual_seed)
    depths = noisy_depths(scenes, config.depth_noise, config.seed)
    history, lines = [], []

    def emit(line):
        lines.append(line)
        if log is not None:
            log(line)

    def run(phase, iterations, names, use_refine, frozen_prefix):
        rng = np.random.default_rng([config.seed, phase])
        params = {k: v for k, v in model.named_parameters() if k in names}
        state = AdamState(lr=config.lr)
        order = _scene_order(len(scenes), iterations, rng)
        for it, idx in enumerate(order):
            s = scenes[idx]
            anchor_rng = np.random.default_rng([config.seed, phase, it])
            views = depths[idx]
            if config.resample_noise and config.depth_noise > 0:
                views = _noisy_views(s, config.depth_noise, np.random.default_rng([config.seed, phase, it, 7919]))
            if frozen_prefix:
                out = _phase2_forward(model, s, views, anchor_rng)
            else:
                out = synthesize(model, s.source_images, views, s.source_cams, s.target_cam,
                                 anchor_rng, depth_range=s.depth_range, use_refine=use_refine,
                                 target_image=s.target_image)
            loss = training_loss(model, out, s.target_image, perceptual)
            check_finite(loss.total, it)
            backward(loss.total)
            _drop_foreign_grads(model, params)
            adam_step(params, state)
            history.append({"phase": phase, "iter": it, "loss": float(loss.total.data),
                            "coarse": loss.coarse, "inpainted": loss.inpainted,
                            "final": loss.final, "depth": loss.depth})
            emit(log_line(it, phase, loss))

    all_names = [k for k, _ in model.named_parameters()]
    refine_names = set(model.group("refine"))
    if not config.two_phase or not cfg.use_refine:
        if 1 in phases:
            names = set(all_names) if cfg.use_refine else set(all_names) - refine_names
            names = _trainable(model, names)
            if names:
                run(1, config.iterations, names, cfg.use_refine, False)
        return TrainResult(model, history, lines)
    if 1 in phases and config.iterations > 0:
        names = _trainable(model, set(all_names) - refine_names)
        if names:
            run(1, config.iterations, names, False, False)
    if 2 in phases and config.refine_iterations > 0:
        run(2, config.refine_iterations, refine_names, True, True)
    return TrainResult(model, history, lines)


def _trainable(model, names):
    """Drop groups that can never receive a gradient under the config."""
    cfg = model.config
    out = set(names)
    if not cfg.use_inpaint:
        out -= set(model.group("hole"))
    if not cfg.use_fusion:
        out -= set(model.group("position")) | set(model.group("descriptor"))
        # without fusion the encoder only feeds the hole filler
        if not cfg.use_inpaint and cfg.mode == "depth":
            out -= set(model.group("encoder"))
    return out


def _drop_foreign_grads(model, params):
    keep = {id(p) for p in params.values()}
    for p in model.parameters().values():
        if id(p) not in keep:
            p.grad = None
        elif p.grad is None:
            p.grad = np.zeros_like(p.data)


def _phase2_forward(model, scene, depths, rng):
    """Frozen stages without graph, then f_r with gradients."""
    cfg = model.config
    with no_grad():
        out = synthesize(model, scene.source_images, depths, scene.source_cams, scene.target_cam,
                         rng, depth_range=scene.depth_range, use_refine=False)
        novel_depth, _ = render_depth(out.unified.positions, scene.target_cam, cfg.splat)
        for img, cam in zip(scene.source_images, scene.source_cams):
            w, m = backward_warp(np.asarray(img, dtype=np.float64), cam, scene.target_cam, novel_depth)
            out.warped.append(w)
            out.warp_masks.append(m)
    out.novel_depth = novel_depth
    out.depth_terms = []
    out.final = refine(out.inpainted, out.warped, out.warp_masks if cfg.refine_masks else None,
                       model.refiner)
    return out


# -- evaluation -------------------------------------------------------------------

@dataclass
class EvalRow:
    scene: str
    psnr: float
    ssim: float


def render_scene(model, scene, depths=None, seed=0, index=0):
    rng = np.random.default_rng([seed, 104729, index])
    with no_grad():
        out = synthesize(model, scene.source_images, scene.source_depths if depths is None else depths,
                         scene.source_cams, scene.target_cam, rng, depth_range=scene.depth_range)
    return out


def evaluate(model, scenes, seed=0, depth_noise=0.0, noise_seed=None):
    """Per-scene PSNR/SSIM of the final render (clipped to [0, 1]) plus the mean row."""
    depths = noisy_depths(scenes, depth_noise, seed if noise_seed is None else noise_seed)
    rows = []
    for i, s in enumerate(scenes):
        out = render_scene(model, s, depths[i], seed, i)
        pred = np.clip(np.asarray(out.final.data, dtype=np.float64), 0.0, 1.0)
        p, q = metrics(pred, s.target_image)
        rows.append(EvalRow(s.name, p, q))
    return rows


def mean_row(rows):
    return EvalRow("mean", float(np.mean([r.psnr for r in rows])), float(np.mean([r.ssim for r in rows])))


def format_table(rows, title=None):
    rows = list(rows) + [mean_row(rows)]
    width = max(len("scene"), *(len(r.scene) for r in rows))
    out = [] if title is None else [title]
    out.append(f"{'scene':<{width}}  {'PSNR':>8}  {'SSIM':>7}")
    out.append("-" * (width + 19))
    for r in rows:
        if r.scene == "mean":
            out.append("-" * (width + 19))
        out.append(f"{r.scene:<{width}}  {r.psnr:8.3f}  {r.ssim:7.4f}")
    return "\n".join(out)


def format_csv(rows, variant=None):
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = (["variant"] if variant is not None else []) + ["scene", "psnr", "ssim"]
    writer.writerow(header)
    for r in list(rows) + [mean_row(rows)]:
        prefix = [variant] if variant is not None else []
        writer.writerow(prefix + [r.scene, f"{r.psnr:.6f}", f"{r.ssim:.6f}"])
    return buf.getvalue()


def save_model(model, path):
    save_checkpoint(path, model.state_dict())


def load_model(path, config, seed=0):
    """Build a model for ``config`` and fill it from a checkpoint; shapes must agree."""
    model = ViewSynthesisModel(config, seed=seed)
    state = load_checkpoint(path)
    params = model.parameters()
    unknown = sorted(set(state) - set(params))
    if unknown:
        raise ValueError(f"checkpoint/config mismatch: unexpected parameters {', '.join(unknown[:5])}")
    try:
        model.load_state_dict(state, strict=True)
    except (KeyError, ValueError) as exc:
        raise ValueError(f"checkpoint/config mismatch: {exc}") from None
    return model
