"""Benchmarks on generated scenes: the ablation ladder, fusion denoising, self-supervised depth.

Results are cached under a key derived from the benchmark config and the
package source, so re-running with unchanged code reuses finished runs.
"""

from __future__ import annotations

import hashlib
import inspect
import json
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .autodiff import AdamState, adam_step, backward, no_grad
from .depthnet import DepthNet, DepthNetConfig, estimate_depth
from .losses import total_depth_loss
from .model import ModelConfig, ViewSynthesisModel, self_depth_terms
from .plotting import error_histogram, loss_curve, metric_bars
from .scenes import generate_benchmark, surface_distance
from .train import (
    TrainConfig,
    check_finite,
    evaluate,
    format_csv,
    format_table,
    load_model,
    mean_row,
    noisy_depths,
    render_scene,
    save_model,
    train,
)

VARIANTS = ("baseline", "+inpaint", "+inpaint+fusion", "full")


# files that cannot change a benchmark number
_NOT_HASHED = {"__init__.py", "cli.py", "plotting.py", "checks.py", "bench.py"}


def source_digest():
    h = hashlib.sha256()
    root = Path(__file__).parent
    for p in sorted(root.rglob("*.py")):
        if p.name in _NOT_HASHED:
            continue
        h.update(str(p.relative_to(root)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def cache_key(config, *runners):
    """Config, library source and the source of the benchmark functions themselves."""
    payload = json.dumps(asdict(config), sort_keys=True) + source_digest()
    payload += "".join(inspect.getsource(f) for f in runners)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class AblationConfig:
    n_train: int = 20
    n_test: int = 5
    size: int = 64
    views: int = 2
    iterations: int = 5000
    refine_iterations: int = 2000
    lr: float = 1e-3
    depth_noise: float = 0.03
    restore_channels: int = 16
    seed: int = 0
    train_seed: int = 0
    test_seed: int = 1000


def benchmark_scenes(n, seed, size, views):
    return generate_benchmark(None, n, seed=seed, height=size, width=size, n_sources=views)


def _variant_config(name, base):
    flags = {
        "baseline": dict(use_fusion=False, use_inpaint=False, use_refine=False),
        "+inpaint": dict(use_fusion=False, use_inpaint=True, use_refine=False),
        "+inpaint+fusion": dict(use_fusion=True, use_inpaint=True, use_refine=False),
        "full": dict(use_fusion=True, use_inpaint=True, use_refine=True),
    }[name]
    return replace(base, **flags)


def run_ablation(config, out_dir, log=print):
    """Train and evaluate the four ablation variants; returns the summary dict.

    The baseline has nothing to train.  ``+inpaint`` and ``+inpaint+fusion``
    run phase 1; ``full`` starts from the ``+inpaint+fusion`` weights and
    runs phase 2 (f_r only).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    key = cache_key(config, run_ablation, benchmark_scenes, _variant_config)
    summary_path = out / "summary.json"
    if summary_path.exists():
        summary = json.loads(summary_path.read_text())
        if summary.get("key") == key:
            return summary
    started = time.time()
    train_scenes = benchmark_scenes(config.n_train, config.train_seed, config.size, config.views)
    test_scenes = benchmark_scenes(config.n_test, config.test_seed, config.size, config.views)
    base = ModelConfig(n_views=config.views, restore_channels=config.restore_channels)
    rows, histories, timings = {}, {}, {}

    def evaluate_variant(name, model):
        rows[name] = evaluate(model, test_scenes, seed=config.seed, depth_noise=config.depth_noise,
                              noise_seed=config.seed + 1)
        log(f"[ablation] {name}: mean PSNR {mean_row(rows[name]).psnr:.3f} dB")

    evaluate_variant("baseline", ViewSynthesisModel(_variant_config("baseline", base), seed=config.seed))
    for name in ("+inpaint", "+inpaint+fusion"):
        t0 = time.time()
        tc = TrainConfig(model=_variant_config(name, base), lr=config.lr, iterations=config.iterations,
                         seed=config.seed, depth_noise=config.depth_noise)
        with open(out / f"log_{_slug(name)}.txt", "w") as f:
            res = train(tc, train_scenes, log=lambda line, f=f: f.write(line + "\n"))
        timings[name] = time.time() - t0
        histories[name] = res.history
        save_model(res.model, out / f"{_slug(name)}.pcvs")
        evaluate_variant(name, res.model)
    t0 = time.time()
    full_cfg = _variant_config("full", base)
    full = load_model(out / f"{_slug('+inpaint+fusion')}.pcvs", full_cfg, seed=config.seed)
    tc = TrainConfig(model=full_cfg, lr=config.lr, iterations=0, refine_iterations=config.refine_iterations,
                     seed=config.seed, depth_noise=config.depth_noise)
    with open(out / "log_full.txt", "w") as f:
        res = train(tc, train_scenes, model=full, log=lambda line: f.write(line + "\n"), phases=(2,))
    timings["full"] = time.time() - t0
    histories["full"] = res.history
    save_model(res.model, out / "full.pcvs")
    evaluate_variant("full", res.model)

    csv_text = "".join(format_csv(rows[v], v) if i == 0 else format_csv(rows[v], v).split("\n", 1)[1]
                       for i, v in enumerate(VARIANTS))
    (out / "ablation.csv").write_text(csv_text)
    (out / "ablation.txt").write_text("\n\n".join(format_table(rows[v], v) for v in VARIANTS) + "\n")
    metric_bars({v: rows[v] for v in VARIANTS}, out / "ablation.png")
    for name, hist in histories.items():
        loss_curve(hist, out / f"loss_{_slug(name)}.png")
    summary = {
        "key": key,
        "config": asdict(config),
        "mean_psnr": {v: mean_row(rows[v]).psnr for v in VARIANTS},
        "mean_ssim": {v: mean_row(rows[v]).ssim for v in VARIANTS},
        "per_scene_psnr": {v: [r.psnr for r in rows[v]] for v in VARIANTS},
        "train_seconds": timings,
        "total_seconds": time.time() - started,
    }
    summary_path.write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return summary


def _slug(name):
    return name.strip("+").replace("+", "_") or "baseline"


def ablation_ordering(summary):
    p = summary["mean_psnr"]
    return (p["baseline"] < p["+inpaint"] < p["+inpaint+fusion"] <= p["full"]
            and p["full"] >= p["baseline"] + 2.0)


# -- fusion denoising ------------------------------------------------------------------

def fusion_denoising(model, scenes, noise_fraction=0.01, seed=0):
    """Mean point-to-surface distance of the fused cloud and the raw union, per scene."""
    original = model.config
    depths = noisy_depths(scenes, noise_fraction, seed)
    rows = []
    try:
        for i, s in enumerate(scenes):
            dists = {}
            for label, fuse in (("fused", True), ("union", False)):
                model.config = replace(original, use_fusion=fuse, use_refine=False)
                out = render_scene(model, s, depths[i], seed, i)
                dists[label] = float(surface_distance(out.unified.positions.data, s.primitives).mean())
            rows.append((s.name, dists["fused"], dists["union"]))
    finally:
        model.config = original
    return rows


# -- self-supervised depth ---------------------------------------------------------------

@dataclass
class DepthBenchConfig:
    n_train: int = 10
    n_test: int = 5
    size: int = 32
    views: int = 2
    planes: int = 128
    iterations: int = 400
    lr: float = 1e-3
    seed: int = 0
    train_seed: int = 500
    test_seed: int = 1500


def depth_training_terms(net, scene, config):
    """Per-source-view depth loss terms with the target as an extra warp source."""
    images = [np.asarray(i, dtype=np.float64) for i in scene.source_images]
    dcfg = config
    depths = [estimate_depth(images, scene.source_cams, n, net, dcfg)[0] for n in range(len(images))]
    return self_depth_terms(images, scene.source_cams, depths, scene.target_image, scene.target_cam), depths


def train_depth(config, scenes, log=None):
    """Self-supervised training of the depth network alone with the depth loss."""
    lo, hi = scenes[0].depth_range
    dcfg = DepthNetConfig(D=config.planes, d_min=lo, d_max=hi)
    net = DepthNet(dcfg, np.random.default_rng(config.seed))
    state = AdamState(lr=config.lr)
    rng = np.random.default_rng([config.seed, 3])
    history = []
    order = []
    while len(order) < config.iterations:
        order.extend(rng.permutation(len(scenes)).tolist())
    for it, idx in enumerate(order[:config.iterations]):
        terms, _ = depth_training_terms(net, scenes[idx], dcfg)
        loss = total_depth_loss(terms)
        check_finite(loss, it)
        backward(loss)
        params = net.parameters()
        for p in params.values():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        adam_step(params, state)
        history.append({"phase": 1, "iter": it, "loss": float(loss.data)})
        if log is not None:
            log(f"{it} {float(loss.data):.9g}")
    return net, dcfg, history


def depth_errors(net, dcfg, scenes):
    """Absolute depth errors over valid ground-truth pixels of every source view."""
    errs = []
    with no_grad():
        for s in scenes:
            images = [np.asarray(i, dtype=np.float64) for i in s.source_images]
            for n, gt in enumerate(s.source_depths):
                d, _, _ = estimate_depth(images, s.source_cams, n, net, dcfg)
                valid = gt > 0
                errs.append(np.abs(np.asarray(d.data, dtype=np.float64) - gt)[valid])
    return np.concatenate(errs)


def run_depth_benchmark(config, out_dir, log=print):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    key = cache_key(config, run_depth_benchmark, benchmark_scenes, depth_training_terms, train_depth,
                    depth_errors)
    summary_path = out / "summary.json"
    if summary_path.exists():
        summary = json.loads(summary_path.read_text())
        if summary.get("key") == key:
            return summary
    started = time.time()
    train_scenes = benchmark_scenes(config.n_train, config.train_seed, config.size, config.views)
    test_scenes = benchmark_scenes(config.n_test, config.test_seed, config.size, config.views)
    lo, hi = test_scenes[0].depth_range
    dcfg0 = DepthNetConfig(D=config.planes, d_min=lo, d_max=hi)
    untrained = depth_errors(DepthNet(dcfg0, np.random.default_rng(config.seed)), dcfg0, test_scenes)
    with open(out / "log_depth.txt", "w") as f:
        net, dcfg, history = train_depth(config, train_scenes, log=lambda line: f.write(line + "\n"))
    errs = depth_errors(net, dcfg, test_scenes)
    rng_span = hi - lo
    loss_curve(history, out / "loss_depth.png")
    error_histogram(errs / rng_span, out / "depth_error.png", "|depth error| / depth range", 0.05)
    summary = {
        "key": key,
        "config": asdict(config),
        "median_abs_error": float(np.median(errs)),
        "median_fraction_of_range": float(np.median(errs) / rng_span),
        "untrained_median_fraction": float(np.median(untrained) / rng_span),
        "depth_range": [lo, hi],
        "total_seconds": time.time() - started,
    }
    summary_path.write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    log(f"[depth] median |err| = {summary['median_fraction_of_range']:.4f} of range "
        f"(untrained {summary['untrained_median_fraction']:.4f})")
    return summary

