"""Command line: gen-scenes, train, render, eval, fuse, gradcheck, ablation, depth-bench.

Exit codes: 0 on success, 1 on invalid input, 2 when training hits a
non-finite loss.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields, replace

import numpy as np

from .cloud import export_ply
from .io import FormatError, load_scenes, read_config, write_pfm, write_png
from .model import ModelConfig
from .scenes import SceneGenerationError, SceneSpec, generate_scene
from .train import (
    NumericAbort,
    TrainConfig,
    evaluate,
    format_csv,
    format_table,
    load_model,
    render_scene,
    save_model,
    train,
)

# flag name -> config key
FLAG_KEYS = {
    "mode": "mode",
    "views": "n_views",
    "knn": "K",
    "anchor_ratio": "anchor_ratio",
    "seed": "seed",
    "lr": "lr",
    "iterations": "iterations",
    "refine_iterations": "refine_iterations",
    "depth_noise": "depth_noise",
    "restore_channels": "restore_channels",
}
TRAIN_KEYS = {"lr": float, "iterations": int, "refine_iterations": int, "seed": int,
              "depth_noise": float, "two_phase": bool, "resample_noise": bool}


def _add_common(p, model_flags=True):
    p.add_argument("--config", help="key=value file; command-line flags take precedence")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    if model_flags:
        p.add_argument("--mode", choices=["depth", "selfdepth"])
        p.add_argument("--views", type=int)
        p.add_argument("--knn", type=int)
        p.add_argument("--anchor-ratio", type=float)
        p.add_argument("--restore-channels", type=int)
        p.add_argument("--no-fusion", action="store_true")
        p.add_argument("--no-inpaint", action="store_true")
        p.add_argument("--no-refine", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="pcvs", description="point-cloud view synthesis")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scenes", help="write procedurally generated scenes")
    _add_common(p, model_flags=False)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--views", type=int, default=2)
    p.add_argument("--checker", action="store_true")

    p = sub.add_parser("train", help="train on a directory of scenes")
    _add_common(p)
    p.add_argument("--scenes", required=True)
    p.add_argument("--lr", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--refine-iterations", type=int)
    p.add_argument("--depth-noise", type=float)
    p.add_argument("--init", help="checkpoint to start from")

    p = sub.add_parser("render", help="render the target view of a scene")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--dump-cloud", action="store_true")

    p = sub.add_parser("eval", help="PSNR/SSIM table over held-out scenes")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--scenes", required=True)
    p.add_argument("--depth-noise", type=float)
    p.add_argument("--identity", action="store_true", help="score the ground truth against itself")

    p = sub.add_parser("fuse", help="build the unified cloud of a scene and write it as PLY")
    _add_common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--checkpoint")

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable stage")
    _add_common(p, model_flags=False)
    p.add_argument("--size", type=int, default=16)

    p = sub.add_parser("ablation", help="train and score the four ablation variants")
    _add_common(p, model_flags=False)
    p.add_argument("--iterations", type=int)
    p.add_argument("--refine-iterations", type=int)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)

    p = sub.add_parser("depth-bench", help="self-supervised depth training benchmark")
    _add_common(p, model_flags=False)
    p.add_argument("--iterations", type=int)
    return parser


def _settings(args):
    """Merge: defaults <- config file <- explicit flags."""
    values = read_config(args.config) if getattr(args, "config", None) else {}
    for flag, key in FLAG_KEYS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = v
    for flag, key in (("no_fusion", "use_fusion"), ("no_inpaint", "use_inpaint"), ("no_refine", "use_refine")):
        if getattr(args, flag, False):
            values[key] = False
    return values


def _model_config(values):
    return ModelConfig.from_strings(values)


def _train_config(values):
    kwargs = {}
    for key, kind in TRAIN_KEYS.items():
        if key in values:
            v = values[key]
            kwargs[key] = v if isinstance(v, kind) else (str(v).lower() in ("1", "true", "yes", "on")
                                                         if kind is bool else kind(v))
    return TrainConfig(model=_model_config(values), **kwargs)


def _sidecar(checkpoint):
    path = os.path.join(os.path.dirname(os.path.abspath(checkpoint)), "config.txt")
    return read_config(path) if os.path.exists(path) else {}


def _checkpoint_settings(args):
    """Model settings stored next to the checkpoint, overridden by config file and flags."""
    values = _sidecar(args.checkpoint) if getattr(args, "checkpoint", None) else {}
    values.update(_settings(args))
    return values


def _write_config(path, model_cfg, train_cfg=None):
    lines = [f"{k}={v}" for k, v in model_cfg.to_dict().items()]
    if train_cfg is not None:
        lines += [f"{f.name}={getattr(train_cfg, f.name)}" for f in fields(train_cfg) if f.name != "model"]
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def _out(args, default):
    out = args.out or default
    os.makedirs(out, exist_ok=True)
    return out


# -- commands ------------------------------------------------------------------------

def cmd_gen_scenes(args):
    out = _out(args, "scenes")
    seed = 0 if args.seed is None else args.seed
    for i in range(args.count):
        spec = SceneSpec(height=args.size, width=args.size, n_sources=args.views, seed=seed + i,
                         name=f"scene_{i:03d}", checker=args.checker)
        generate_scene(spec, os.path.join(out, f"scene_{i:03d}"))
    print(f"wrote {args.count} scene(s) to {out}")


def cmd_train(args):
    from .plotting import loss_curve

    values = _settings(args)
    cfg = _train_config(values)
    scenes = load_scenes(args.scenes)
    if not scenes:
        raise FormatError(f"{args.scenes}: no scenes found")
    out = _out(args, "run")
    model = None
    if args.init:
        model = load_model(args.init, cfg.model, seed=cfg.seed)
    log_path = os.path.join(out, "train_log.txt")
    with open(log_path, "w") as log:
        try:
            res = train(cfg, scenes, model=model, log=lambda line: (log.write(line + "\n"), log.flush()))
        except NumericAbort as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
    save_model(res.model, os.path.join(out, "checkpoint.pcvs"))
    _write_config(os.path.join(out, "config.txt"), cfg.model, cfg)
    if res.history:
        loss_curve(res.history, os.path.join(out, "loss.png"))
    print(f"trained {len(res.history)} iterations; checkpoint in {out}")
    return 0


def cmd_render(args):
    from .io import load_scene
    from .plotting import render_panel
    from .render import render_depth

    values = _checkpoint_settings(args)
    cfg = _model_config(values)
    seed = int(values.get("seed", 0))
    model = load_model(args.checkpoint, cfg, seed=seed)
    scene = load_scene(args.scene)
    if scene.n_views != cfg.n_views:
        raise ValueError(f"checkpoint/config mismatch: model has {cfg.n_views} views, scene has {scene.n_views}")
    out_dir = _out(args, "render")
    out = render_scene(model, scene, seed=seed)
    final = np.clip(np.asarray(out.final.data, dtype=np.float64), 0, 1)
    write_png(os.path.join(out_dir, "render.png"), final)
    if args.dump_cloud:
        export_ply(out.unified.positions.data, np.clip(out.unified.colors, 0, 1),
                   os.path.join(out_dir, "cloud.ply"))
        depth, _ = render_depth(out.unified.positions, scene.target_cam, cfg.splat)
        write_pfm(os.path.join(out_dir, "depth.pfm"), np.asarray(depth.data, dtype=np.float32))
    render_panel({"coarse": out.coarse.data, "inpainted": out.inpainted.data, "final": final,
                  "target": scene.target_image}, os.path.join(out_dir, "panel.png"))
    print(f"wrote {os.path.join(out_dir, 'render.png')}")
    return 0


def cmd_eval(args):
    from .losses import metrics
    from .plotting import metric_bars
    from .train import EvalRow

    scenes = load_scenes(args.scenes)
    if not scenes:
        raise FormatError(f"{args.scenes}: no scenes found")
    out = _out(args, "eval")
    if args.identity:
        rows = [EvalRow(s.name, *metrics(s.target_image, s.target_image)) for s in scenes]
        variant = "identity"
    else:
        if not args.checkpoint:
            raise ValueError("eval needs --checkpoint (or --identity)")
        values = _checkpoint_settings(args)
        cfg = _model_config(values)
        seed = int(values.get("seed", 0))
        model = load_model(args.checkpoint, cfg, seed=seed)
        noise = float(values.get("depth_noise", 0.0)) if args.depth_noise is None else args.depth_noise
        rows = evaluate(model, scenes, seed=seed, depth_noise=noise, noise_seed=seed + 1)
        variant = _variant_name(cfg)
    table = format_table(rows, variant)
    print(table)
    with open(os.path.join(out, "metrics.txt"), "w") as f:
        f.write(table + "\n")
    with open(os.path.join(out, "metrics.csv"), "w") as f:
        f.write(format_csv(rows))
    metric_bars({variant: rows}, os.path.join(out, "metrics.png"))
    return 0


def _variant_name(cfg):
    if not (cfg.use_inpaint or cfg.use_fusion or cfg.use_refine):
        return "baseline"
    parts = [p for p, on in (("inpaint", cfg.use_inpaint), ("fusion", cfg.use_fusion),
                             ("refine", cfg.use_refine)) if on]
    return "+" + "+".join(parts)


def cmd_fuse(args):
    from .io import load_scene
    from .model import ViewSynthesisModel

    values = _checkpoint_settings(args)
    cfg = replace(_model_config(values), use_refine=False)
    seed = int(values.get("seed", 0))
    model = load_model(args.checkpoint, cfg, seed=seed) if args.checkpoint else ViewSynthesisModel(cfg, seed)
    scene = load_scene(args.scene)
    out = render_scene(model, scene, seed=seed)
    out_dir = _out(args, "fuse")
    path = os.path.join(out_dir, "cloud.ply")
    export_ply(out.unified.positions.data, np.clip(out.unified.colors, 0, 1), path)
    print(f"wrote {len(out.unified)} points to {path}")
    return 0


def cmd_gradcheck(args):
    from .checks import end_to_end_gradcheck

    report = end_to_end_gradcheck(size=args.size, seed=0 if args.seed is None else args.seed)
    width = max(len(k) for k in report)
    worst = 0.0
    for name, err in report.items():
        print(f"{name:<{width}}  {err:.3e}")
        worst = max(worst, err)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "gradcheck.csv"), "w") as f:
            f.write("stage,max_rel_err\n" + "".join(f"{k},{v:.6e}\n" for k, v in report.items()))
    return 0 if worst < 1e-3 else 1


def cmd_ablation(args):
    from .bench import AblationConfig, ablation_ordering, run_ablation

    cfg = AblationConfig()
    overrides = {k: getattr(args, k) for k in ("iterations", "refine_iterations", "n_train", "n_test", "seed")
                 if getattr(args, k) is not None}
    cfg = replace(cfg, **overrides)
    summary = run_ablation(cfg, _out(args, "ablation"))
    for name, value in summary["mean_psnr"].items():
        print(f"{name:<16} {value:8.3f} dB")
    print("ordering holds" if ablation_ordering(summary) else "ordering does NOT hold")
    return 0


def cmd_depth_bench(args):
    from .bench import DepthBenchConfig, run_depth_benchmark

    cfg = DepthBenchConfig()
    if args.iterations is not None:
        cfg = replace(cfg, iterations=args.iterations)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    summary = run_depth_benchmark(cfg, _out(args, "depth_bench"))
    print(json.dumps({k: v for k, v in summary.items() if k != "config"}, indent=1, sort_keys=True))
    return 0


COMMANDS = {
    "gen-scenes": cmd_gen_scenes,
    "train": cmd_train,
    "render": cmd_render,
    "eval": cmd_eval,
    "fuse": cmd_fuse,
    "gradcheck": cmd_gradcheck,
    "ablation": cmd_ablation,
    "depth-bench": cmd_depth_bench,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args) or 0
    except NumericAbort as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, SceneGenerationError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
