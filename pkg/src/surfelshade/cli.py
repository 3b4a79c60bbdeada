"""Command-line entry point: train, render, eval, dump-buffers, gen-scene."""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys

import numpy as np

from . import __version__
from .config import ModelConfig, RenderSettings, TrainConfig

EXIT_ERROR = 1
EXIT_USAGE = 2


def _bool(text):
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _add_dataclass_flags(parser, cls, group_title, skip=()):
    group = parser.add_argument_group(group_title)
    for f in dataclasses.fields(cls):
        if f.name in skip or f.name in ("model", "render"):
            continue
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        flag = "--" + f.name.replace("_", "-")
        if isinstance(default, bool):
            group.add_argument(flag, type=_bool, default=None, metavar="BOOL",
                               help=f"(default {default})")
        elif isinstance(default, tuple):
            kind = type(default[0]) if default else float
            group.add_argument(flag, type=kind, nargs=len(default) if f.name != "hidden" else "+",
                               default=None, help=f"(default {' '.join(map(str, default))})")
        else:
            group.add_argument(flag, type=type(default), default=None,
                               help=f"(default {default})")


def _apply_overrides(obj, args):
    for f in dataclasses.fields(obj):
        if f.name in ("model", "render"):
            continue
        value = getattr(args, f.name, None)
        if value is not None:
            setattr(obj, f.name, tuple(value) if isinstance(value, list) else value)
    return obj


def build_config(args, base: TrainConfig = None) -> TrainConfig:
    cfg = base or TrainConfig()
    if getattr(args, "config", None):
        with open(args.config) as f:
            data = json.load(f)
        # accept either a bare config or a run_config.json record
        cfg = TrainConfig.from_dict(data.get("config", data) if "argv" in data else data)
    _apply_overrides(cfg, args)
    _apply_overrides(cfg.model, args)
    _apply_overrides(cfg.render, args)
    cfg.__post_init__()
    return cfg


def _write_run_config(out_dir, args, argv, config=None):
    os.makedirs(out_dir, exist_ok=True)
    record = {
        "version": __version__,
        "argv": list(argv),
        "args": {k: v for k, v in vars(args).items() if k != "func"},
        "threads": _current_threads(),
    }
    if config is not None:
        record["config"] = config.to_dict()
    with open(os.path.join(out_dir, "run_config.json"), "w") as f:
        json.dump(record, f, indent=2, sort_keys=True, default=str)


def _current_threads():
    import numba

    return numba.get_num_threads()


def _set_threads(n):
    import numba

    if n is not None:
        if n < 1:
            raise ValueError("--threads must be >= 1")
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args, argv):
    from .io import save_checkpoint
    from .scene import load_dataset
    from .training import train

    config = build_config(args)
    dataset = load_dataset(args.data, args.split, config.render.background)
    _write_run_config(args.out, args, argv, config)
    ckpt = os.path.join(args.out, "model.ckpt")
    with open(os.path.join(args.out, "train_log.csv"), "w") as log:
        result = train(dataset, config, out_dir=args.out, log_file=log, checkpoint_path=ckpt,
                       progress=None if args.quiet else _print_progress)
    save_checkpoint(ckpt, result.model, config, result.optimizer, result.iterations)
    print(f"wrote {ckpt} ({len(result.model.splats)} splats, {result.seconds:.1f}s)")
    return 0


def _print_progress(it, terms, p, model):
    print(f"iter {it}: loss {terms.total:.5f} rgb {terms.rgb:.5f} psnr {p:.2f} "
          f"splats {len(model.splats)}", flush=True)


def _cameras(args, config):
    from .oracle import camera_ring
    from .scene import load_dataset

    if args.orbit is not None:
        n, radius, elevation = args.orbit
        return [(f"orbit_{i:03d}", c, None) for i, c in enumerate(camera_ring(
            int(n), radius, math.radians(elevation), args.width, args.height,
            math.radians(args.fov)))]
    if not args.data:
        raise ValueError("need --data or --orbit for camera poses")
    ds = load_dataset(args.data, args.split, config.render.background)
    return [(os.path.basename(fr.name) or f"frame_{i:03d}", fr.camera, fr) for i, fr in
            enumerate(ds.frames)]


def cmd_render(args, argv):
    from .io import dump_planes, load_checkpoint, write_plane
    from .pipeline import render
    from .scene import write_png

    model, config, _ = load_checkpoint(args.checkpoint)
    _apply_overrides(config.render, args)
    _write_run_config(args.out, args, argv, config)
    for name, cam, _ in _cameras(args, config):
        res = render(model, cam, config.render)
        write_png(os.path.join(args.out, f"{name}.png"), res.shaded.srgb)
        if args.dump == "linear":
            write_plane(os.path.join(args.out, f"{name}_linear.bin"), res.shaded.linear)
        if args.decompose:
            gb = res.gbuffer
            dump_planes(os.path.join(args.out, "buffers"), {"diffuse": gb.diffuse, "specular": res.shaded.specular,
                                   "normal": gb.normal, "roughness": gb.roughness},
                        gb.alpha > config.render.coverage_eps, prefix=f"{name}_")
    print(f"rendered into {args.out}")
    return 0


def _list_pngs(directory):
    return sorted(f for f in os.listdir(directory) if f.lower().endswith(".png"))


def cmd_eval(args, argv):
    from .metrics import EvalReport, mae_degrees, psnr, ssim
    from .scene import read_png

    report = EvalReport()
    quantize = not args.no_quantize
    if args.pred is not None:
        if args.gt is None:
            raise ValueError("--pred requires --gt")
        # extra predictions (decomposition buffers) without a ground-truth image are ignored
        names = [n for n in _list_pngs(args.pred) if os.path.isfile(os.path.join(args.gt, n))]
        if not names:
            raise ValueError(f"no PNG in {args.pred} has a counterpart in {args.gt}")
        for name in names:
            gt_path = os.path.join(args.gt, name)
            a = read_png(os.path.join(args.pred, name))[..., :3]
            b = read_png(gt_path)[..., :3]
            report.add(name, psnr(a, b, quantize), ssim(a, b))
        config = None
    else:
        from .io import load_checkpoint
        from .pipeline import render
        from .scene import load_dataset

        if not (args.checkpoint and args.data):
            raise ValueError("eval needs --checkpoint and --data, or --pred and --gt")
        model, config, _ = load_checkpoint(args.checkpoint)
        ds = load_dataset(args.data, args.split, config.render.background)
        for fr in ds.frames:
            res = render(model, fr.camera, config.render)
            pred = res.shaded.srgb
            mae = None
            if fr.normal is not None:
                mask = fr.alpha > 0.5 if fr.alpha is not None else res.gbuffer.alpha > 0.5
                mask &= np.linalg.norm(res.gbuffer.normal, axis=-1) > 0
                if mask.any():
                    mae = mae_degrees(res.gbuffer.normal, fr.normal, mask)
            report.add(fr.name, psnr(pred, fr.image, quantize), ssim(pred, fr.image), mae)
    os.makedirs(args.out, exist_ok=True)
    _write_run_config(args.out, args, argv, config)
    with open(os.path.join(args.out, "eval.csv"), "w") as f:
        f.write(report.to_csv())
    summary = {k: _json_number(v) for k, v in report.summary().items()}
    summary["per_frame"] = [
        {"frame": n, "psnr": _json_number(p), "ssim": s, "mae": m}
        for n, p, s, m in zip(report.frames, report.psnr, report.ssim, report.mae)
    ]
    with open(os.path.join(args.out, "eval.json"), "w") as f:
        json.dump(summary, f, indent=2)
    sys.stdout.write(report.to_csv())
    return 0


def _json_number(v):
    """JSON has no infinities: PSNR of identical images is written as "inf"."""
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if isinstance(v, float) and math.isnan(v):
        return None
    return v


def cmd_dump_buffers(args, argv):
    from .io import dump_planes, load_checkpoint
    from .pipeline import render

    model, config, _ = load_checkpoint(args.checkpoint)
    cams = _cameras(args, config)
    if not 0 <= args.frame < len(cams):
        raise IndexError(f"frame {args.frame} out of range (0..{len(cams) - 1})")
    _write_run_config(args.out, args, argv, config)
    name, cam, _ = cams[args.frame]
    res = render(model, cam, config.render)
    planes = res.gbuffer.planes()
    planes["specular"] = res.shaded.specular
    planes["srgb"] = res.shaded.srgb
    dump_planes(args.out, planes, res.gbuffer.alpha > config.render.coverage_eps)
    print(f"wrote {len(planes)} planes for {name} into {args.out}")
    return 0


def cmd_gen_scene(args, argv):
    from .oracle import make_scene, write_scene

    mc = _apply_overrides(ModelConfig(grid_height=32, grid_width=64, grid_levels=5,
                                      hidden=(64, 64)), args)
    scene = make_scene(args.kind, args.seed, args.views + args.test_views, args.width,
                       args.height, mc, args.splats)
    write_scene(scene, args.out, n_test=args.test_views)
    _write_run_config(args.out, args, argv)
    print(f"wrote {args.kind} scene with {len(scene.cameras)} views into {args.out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="surfelshade", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads for the rasterizer (default: all logical cores)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="optimize a model against a dataset")
    p.add_argument("--data", required=True, help="dataset directory with transforms manifests")
    p.add_argument("--split", default="train")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON config file (as written into run_config.json)")
    p.add_argument("--quiet", action="store_true")
    _add_dataclass_flags(p, TrainConfig, "training")
    _add_dataclass_flags(p, ModelConfig, "model")
    _add_dataclass_flags(p, RenderSettings, "rendering")
    p.set_defaults(func=cmd_train)

    def camera_flags(q):
        q.add_argument("--checkpoint", required=True)
        q.add_argument("--data", help="dataset directory providing camera poses")
        q.add_argument("--split", default="test")
        q.add_argument("--orbit", type=float, nargs=3, metavar=("N_FRAMES", "RADIUS", "ELEV_DEG"),
                       help="render a camera orbit instead of dataset poses")
        q.add_argument("--width", type=int, default=64)
        q.add_argument("--height", type=int, default=64)
        q.add_argument("--fov", type=float, default=45.0, help="horizontal field of view (deg)")
        q.add_argument("--out", required=True)

    p = sub.add_parser("render", help="render a checkpoint to PNGs")
    camera_flags(p)
    p.add_argument("--decompose", action="store_true",
                   help="also dump diffuse, specular, normal and roughness buffers into OUT/buffers")
    p.add_argument("--dump", choices=["linear"], help="write the raw linear-radiance plane")
    _add_dataclass_flags(p, RenderSettings, "rendering")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="PSNR / SSIM / normal MAE report")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--split", default="test")
    p.add_argument("--pred", help="directory of predicted PNGs (compared by file name)")
    p.add_argument("--gt", help="directory of ground-truth PNGs")
    p.add_argument("--no-quantize", action="store_true",
                   help="compare float images instead of 8-bit quantized ones")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dump-buffers", help="write every G-buffer plane of one frame")
    camera_flags(p)
    p.add_argument("--frame", type=int, default=0)
    p.set_defaults(func=cmd_dump_buffers)

    p = sub.add_parser("gen-scene", help="write a synthetic dataset")
    p.add_argument("--kind", choices=["mirror_plane", "textured_ball", "random"], required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--test-views", type=int, default=0)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--splats", type=int, default=None, help="splat count (kind-specific default)")
    p.add_argument("--out", required=True)
    _add_dataclass_flags(p, ModelConfig, "reference model")
    p.set_defaults(func=cmd_gen_scene)
    return parser


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else 0
    try:
        _set_threads(args.threads)
        return args.func(args, argv)
    except Exception as exc:  # every module error maps to exit code 1
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
