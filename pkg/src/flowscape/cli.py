"""Command-line interface: synthesize, train, animate, evaluate, visualize.

Exit codes: 0 success; 2 usage or config/format problems; 3 data errors
(missing/corrupt files); 4 numeric aborts. Failures print exactly one
``error: <class>: <message>`` line to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import torch

from .config import CONFIG_KEY_DOCS, RunConfig, load_run_config
from .errors import DataError, EvaluationError, FormatError, NumericError
from .evaluation import evaluate_frame_dirs, write_metrics_csv
from .flow_io import (
    flow_to_color,
    image_to_unit_range,
    read_flo,
    read_image,
    write_image,
)
from .inference import ReferenceSet, animate, save_animation
from .synth import Clip, SceneSpec, load_clip, make_scene, random_scene_spec, save_clip
from .taxonomy import CLASS_NAMES, read_mask
from .training import PROTOCOLS, load_checkpoint, save_checkpoint, train

__all__ = ["main", "build_parser"]


def _key_value(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected CLASS=VALUE, got {text!r}")
    name, _, value = text.partition("=")
    return name.strip(), value.strip()


def _assign_arg(text: str) -> tuple[str, int]:
    name, value = _key_value(text)
    try:
        return name, int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"assignment index must be an integer: {text!r}")


def _speed_arg(text: str) -> tuple[str, float]:
    name, value = _key_value(text)
    try:
        return name, float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"speed must be a number: {text!r}")


def _widths_arg(text: str) -> tuple[int, ...]:
    try:
        widths = tuple(int(part) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers: {text!r}")
    if not widths or any(w < 1 for w in widths):
        raise argparse.ArgumentTypeError(f"widths must be positive: {text!r}")
    return widths


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    defaults = RunConfig()
    group = parser.add_argument_group("config keys (flags override the config file)")
    for key, (caster, doc) in CONFIG_KEY_DOCS.items():
        group.add_argument(
            f"--{key.replace('_', '-')}",
            dest=key,
            type=caster,
            default=None,
            help=f"{doc} (config key {key}, default: {getattr(defaults, key)})",
        )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowscape",
        description="Animate landscape stills with per-semantic motion control.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser(
        "synth", help="generate synthetic clips with analytic flows and masks"
    )
    p_synth.add_argument("--out", required=True, help="output directory for clip folders")
    p_synth.add_argument("--spec", help="JSON scene description (one object or a list)")
    p_synth.add_argument("--random", type=int, default=1, metavar="N",
                         help="number of random two-region scenes when no --spec (default: 1)")
    p_synth.add_argument("--size", type=int, default=64, help="frame size (default: 64)")
    p_synth.add_argument("--frames", type=int, default=8,
                         help="steps per clip (default: 8; clip gets N+1 frames)")
    p_synth.add_argument("--seed", type=int, default=0, help="scene seed (default: 0)")
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train", help="fit the encoder and generator on clips")
    p_train.add_argument("--data", required=True, help="directory of clip folders")
    p_train.add_argument("--out", required=True, help="checkpoint output path (.npz)")
    p_train.add_argument("--config", help="flat key=value config file")
    _add_config_flags(p_train)
    p_train.add_argument("--protocol", choices=PROTOCOLS, default="flip-encoder",
                         help="where horizontal mirroring is applied (default: flip-encoder)")
    p_train.add_argument("--base-width", type=int, default=32,
                         help="generator first-level channel count (default: 32)")
    p_train.add_argument("--enc-widths", type=_widths_arg, default=(16, 32, 64, 64),
                         help="encoder channel widths (default: 16,32,64,64)")
    p_train.add_argument("--tv-on-target", action="store_true",
                         help="weight the smoothness loss by the ground-truth frame")
    p_train.add_argument("--log", help="loss history CSV (default: <out>.loss.csv)")
    p_train.add_argument("--quiet", action="store_true", help="suppress progress lines")
    p_train.set_defaults(func=cmd_train)

    p_anim = sub.add_parser("animate", help="animate one image along reference motions")
    p_anim.add_argument("--checkpoint", required=True, help="trained model (.npz)")
    p_anim.add_argument("--image", required=True, help="input still (PNG)")
    p_anim.add_argument("--masks", required=True, help="semantic masks (indexed PNG)")
    p_anim.add_argument("--ref", action="append", required=True, metavar="DIR",
                        help="reference clip directory (repeatable; index order)")
    p_anim.add_argument("--assign", action="append", type=_assign_arg, default=[],
                        metavar="CLASS=REF", help="semantic -> 1-based reference index")
    p_anim.add_argument("--speed", action="append", type=_speed_arg, default=[],
                        metavar="CLASS=S", help="per-semantic speed multiplier")
    p_anim.add_argument("--speed-all", type=float, help="speed multiplier for all semantics")
    p_anim.add_argument("--steps", type=int, default=8, help="generated steps (default: 8)")
    p_anim.add_argument("--out", required=True, help="output directory")
    p_anim.add_argument("--feed", choices=("generated", "first"), default="generated",
                        help="generator frame input per step (default: generated)")
    p_anim.add_argument("--accumulate", choices=("compose", "add"), default="compose",
                        help="how step flows are chained (default: compose)")
    p_anim.add_argument("--ref-stride", type=int, default=None,
                        help="temporal stride for reference clips "
                             "(default: the checkpoint's training stride)")
    p_anim.add_argument("--viz", action="store_true", help="also write flow visualizations")
    p_anim.add_argument("--max-mag", type=float, default=None,
                        help="visualization saturation magnitude (default: per-video max)")
    p_anim.add_argument("--seed", type=int, default=0, help="recorded in the manifest")
    p_anim.set_defaults(func=cmd_animate)

    p_eval = sub.add_parser("eval", help="masked static-region metrics against ground truth")
    p_eval.add_argument("generated", help="generated clip directory")
    p_eval.add_argument("gt", help="ground-truth clip directory")
    p_eval.add_argument("--threshold", type=float, default=2.5,
                        help="dynamic-region threshold in 8-bit units (default: 2.5)")
    p_eval.add_argument("--out", help="metrics CSV path (default: <generated>/metrics.csv)")
    p_eval.set_defaults(func=cmd_eval)

    p_viz = sub.add_parser("flowviz", help="render a .flo file to a color-wheel PNG")
    p_viz.add_argument("flo", help="input flow file")
    p_viz.add_argument("out", help="output PNG path")
    p_viz.add_argument("--max-mag", type=float, default=None,
                       help="saturation magnitude (default: the flow's own max)")
    p_viz.set_defaults(func=cmd_flowviz)

    return parser


def cmd_synth(args: argparse.Namespace) -> int:
    out = Path(args.out)
    if args.spec:
        spec_path = Path(args.spec)
        if not spec_path.exists():
            raise DataError(f"scene spec not found: {spec_path}")
        try:
            data = json.loads(spec_path.read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"bad JSON in {spec_path}: {exc}") from exc
        entries = data if isinstance(data, list) else [data]
        try:
            specs = [SceneSpec.from_dict(entry) for entry in entries]
        except (KeyError, TypeError) as exc:
            raise FormatError(f"bad scene spec in {spec_path}: {exc}") from exc
    else:
        if args.random < 1:
            raise FormatError("--random must be at least 1")
        specs = [
            random_scene_spec(args.seed + i, size=args.size, frame_count=args.frames)
            for i in range(args.random)
        ]
    for i, spec in enumerate(specs):
        clip_dir = save_clip(make_scene(spec), out / f"clip_{i:06d}")
        print(clip_dir)
    return 0


def _load_dataset(data_dir: Path, stride: int) -> list[Clip]:
    if not data_dir.is_dir():
        raise DataError(f"data directory not found: {data_dir}")
    if (data_dir / "frames").is_dir():
        return [load_clip(data_dir, stride=stride)]
    clip_dirs = sorted(d for d in data_dir.iterdir() if (d / "frames").is_dir())
    if not clip_dirs:
        raise DataError(f"no clip directories under {data_dir}")
    return [load_clip(d, stride=stride) for d in clip_dirs]


def cmd_train(args: argparse.Namespace) -> int:
    overrides = {key: getattr(args, key) for key in CONFIG_KEY_DOCS}
    run = load_run_config(args.config, overrides)
    torch.manual_seed(run.seed)
    clips = _load_dataset(Path(args.data), run.stride)
    loss_config = run.to_loss_config(tv_on_generated=not args.tv_on_target)
    train_config = run.to_train_config(protocol=args.protocol)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(".loss.csv")
    result = train(
        clips,
        train_config=train_config,
        loss_config=loss_config,
        encoder_config=run.to_encoder_config(widths=args.enc_widths),
        generator_config=run.to_generator_config(base_width=args.base_width),
        log_path=log_path,
        progress=not args.quiet,
    )
    save_checkpoint(out, result.encoder, result.generator, loss_config, train_config)
    print(f"checkpoint: {out}")
    print(f"loss log:   {log_path}")
    print(f"final loss: {result.final_loss:.6f}")
    return 0


def cmd_animate(args: argparse.Namespace) -> int:
    encoder, generator, meta = load_checkpoint(args.checkpoint)
    image_path = Path(args.image)
    if not image_path.exists():
        raise DataError(f"input image not found: {image_path}")
    image = image_to_unit_range(read_image(image_path))
    masks_path = Path(args.masks)
    if not masks_path.exists():
        raise DataError(f"mask file not found: {masks_path}")
    masks = read_mask(masks_path)

    stride = args.ref_stride
    if stride is None:
        stride = int(meta.get("train_config", {}).get("stride", 1))
    refs_clips = [load_clip(Path(r), stride=stride) for r in args.ref]
    speeds = {name: value for name, value in args.speed}
    if args.speed_all is not None:
        speeds = {name: speeds.get(name, args.speed_all) for name in CLASS_NAMES}
    refs = ReferenceSet(
        clips=refs_clips,
        assignment={name: index for name, index in args.assign},
        speeds=speeds,
    )
    result = animate(
        image, refs, args.steps, encoder, generator,
        initial_masks=masks, feed=args.feed, accumulate=args.accumulate,
    )
    out = save_animation(
        result,
        args.out,
        refs=refs,
        manifest_extra={
            "input_image": str(image_path),
            "input_masks": str(masks_path),
            "reference_dirs": [str(r) for r in args.ref],
            "steps": args.steps,
            "feed": args.feed,
            "accumulate": args.accumulate,
            "ref_stride": stride,
            "seed": args.seed,
            "checkpoint": str(args.checkpoint),
        },
        checkpoint_path=args.checkpoint,
        write_viz=args.viz,
        viz_max_magnitude=args.max_mag,
    )
    print(out)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    row = evaluate_frame_dirs(args.generated, args.gt, threshold=args.threshold)
    out = Path(args.out) if args.out else Path(args.generated) / "metrics.csv"
    write_metrics_csv([row], out)
    epe = "n/a" if row["epe"] is None else f"{row['epe']:.4f}"
    print(
        f"clip={row['clip']} method={row['method']} "
        f"masked_psnr={row['masked_psnr']:.2f} masked_ssim={row['masked_ssim']:.4f} "
        f"epe={epe} frames={row['frames']}"
    )
    print(f"metrics: {out}")
    return 0


def cmd_flowviz(args: argparse.Namespace) -> int:
    flow = read_flo(args.flo)
    if args.max_mag is not None and args.max_mag <= 0:
        raise FormatError("--max-mag must be positive")
    max_mag = args.max_mag
    if max_mag is None:
        max_mag = max(float(flow.pow(2).sum(0).max().sqrt()), 1e-6)
    write_image(args.out, flow_to_color(flow, max_mag))
    print(args.out)
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse handles usage errors and --help
        return int(exc.code) if exc.code else 0
    try:
        return args.func(args)
    except FormatError as exc:
        _fail("format", exc)
        return 2
    except (DataError, EvaluationError) as exc:
        _fail("data", exc)
        return 3
    except NumericError as exc:
        _fail("numeric", exc)
        return 4
    except ValueError as exc:
        _fail("usage", exc)
        return 2


def _fail(kind: str, exc: Exception) -> None:
    message = " ".join(str(exc).split())
    print(f"error: {kind}: {message}", file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
