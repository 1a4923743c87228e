"""Command-line entry point.

Subcommands: synth, rasterize, train, eval, infer, plot-ced.  Every
subcommand accepts ``--config FILE`` (YAML or JSON mapping of option names to
values) and ``--print-config``.  Precedence: config file > command-line flags >
built-in defaults.

Exit codes: 0 success, 2 usage error, 3 bad input data, 4 checkpoint problem,
1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__
from .balt_net import FusionConfig, build_balt
from .checkpoint import CheckpointError, load_checkpoint, read_manifest
from .datapipe import AnnotationError, AugmentConfig, FaceDataset, FaceSample, crop_and_resize, load_annotations, make_targets
from .heatmaps import RasterizerConfig, dump_heatmap_grid
from .metrics import NORM_KINDS
from .schemas import SCHEMA_NAMES, SchemaError, get_schema
from .scbe_net import ScbeConfig, StemConfig, build_scbe

log = logging.getLogger("facebound")

EXIT_OK, EXIT_OTHER, EXIT_USAGE, EXIT_DATA, EXIT_CHECKPOINT = 0, 1, 2, 3, 4


PATH_OPTIONS = {"out", "annotations", "checkpoint", "scbe_checkpoint", "image", "overlay", "inputs"}


class UsageError(Exception):
    pass


# -- parser -------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, seed: bool = True) -> None:
    p.add_argument("--config", type=Path, help="YAML/JSON file; its values override flags")
    p.add_argument("--print-config", action="store_true", help="echo the resolved options as JSON to stderr")
    if seed:
        p.add_argument("--seed", type=int, default=0)


def _raster_flags(p: argparse.ArgumentParser) -> None:
    d = RasterizerConfig()
    p.add_argument("--sigma-boundary", type=float, default=d.sigma_boundary, help="heatmap pixels")
    p.add_argument("--sigma-landmark", type=float, default=d.sigma_landmark, help="heatmap pixels")
    p.add_argument("--distance-cutoff", type=float, default=d.distance_cutoff, help="in units of sigma")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="facebound", description="Boundary-aware facial landmark regression.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", help="render a synthetic annotated face corpus")
    p.add_argument("--num", type=int, default=8)
    p.add_argument("--schema", choices=SCHEMA_NAMES, default="wflw98")
    p.add_argument("--out", type=Path, required=True)
    _common(p)

    p = sub.add_parser("rasterize", help="write boundary/landmark target grids for annotated faces")
    p.add_argument("--annotations", type=Path, required=True)
    p.add_argument("--schema", choices=SCHEMA_NAMES, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--limit", type=int, default=None, help="only the first N records")
    p.add_argument("--margin", type=float, default=0.0)
    _raster_flags(p)
    _common(p, seed=False)

    p = sub.add_parser("train", help="run one training phase")
    p.add_argument("--phase", choices=("scbe", "balt"), required=True)
    p.add_argument("--annotations", type=Path, required=True)
    p.add_argument("--schema", choices=SCHEMA_NAMES, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--scbe-checkpoint", type=Path, help="phase-A checkpoint (required for --phase balt)")
    p.add_argument("--epochs", type=int, default=140)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--lr-drops", type=int, nargs="*", default=[80, 120])
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--checkpoint-every", type=int, default=10)
    p.add_argument("--num-workers", type=int, default=0)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--margin", type=float, default=0.0)
    p.add_argument("--joint-finetune", action="store_true", help="phase balt: also update the boundary network")
    g = p.add_argument_group("boundary network (phase scbe)")
    g.add_argument("--stem", choices=("vgg_style", "resnet_style", "hourglass_baseline"), default="vgg_style")
    g.add_argument("--pretrained", action="store_true")
    g.add_argument("--stem-weights", type=str, default=None)
    g.add_argument("--stem-width", type=int, default=None)
    g.add_argument("--stem-channels", type=int, default=64)
    g.add_argument("--stacks", type=int, default=2)
    g.add_argument("--scbe-width", type=int, default=64)
    g.add_argument("--scales", type=int, default=5)
    g = p.add_argument_group("landmark transform network (phase balt)")
    g.add_argument("--fusion", choices=("ss", "ms"), default="ms")
    g.add_argument("--t", type=int, default=2, help="fusion multiplicity, 0..3")
    g.add_argument("--balt-width", type=int, default=64)
    _raster_flags(p)
    _common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint; writes report.tsv, report.json, ced.png")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--annotations", type=Path, required=True)
    p.add_argument("--schema", choices=SCHEMA_NAMES, default=None, help="defaults to the checkpoint's schema")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--norm", choices=NORM_KINDS, default="inter_ocular")
    p.add_argument("--threshold", type=float, default=0.1)
    p.add_argument("--resolution", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=8)
    _common(p, seed=False)

    p = sub.add_parser("infer", help="predict landmarks for one image and face box")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--bbox", type=float, nargs=4, metavar=("X", "Y", "W", "H"), required=True)
    p.add_argument("--out", type=Path, required=True, help="TSV of x, y per landmark")
    p.add_argument("--overlay", type=Path, default=None, help="PNG with landmarks and heatmap drawn on the crop")
    _common(p, seed=False)

    p = sub.add_parser("plot-ced", help="plot CED curves from NME lists or report.json files")
    p.add_argument("inputs", type=Path, nargs="+")
    p.add_argument("--labels", nargs="*", default=None)
    p.add_argument("--threshold", type=float, default=0.1)
    p.add_argument("--resolution", type=int, default=1000)
    p.add_argument("--out", type=Path, required=True)
    _common(p, seed=False)
    return parser


def resolve(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    """Parse ``argv`` and overlay the ``--config`` file, which wins over flags."""
    args = parser.parse_args(argv)
    if args.config is not None:
        try:
            data = yaml.safe_load(args.config.read_text(encoding="utf-8")) or {}
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc.strerror}") from None
        except yaml.YAMLError as exc:
            raise UsageError(f"config {args.config} is not valid YAML/JSON: {exc}") from None
        if not isinstance(data, dict):
            raise UsageError(f"config {args.config} must be a mapping")
        known = set(vars(args)) - {"config", "print_config", "command", "verbose"}
        for key, value in data.items():
            dest = str(key).replace("-", "_")
            if dest not in known:
                raise UsageError(f"config {args.config}: unknown option {key!r} for '{args.command}'")
            if dest in PATH_OPTIONS and value is not None:
                value = [Path(v) for v in value] if isinstance(value, list) else Path(value)
            setattr(args, dest, value)
    return args


def config_dict(args: argparse.Namespace) -> dict:
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items()) if k != "print_config"}


# -- subcommands ---------------------------------------------------------------


def cmd_synth(args) -> int:
    from .synth import synth_dataset

    if args.num < 1:
        raise UsageError("--num must be >= 1")
    try:
        ann = synth_dataset(args.out, args.num, args.schema, seed=args.seed)
    except OSError as exc:
        raise UsageError(f"cannot write to {args.out}: {exc.strerror}") from None
    print(ann)
    return EXIT_OK


def _raster_cfg(args) -> RasterizerConfig:
    try:
        return RasterizerConfig(sigma_boundary=args.sigma_boundary, sigma_landmark=args.sigma_landmark,
                                distance_cutoff=args.distance_cutoff)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_rasterize(args) -> int:
    schema = get_schema(args.schema)
    cfg = _raster_cfg(args)
    samples = load_annotations(args.annotations, schema)[: args.limit]
    args.out.mkdir(parents=True, exist_ok=True)
    for k, s in enumerate(samples):
        _, pts, _ = crop_and_resize(s, margin=args.margin)
        bnd, lmk = make_targets(pts, schema, cfg)
        stem = f"{k:05d}_{s.image_path.stem}"
        dump_heatmap_grid(bnd, args.out, stem)
        dump_heatmap_grid(lmk, args.out, stem)
        np.savez_compressed(args.out / f"{stem}_targets.npz", boundary=bnd.data.astype(np.float32),
                            landmark=lmk.data.astype(np.float32), landmarks=pts)
        if bnd.clamped:
            log.warning("%s: some landmarks fall outside the heatmap and were clamped", s.source)
    print(f"wrote {len(samples)} target sets to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .plotting import plot_loss
    from .trainer import TrainConfig, train_phase

    if args.phase == "balt" and args.scbe_checkpoint is None:
        raise UsageError("train --phase balt needs --scbe-checkpoint (the phase-A output)")
    schema = get_schema(args.schema)
    try:
        tcfg = TrainConfig(phase=args.phase, lr=args.lr, weight_decay=args.weight_decay, epochs=args.epochs,
                           lr_drops=tuple(args.lr_drops), batch_size=args.batch_size, seed=args.seed,
                           max_steps=args.max_steps, checkpoint_every=args.checkpoint_every,
                           num_workers=args.num_workers, joint_finetune=args.joint_finetune)
        fusion = FusionConfig(mode=args.fusion, t=args.t, s=args.scales)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    samples = load_annotations(args.annotations, schema)
    if not samples:
        raise AnnotationError(f"{args.annotations}: no records")
    aug = None if args.no_augment else AugmentConfig(seed=args.seed)
    dataset = FaceDataset(samples, schema, augment_cfg=aug, raster_cfg=_raster_cfg(args), margin=args.margin)

    balt = None
    if args.phase == "scbe":
        try:
            scfg = ScbeConfig(num_stacks=args.stacks, num_boundary_channels=schema.num_boundaries,
                              feature_scales=args.scales, base_width=args.scbe_width)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        stem = StemConfig(args.stem, pretrained=args.pretrained, output_channels=args.stem_channels,
                          weights_path=args.stem_weights)
        scbe = build_scbe(stem, scfg, seed=args.seed, stem_width=args.stem_width)
    else:
        _, scbe, _ = load_checkpoint(args.scbe_checkpoint, expect={"schema": schema.name, "K": schema.num_boundaries})
        if scbe is None:
            raise CheckpointError(f"{args.scbe_checkpoint} holds no boundary network")
        if scbe.cfg.feature_scales < fusion.s:
            raise UsageError(f"checkpoint exports {scbe.cfg.feature_scales} feature scales; --scales {fusion.s} is too many")
        balt = build_balt(schema.num_boundaries, schema.num_landmarks, scbe.feature_channels[: fusion.s], fusion,
                          base_width=args.balt_width, seed=args.seed)
    result = train_phase(scbe, balt, dataset, tcfg, out_dir=args.out)
    plot_loss({args.phase: result.epoch_loss}, args.out / f"{args.phase}_loss.png")
    print(result.checkpoint)
    return EXIT_OK


def _load_models(path: Path, schema_name: str | None):
    manifest, scbe, balt = load_checkpoint(path, expect={"schema": schema_name})
    if scbe is None or balt is None:
        raise CheckpointError(f"{path} must hold both networks (use the phase-balt checkpoint)")
    return manifest, scbe, balt


def cmd_eval(args) -> int:
    from .plotting import plot_ced
    from .trainer import evaluate

    schema_name = args.schema or read_manifest(args.checkpoint)["schema"]
    schema = get_schema(schema_name)
    _, scbe, balt = _load_models(args.checkpoint, schema_name)
    samples = load_annotations(args.annotations, schema)
    if not samples:
        raise AnnotationError(f"{args.annotations}: no records")
    report = evaluate(scbe, balt, samples, schema, norm=args.norm, threshold=args.threshold,
                      batch_size=args.batch_size, resolution=args.resolution)
    args.out.mkdir(parents=True, exist_ok=True)
    report.write_tsv(args.out / "report.tsv")
    report.write_json(args.out / "report.json")
    plot_ced({"full": report.per_image_nme}, args.threshold, args.out / "ced.png", args.resolution,
             title=f"CED ({args.norm})")
    sys.stdout.write((args.out / "report.tsv").read_text(encoding="utf-8"))
    return EXIT_OK


def cmd_infer(args) -> int:
    from .plotting import plot_landmarks
    from .trainer import predict_heatmaps
    from .datapipe import apply_affine, invert_affine, normalize_image
    from .heatmaps import decode_heatmaps

    manifest, scbe, balt = _load_models(args.checkpoint, None)
    sample = FaceSample(args.image, tuple(args.bbox), np.zeros((balt.num_landmarks, 2)))
    crop, _, m = crop_and_resize(sample)
    heat, _ = predict_heatmaps(scbe, balt, normalize_image(crop)[None])
    heat = heat[0].double().numpy()
    coords, confident = decode_heatmaps(heat)
    pts = apply_affine(invert_affine(m), coords)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    lines = ["index\tx\ty\tconfident"] + [f"{i}\t{x:.4f}\t{y:.4f}\t{int(c)}" for i, ((x, y), c) in enumerate(zip(pts, confident))]
    args.out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    if args.overlay is not None:
        plot_landmarks(crop, coords, args.overlay, heatmap=heat.max(axis=0))
    print(args.out)
    return EXIT_OK


def _read_nmes(path: Path) -> list[float]:
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        return [float(v) for v in json.loads(text)["per_image_nme"]]
    return [float(tok) for line in text.splitlines() if line.strip() and not line.startswith("#") for tok in line.split()]


def cmd_plot_ced(args) -> int:
    from .plotting import plot_ced

    labels = args.labels or [p.stem for p in args.inputs]
    if len(labels) != len(args.inputs):
        raise UsageError("--labels must match the number of inputs")
    curves = {}
    for label, path in zip(labels, args.inputs):
        try:
            curves[label] = _read_nmes(path)
        except (OSError, ValueError, KeyError) as exc:
            raise AnnotationError(f"cannot read NMEs from {path}: {exc}") from None
        if not curves[label]:
            raise AnnotationError(f"{path}: empty NME list")
    print(plot_ced(curves, args.threshold, args.out, args.resolution))
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "rasterize": cmd_rasterize, "train": cmd_train, "eval": cmd_eval,
            "infer": cmd_infer, "plot-ced": cmd_plot_ced}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = resolve(parser, argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"facebound: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    if args.print_config:
        print(json.dumps(config_dict(args), indent=1), file=sys.stderr)
    if getattr(args, "seed", None) is not None:
        torch.manual_seed(args.seed)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"facebound {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (AnnotationError, SchemaError, FileNotFoundError) as exc:
        print(f"facebound {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as exc:
        print(f"facebound {args.command}: checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except Exception as exc:  # noqa: BLE001 - last-resort categorization
        log.debug("unhandled error", exc_info=True)
        print(f"facebound {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
