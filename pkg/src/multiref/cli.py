"""Command-line entry point: ``multiref <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from .config import ConfigError

log = logging.getLogger("multiref")

SETTINGS_ENV = "MULTIREF_SETTINGS"

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
ERROR_CATEGORIES = [  # (exception type name, category, exit code); first match wins
    ("ConfigError", "config", 3),
    ("FusionContractError", "contract", 3),
    ("DatasetError", "data", 4),
    ("EmptyDatasetError", "data", 4),
    ("FileNotFoundError", "io", 4),
    ("WeightsUnavailableError", "weights", 5),
    ("TrainingDivergedError", "diverged", 6),
    ("ValueError", "argument", 7),
]


def _read_frames_dir(path: Path):
    from .data.dataset import VideoSequence, list_frames
    from .data.tracks import read_track_csv

    if not path.is_dir():
        raise FileNotFoundError(f"{path}: not a directory")
    frames = list_frames(path)
    if not frames:
        raise FileNotFoundError(f"{path}: no frames")
    track = read_track_csv(path / "track.csv") if (path / "track.csv").exists() else None
    seq = VideoSequence(name=path.name, paths=frames, track=track)
    seq.load()
    return seq


def _read_image(path: str):
    from .data.dataset import frames_to_tensor, read_frame

    return frames_to_tensor(read_frame(Path(path))[None])[0]


def cmd_synth_data(args) -> int:
    from .data.synthetic import SyntheticSpec, write_synthetic

    program = tuple((a, args.start, args.end) for a in args.axes.split(","))
    spec = SyntheticSpec(
        subjects=args.subjects, frames_per_sequence=args.frames, angle_program=program,
        resolution=args.resolution, seed=args.seed, illumination_variants=args.illuminations,
        expression_phase=args.expression_phase,
    )
    ds = write_synthetic(spec, args.out)
    print(f"wrote {len(ds)} sequences in {len(ds.patterns())} patterns to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .config import desk_train_config, model_config_for, load_config_file
    from .data.dataset import load_dataset
    from .training.trainer import train

    if args.config:
        train_cfg, model_cfg = load_config_file(args.config)
    else:
        train_cfg = desk_train_config()
        model_cfg = model_config_for(train_cfg)
    if args.seed is not None:
        train_cfg.seed = args.seed
    ds = load_dataset(args.data)
    final = train(ds, train_cfg, model_cfg, args.out, resume=args.resume, progress=True)
    print(f"final checkpoint: {final}")
    return EXIT_OK


def cmd_reenact(args) -> int:
    from .checkpoint import load_model
    from .data.dataset import VideoSequence, tensor_to_frames
    from .evaluation.binned import annotate_results
    from .evaluation.reconstruction import generate_sequence

    model, _ = load_model(args.ckpt)
    if args.mode is not None and args.mode != model.fusion_mode:
        raise ConfigError(f"checkpoint fusion mode is {model.fusion_mode!r}, not {args.mode!r}")
    refs = [_read_image(p) for p in args.refs.split(",") if p]
    if not refs:
        raise ValueError("--refs needs at least one image")
    drv = _read_frames_dir(Path(args.driving))
    out = generate_sequence(model, refs, drv.tensor())
    track = annotate_results(drv.track, out) if drv.track is not None else None
    VideoSequence(name="result", frames_uint8=tensor_to_frames(out), track=track).write(args.out)
    print(f"wrote {len(out)} frames (K={len(refs)}) to {args.out}")
    return EXIT_OK


def cmd_eval_recon(args) -> int:
    from .checkpoint import load_model
    from .data.dataset import load_dataset
    from .evaluation.reconstruction import ModelKeypointLandmarker, PooledPixelEmbedder, evaluate_reconstruction

    model, _ = load_model(args.ckpt)
    landmarker = None
    if args.landmarker == "kp":
        lm_model = load_model(args.landmarker_ckpt)[0] if args.landmarker_ckpt else model
        landmarker = ModelKeypointLandmarker(lm_model)
    embedder = PooledPixelEmbedder() if args.embedder == "pooled" else None
    report = evaluate_reconstruction(model, load_dataset(args.data), args.mode, args.refs, landmarker, embedder)
    _emit(report, args.report)
    return EXIT_OK


def cmd_eval_binned(args) -> int:
    from .evaluation.binned import BinSpec, binned_score
    from .evaluation.extractors import build_extractor

    true_seq, res_seq = _read_frames_dir(Path(args.true)), _read_frames_dir(Path(args.result))
    for s, flag in ((true_seq, "--true"), (res_seq, "--result")):
        if s.track is None:
            raise FileNotFoundError(f"{flag} directory has no track.csv")
    spec = BinSpec(args.axis, args.lo, args.hi, args.width)
    report = binned_score(true_seq.tensor(), true_seq.track, res_seq.tensor(), res_seq.track, spec,
                          build_extractor(args.extractor))
    _emit(report, args.report)
    return EXIT_OK if not report.no_overlap else EXIT_FAILURE


def cmd_visualize_masks(args) -> int:
    import torch

    from .checkpoint import load_model
    from .fusion import visualize_masks

    model, _ = load_model(args.ckpt)
    refs = torch.stack([_read_image(p) for p in args.refs.split(",") if p]).unsqueeze(0)
    drv = _read_image(args.driving).unsqueeze(0)
    with torch.no_grad():
        out = model(refs, drv, return_internals=True)
    visualize_masks(out["warped"], out["masks"], model.decode, args.out, drv, refs, args.masks_out)
    print(f"wrote mask grid to {args.out}")
    return EXIT_OK


def _emit(report, path):
    if path:
        report.write(path)
    sys.stdout.write(report.to_text())


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="multiref", description=__doc__)
    p.add_argument("--settings", help=f"YAML defaults per subcommand (or ${SETTINGS_ENV})")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="render the synthetic annotated head-movement dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--subjects", type=int, default=5)
    s.add_argument("--illuminations", type=int, default=2)
    s.add_argument("--frames", type=int, default=61)
    s.add_argument("--resolution", type=int, default=64)
    s.add_argument("--axes", default="yaw,pitch,roll")
    s.add_argument("--start", type=float, default=-60.0)
    s.add_argument("--end", type=float, default=60.0)
    s.add_argument("--expression-phase", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("train", help="two-stage training")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--resume")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("reenact", help="animate reference image(s) with a driving frame folder")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--refs", required=True, help="comma-separated reference image paths")
    s.add_argument("--driving", required=True)
    s.add_argument("--mode", choices=("patch", "element"))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_reenact)

    s = sub.add_parser("eval-recon", help="reconstruction scores (L1D, AKD, AED)")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--refs", choices=("first-mid-last", "first"), default="first-mid-last")
    s.add_argument("--mode", choices=("patch", "element", "single", "pseudo"), required=True)
    s.add_argument("--landmarker", choices=("none", "kp"), default="none")
    s.add_argument("--landmarker-ckpt")
    s.add_argument("--embedder", choices=("none", "pooled"), default="none")
    s.add_argument("--report")
    s.set_defaults(func=cmd_eval_recon)

    s = sub.add_parser("eval-binned", help="angle-binned perceptual distance")
    s.add_argument("--true", required=True, help="frame folder with track.csv")
    s.add_argument("--result", required=True, help="frame folder with track.csv")
    s.add_argument("--axis", choices=("yaw", "pitch", "roll"), default="yaw")
    s.add_argument("--lo", type=float, default=-60.0)
    s.add_argument("--hi", type=float, default=60.0)
    s.add_argument("--width", type=float, default=2.0)
    s.add_argument("--extractor", choices=("alexnet", "identity", "random"), default="alexnet")
    s.add_argument("--report")
    s.set_defaults(func=cmd_eval_binned)

    s = sub.add_parser("visualize-masks", help="decoded warped features and masked results per reference")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--refs", required=True)
    s.add_argument("--driving", required=True, help="driving image path")
    s.add_argument("--out", required=True)
    s.add_argument("--masks-out")
    s.set_defaults(func=cmd_visualize_masks)
    return p


def _apply_settings(parser: argparse.ArgumentParser, argv) -> None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--settings")
    known, _ = pre.parse_known_args(argv)
    path = known.settings or os.environ.get(SETTINGS_ENV)
    if not path:
        return
    with open(path) as fh:
        settings = yaml.safe_load(fh) or {}
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    for name, defaults in settings.items():
        if name == "cache_dir":
            os.environ.setdefault("MULTIREF_CACHE_DIR", str(defaults))
            continue
        if name not in subparsers.choices:
            raise ConfigError(f"settings file names unknown subcommand {name!r}")
        sp = subparsers.choices[name]
        sp.set_defaults(**{k.replace("-", "_"): v for k, v in (defaults or {}).items()})
        # settings satisfy required options
        for action in sp._actions:
            if action.dest in {k.replace("-", "_") for k in defaults or {}}:
                action.required = False


def _categorize(exc: BaseException) -> tuple[str, int]:
    names = {cls.__name__ for cls in type(exc).__mro__}
    for name, category, code in ERROR_CATEGORIES:
        if name in names:
            return category, code
    return "internal", EXIT_FAILURE


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_settings(parser, argv)
    except (OSError, ConfigError, yaml.YAMLError) as exc:
        print(f"error[config]: {exc}", file=sys.stderr)
        return 3
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except Exception as exc:
        category, code = _categorize(exc)
        print(f"error[{category}]: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return code


if __name__ == "__main__":
    sys.exit(main())
