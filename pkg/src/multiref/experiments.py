"""Desk-scale comparison runs: K=3 fusion versus the single-reference baseline.

Trained checkpoints are cached under ``$MULTIREF_CACHE_DIR/experiments``
keyed by a hash of the training and data configuration, so repeated
evaluations reuse them.  Run ``python -m multiref.experiments`` to train
(if needed) and print both comparisons.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
from pathlib import Path

from .checkpoint import load_model
from .config import TrainConfig, desk_train_config, model_config_for, to_dict
from .data.synthetic import SyntheticSpec, generate_synthetic
from .evaluation.binned import pairwise_evaluation
from .evaluation.extractors import build_extractor, cache_dir
from .evaluation.reconstruction import evaluate_reconstruction
from .training.trainer import train

log = logging.getLogger(__name__)

CACHE_VERSION = 1


def train_spec() -> SyntheticSpec:
    return SyntheticSpec()


def heldout_spec() -> SyntheticSpec:
    # same nine patterns, different expression phase and frame count
    return SyntheticSpec(frames_per_sequence=45, expression_phase=1.3)


def _key(cfg: TrainConfig, spec: SyntheticSpec) -> str:
    blob = json.dumps({"v": CACHE_VERSION, "train": to_dict(cfg), "data": dataclasses.asdict(spec)},
                      sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def experiment_root() -> Path:
    return cache_dir() / "experiments"


def trained_checkpoint(cfg: TrainConfig, spec: SyntheticSpec | None = None, root: Path | None = None,
                       dataset=None) -> Path:
    """Path of a finished checkpoint for ``cfg``, training it first if absent."""
    spec = spec or train_spec()
    run = (root or experiment_root()) / f"K{cfg.K}-{cfg.resolution}-{_key(cfg, spec)}"
    final = run / "final.pt"
    if final.exists():
        return final
    log.info("training %s", run)
    dataset = dataset if dataset is not None else generate_synthetic(spec)
    (run / "partial").mkdir(parents=True, exist_ok=True)
    done = train(dataset, cfg, model_config_for(cfg), run / "partial", progress=True)
    done.replace(final)
    (run / "config.json").write_text(json.dumps({"train": to_dict(cfg), "data": dataclasses.asdict(spec)},
                                                indent=1, default=str))
    return final


def desk_pair(root: Path | None = None) -> tuple[Path, Path]:
    """(single-reference checkpoint, K=3 patch checkpoint) under the desk preset."""
    dataset = generate_synthetic(train_spec())
    single = trained_checkpoint(desk_train_config(K=1), root=root, dataset=dataset)
    multi = trained_checkpoint(desk_train_config(K=3), root=root, dataset=dataset)
    return single, multi


def reconstruction_comparison(single_ckpt: Path, multi_ckpt: Path, dataset=None) -> dict[str, float]:
    """Mean self-reenactment L1D for the single, pseudo and fused settings."""
    dataset = dataset if dataset is not None else generate_synthetic(heldout_spec())
    single, _ = load_model(single_ckpt)
    multi, _ = load_model(multi_ckpt)
    return {
        "single": evaluate_reconstruction(single, dataset, "single").l1d,
        "pseudo": evaluate_reconstruction(single, dataset, "pseudo").l1d,
        multi.fusion_mode: evaluate_reconstruction(multi, dataset, multi.fusion_mode).l1d,
    }


def transfer_comparison(single_ckpt: Path, multi_ckpt: Path, dataset=None, extractor: str = "identity",
                        axis: str = "yaw") -> dict[str, float]:
    """Pairwise binned LPIPS on one axis: single model with the frontal reference
    versus the fused model with frontal and +/-30 degree references."""
    dataset = dataset if dataset is not None else generate_synthetic(train_spec())
    ex = build_extractor(extractor)
    single, _ = load_model(single_ckpt)
    multi, _ = load_model(multi_ckpt)
    return {
        "single": pairwise_evaluation(dataset, single, "frontal", axes=(axis,), extractor=ex).mean(axis),
        "fused": pairwise_evaluation(dataset, multi, "frontal-left-right", axes=(axis,), extractor=ex).mean(axis),
    }


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="python -m multiref.experiments", description=__doc__)
    p.add_argument("--root", type=Path, help="checkpoint cache directory")
    p.add_argument("--extractor", default="identity", choices=("identity", "alexnet", "random"))
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    single, multi = desk_pair(args.root)
    recon = reconstruction_comparison(single, multi)
    transfer = transfer_comparison(single, multi, extractor=args.extractor)
    print(json.dumps({"reconstruction_l1d": recon, "binned_yaw": transfer}, indent=1))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
