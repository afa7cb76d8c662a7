"""Two-stage training loop with per-epoch checkpoints and a JSON-lines log."""

from __future__ import annotations

import json
import logging
import math
import time
from pathlib import Path

import numpy as np
import torch

from ..checkpoint import manifest_model_config, manifest_train_config, read_checkpoint, save_checkpoint
from ..config import ConfigError, ModelConfig, TrainConfig, model_config_for, to_dict
from ..model.generator import ReenactmentModel
from .discriminator import MultiScaleDiscriminator
from .losses import PerceptualPyramidLoss, check_finite, compute_losses, discriminator_gan_loss
from .sampling import EmptyDatasetError, sample_training_batch
from .schedule import lr_at_epoch

log = logging.getLogger(__name__)

# fields that may differ between a run and the checkpoint it resumes from
RESUMABLE_FIELDS = {"stage1_epochs", "stage2_epochs", "checkpoint_every", "seed", "decay_epochs"}


def _check_resume_compatible(state: dict, train_cfg: TrainConfig, model_cfg: ModelConfig) -> None:
    saved_model = manifest_model_config(state)
    if to_dict(saved_model) != to_dict(model_cfg):
        raise ConfigError("resume checkpoint was written with a different model configuration")
    saved_train = manifest_train_config(state)
    if saved_train is None:
        raise ConfigError("resume checkpoint has no training manifest")
    a, b = to_dict(saved_train), to_dict(train_cfg)
    diff = sorted(k for k in a if k not in RESUMABLE_FIELDS and a[k] != b[k])
    if diff:
        raise ConfigError(f"resume checkpoint disagrees with the config on: {diff}")


class Trainer:
    def __init__(self, dataset, config: TrainConfig, model_config: ModelConfig | None = None,
                 out_dir: str | Path = "runs/train", seed: int | None = None):
        if len(dataset) == 0:
            raise EmptyDatasetError("dataset contains no videos")
        self.dataset = dataset
        self.cfg = config
        self.model_cfg = model_config or model_config_for(config)
        if self.model_cfg.resolution != config.resolution:
            raise ConfigError("model and training resolution differ")
        self.out_dir = Path(out_dir)
        self.seed = config.seed if seed is None else seed
        torch.manual_seed(self.seed)
        self.model = ReenactmentModel(self.model_cfg)
        self.perceptual = PerceptualPyramidLoss(config.perceptual_scales, config.perceptual_backbone)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=config.lr, betas=config.adam_betas)
        self.discriminator: MultiScaleDiscriminator | None = None
        self.disc_optimizer = None
        self.discriminator_calls = 0
        self.rng = np.random.default_rng(self.seed)
        self.torch_gen = torch.Generator().manual_seed(self.seed)
        self.start_epoch = 0
        self.checkpoints: list[Path] = []

    @property
    def steps_per_epoch(self) -> int:
        return max(1, math.ceil(self.cfg.samples_per_epoch / self.cfg.batch_size))

    def _count_disc_call(self, *_):
        self.discriminator_calls += 1

    def _ensure_discriminator(self):
        if self.discriminator is None:
            self.discriminator = MultiScaleDiscriminator(self.model_cfg)
            self.discriminator.register_forward_hook(self._count_disc_call)
            self.disc_optimizer = torch.optim.Adam(
                self.discriminator.parameters(), lr=self.cfg.lr, betas=self.cfg.adam_betas
            )

    def resume(self, path: str | Path) -> None:
        state = read_checkpoint(path)
        _check_resume_compatible(state, self.cfg, self.model_cfg)
        self.model.load_state_dict(state["model"])
        self.optimizer.load_state_dict(state["optimizers"]["generator"])
        if state.get("discriminator") is not None:
            self._ensure_discriminator()
            self.discriminator.load_state_dict(state["discriminator"])
            self.disc_optimizer.load_state_dict(state["optimizers"]["discriminator"])
        extra = state.get("extra", {})
        if "numpy_rng" in extra:
            self.rng.bit_generator.state = extra["numpy_rng"]
        if "torch_rng" in extra:
            self.torch_gen.set_state(extra["torch_rng"])
        self.start_epoch = state["manifest"]["epoch"] + 1

    def _set_lr(self, epoch: int) -> float:
        lr = lr_at_epoch(self.cfg, epoch)
        for opt in (self.optimizer, self.disc_optimizer):
            if opt is not None:
                for group in opt.param_groups:
                    group["lr"] = lr
        return lr

    def train_step(self, stage: int) -> dict[str, float]:
        batch = sample_training_batch(self.dataset, self.cfg, self.rng)
        self.model.train()
        out = self.model(batch.references, batch.driving, return_internals=True)
        disc = self.discriminator if stage == 2 else None
        terms = compute_losses(out["prediction"], batch.driving, out, self.model.kp_detector, self.cfg,
                               self.perceptual, disc, self.torch_gen)
        self.optimizer.zero_grad(set_to_none=True)
        terms["total"].backward()
        self.optimizer.step()
        record = {k: v.item() for k, v in terms.items()}

        if disc is not None:
            self.disc_optimizer.zero_grad(set_to_none=True)
            _, real = disc(batch.driving)
            _, fake = disc(out["prediction"].detach())
            d_loss = discriminator_gan_loss(real, fake)
            check_finite({"discriminator_gan": d_loss}, "(discriminator)")
            (self.cfg.loss_weights.discriminator_gan * d_loss).backward()
            self.disc_optimizer.step()
            record["discriminator_gan"] = d_loss.item()
        return record

    def _checkpoint(self, epoch: int) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / f"checkpoint_epoch{epoch:04d}.pt"
        optimizers = {"generator": self.optimizer}
        if self.disc_optimizer is not None:
            optimizers["discriminator"] = self.disc_optimizer
        extra = {"numpy_rng": self.rng.bit_generator.state, "torch_rng": self.torch_gen.get_state()}
        save_checkpoint(path, self.model, self.cfg, epoch, self.discriminator, optimizers, extra)
        return path

    def run(self, progress: bool = False) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        log_path = self.out_dir / "train_log.jsonl"
        last = None
        with open(log_path, "a") as log_fh:
            for epoch in range(self.start_epoch, self.cfg.total_epochs):
                stage = 1 if epoch < self.cfg.stage1_epochs else 2
                if stage == 2:
                    self._ensure_discriminator()
                lr = self._set_lr(epoch)
                t0 = time.time()
                for step in range(self.steps_per_epoch):
                    record = self.train_step(stage)
                    record.update(epoch=epoch, step=step, lr=lr, stage=stage)
                    log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
                if progress:
                    log.info("epoch %d stage %d lr %.2e total %.4f (%.1fs)", epoch, stage, lr,
                             record["total"], time.time() - t0)
                is_last = epoch == self.cfg.total_epochs - 1
                if is_last or (epoch + 1) % self.cfg.checkpoint_every == 0:
                    last = self._checkpoint(epoch)
                    self.checkpoints.append(last)
        if last is None:
            raise ConfigError("nothing to train: resume point is past the configured epochs")
        final = self.out_dir / "final.pt"
        final.write_bytes(last.read_bytes())
        return final


def train(dataset, config: TrainConfig, model_config: ModelConfig | None = None, out_dir="runs/train",
          resume: str | Path | None = None, seed: int | None = None, progress: bool = False) -> Path:
    """Train a reenactment model; returns the path of the final checkpoint."""
    trainer = Trainer(dataset, config, model_config, out_dir, seed)
    if resume is not None:
        trainer.resume(resume)
    return trainer.run(progress=progress)
