"""Training loops: surrogate regression first, then the guided diffusion
model with inverse-category-frequency sampling."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import diffusion, nets
from .diffusion import DiffusionSchedule, LossWeights, make_schedule, training_loss
from .forge import Sample, sampling_weights
from .nets import (
    DenoiserConfig,
    DenoiserUNet,
    SpectrumSurrogate,
    lr_at,
    make_denoiser,
    make_surrogate,
    save_checkpoint,
)

log = logging.getLogger(__name__)


def split_tensors(samples: list[Sample], split: str) -> dict:
    """Stack one split into training tensors (images stay in [0, 1])."""
    chosen = [s for s in samples if s.split == split]
    if not chosen:
        raise ValueError(f"no samples in split {split!r}")
    return {
        "images": torch.from_numpy(
            np.stack([s.image for s in chosen]).astype(np.float32)
        ),
        "spectra": torch.from_numpy(
            np.stack([s.spectrum for s in chosen]).astype(np.float32)
        ),
        "materials": torch.from_numpy(
            np.stack([s.material.as_vector() for s in chosen]).astype(np.float32)
        ),
        "categories": [s.category for s in chosen],
        "indices": [i for i, s in enumerate(samples) if s.split == split],
    }


@dataclass
class SurrogateTrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr0: float = 1e-3
    seed: int = 0
    # light input noise: the diffusion loss later feeds the surrogate
    # imperfect one-step reconstructions, not clean encodings
    input_noise_std: float = 0.02
    surrogate: dict = field(default_factory=dict)


def train_surrogate(
    samples: list[Sample], config: SurrogateTrainConfig
) -> tuple[SpectrumSurrogate, list[dict]]:
    """Fit the spectrum surrogate on the train split; reports val MSE per epoch."""
    torch.manual_seed(config.seed)
    model = make_surrogate(config.surrogate)
    train = split_tensors(samples, "train")
    val = split_tensors(samples, "val")
    opt = torch.optim.Adam(
        model.parameters(), lr=config.lr0, betas=(0.9, 0.999), eps=1e-8
    )
    gen = torch.Generator().manual_seed(config.seed)
    n = train["images"].shape[0]
    steps = max(1, math.ceil(n / config.batch_size))
    history = []
    for epoch in range(config.epochs):
        lr = lr_at(epoch, config.epochs, config.lr0)
        for group in opt.param_groups:
            group["lr"] = lr
        model.train()
        epoch_loss = 0.0
        for _ in range(steps):
            idx = torch.randint(0, n, (config.batch_size,), generator=gen)
            images = train["images"][idx]
            if config.input_noise_std > 0:
                noise = torch.randn(images.shape, generator=gen)
                images = torch.clamp(images + config.input_noise_std * noise, 0.0, 1.0)
            pred = model(images, train["materials"][idx])
            loss = torch.mean((pred - train["spectra"][idx]) ** 2)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach())
        model.eval()
        with torch.no_grad():
            val_pred = model(val["images"], val["materials"])
            val_mse = float(torch.mean((val_pred - val["spectra"]) ** 2))
        history.append(
            {"epoch": epoch, "lr": lr, "train_loss": epoch_loss / steps, "val_mse": val_mse}
        )
        log.info("surrogate epoch %d: train %.3e val %.3e", epoch, epoch_loss / steps, val_mse)
    return model, history


@dataclass
class DiffusionTrainConfig:
    epochs: int = 60
    batch_size: int = 32
    lr0: float = 1e-4
    T: int = diffusion.DEFAULT_T
    schedule_kind: str = "linear"
    seed: int = 0
    checkpoint_every: int = 20
    conditioning: str = nets.FILM_CONDITIONING
    spectral_loss: bool = True
    weights: LossWeights = field(default_factory=LossWeights)
    denoiser: dict = field(default_factory=dict)

    def effective_weights(self) -> LossWeights:
        if self.spectral_loss:
            return self.weights
        kwargs = asdict(self.weights)
        kwargs["lambda_spec"] = 0.0
        return LossWeights(**kwargs)


def train_diffusion(
    samples: list[Sample],
    surrogate: SpectrumSurrogate | None,
    config: DiffusionTrainConfig,
    out_dir=None,
) -> tuple[DenoiserUNet, DiffusionSchedule, list[dict]]:
    """Train the denoiser with weighted sampling and the physics-guided loss.

    The surrogate is frozen (no parameter updates) but stays in the graph so
    its gradients steer the denoiser. Checkpoints land in out_dir every
    checkpoint_every epochs plus a final model.ckpt.
    """
    torch.manual_seed(config.seed)
    denoiser_cfg = dict(config.denoiser)
    denoiser_cfg["conditioning"] = config.conditioning
    model = make_denoiser(denoiser_cfg)
    schedule = make_schedule(config.T, config.schedule_kind)
    weights = config.effective_weights()
    if weights.lambda_spec > 0 and surrogate is None:
        raise ValueError("spectral loss enabled but no surrogate provided")
    if surrogate is not None:
        surrogate.eval()
        for p in surrogate.parameters():
            p.requires_grad_(False)

    train = split_tensors(samples, "train")
    n = train["images"].shape[0]
    draw_p = sampling_weights(train["categories"])
    draw_p = draw_p / draw_p.sum()
    steps = max(1, math.ceil(n / config.batch_size))

    opt = torch.optim.Adam(
        model.parameters(), lr=config.lr0, betas=(0.9, 0.999), eps=1e-8
    )
    gen = torch.Generator().manual_seed(config.seed)
    batch_rng = np.random.default_rng([config.seed, 0xBA7C])

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    history = []
    for epoch in range(config.epochs):
        lr = lr_at(epoch, config.epochs, config.lr0)
        for group in opt.param_groups:
            group["lr"] = lr
        model.train()
        sums = {"loss": 0.0, "l_r": 0.0, "l_g": 0.0, "l_b": 0.0, "l_spec": 0.0}
        for _ in range(steps):
            idx = batch_rng.choice(n, size=config.batch_size, replace=True, p=draw_p)
            idx = torch.from_numpy(idx)
            loss, parts = training_loss(
                model,
                surrogate,
                train["images"][idx],
                train["spectra"][idx],
                train["materials"][idx],
                weights,
                schedule,
                generator=gen,
            )
            opt.zero_grad()
            loss.backward()
            opt.step()
            for key in sums:
                sums[key] += parts[key]
        record = {"epoch": epoch, "lr": lr}
        record.update({k: v / steps for k, v in sums.items()})
        history.append(record)
        log.info(
            "diffusion epoch %d: loss %.4f (R %.4f G %.4f B %.4f spec %.4f)",
            epoch,
            record["loss"],
            record["l_r"],
            record["l_g"],
            record["l_b"],
            record["l_spec"],
        )
        if out is not None and config.checkpoint_every > 0:
            if (epoch + 1) % config.checkpoint_every == 0:
                save_denoiser_checkpoint(
                    out / f"model_epoch{epoch + 1:04d}.ckpt", model, config
                )
    if out is not None:
        save_denoiser_checkpoint(out / "model.ckpt", model, config)
    return model, schedule, history


def save_denoiser_checkpoint(path, model: DenoiserUNet, config: DiffusionTrainConfig) -> None:
    meta = {
        "denoiser": {k: v for k, v in model.config.__dict__.items()},
        "T": config.T,
        "schedule_kind": config.schedule_kind,
        "loss_weights": asdict(config.weights),
        "conditioning": config.conditioning,
        "spectral_loss": config.spectral_loss,
    }
    save_checkpoint(path, model, kind="denoiser", config=meta)


def load_denoiser_checkpoint(path) -> tuple[DenoiserUNet, DiffusionSchedule, dict]:
    ckpt = nets.load_checkpoint(path)
    if ckpt.kind != "denoiser":
        raise ValueError(f"{path}: expected a denoiser checkpoint, got {ckpt.kind!r}")
    model = make_denoiser(ckpt.config["denoiser"])
    nets.apply_checkpoint(model, ckpt)
    model.eval()
    schedule = make_schedule(ckpt.config["T"], ckpt.config.get("schedule_kind", "linear"))
    return model, schedule, ckpt.config


def save_surrogate_checkpoint(path, model: SpectrumSurrogate) -> None:
    cfg = dict(model.config.__dict__)
    cfg["widths"] = list(cfg["widths"])
    save_checkpoint(path, model, kind="surrogate", config={"surrogate": cfg})


def load_surrogate_checkpoint(path) -> SpectrumSurrogate:
    ckpt = nets.load_checkpoint(path)
    if ckpt.kind != "surrogate":
        raise ValueError(f"{path}: expected a surrogate checkpoint, got {ckpt.kind!r}")
    model = make_surrogate(ckpt.config["surrogate"])
    nets.apply_checkpoint(model, ckpt)
    model.eval()
    return model
