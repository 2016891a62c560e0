"""Diffusion core: noise schedule, forward corruption, physics-guided
training objective, and classifier-free-guided ancestral sampling.

Images are noised in [-1, 1] space; the codec's [0, 1] convention applies
only at the boundary (dataset in, generated design out).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .nets import DenoiserUNet, SpectrumSurrogate

DEFAULT_T = 300
BETA_START = 1e-4
BETA_END = 0.02
# terminal signal retention below which x_T is effectively pure noise
TERMINAL_ALPHA_BAR = 0.05


class NonFiniteLossError(RuntimeError):
    """Raised when a training step or sampling state stops being finite."""

    def __init__(self, message: str, parts: dict | None = None):
        super().__init__(message)
        self.parts = parts or {}


@dataclass
class DiffusionSchedule:
    """Variance schedule: beta_t, alpha_t = 1 - beta_t, and their running
    product alpha_bar_t, all 1-indexed via t-1 lookups."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def validate(self) -> None:
        if self.T < 2:
            raise ValueError(f"schedule needs T >= 2, got {self.T}")
        for arr in (self.beta, self.alpha, self.alpha_bar):
            if arr.shape != (self.T,):
                raise ValueError("schedule arrays must have length T")
        if not (np.all(self.beta > 0) and np.all(self.beta < 1)):
            raise ValueError("beta values must lie in (0, 1)")
        if not np.all(np.diff(self.beta) > 0):
            raise ValueError("beta must be strictly increasing")
        if not np.all(np.diff(self.alpha_bar) < 0):
            raise ValueError("alpha_bar must be strictly decreasing")

    @property
    def near_gaussian_terminal(self) -> bool:
        return float(self.alpha_bar[-1]) < TERMINAL_ALPHA_BAR


def make_schedule(T: int = DEFAULT_T, kind: str = "linear") -> DiffusionSchedule:
    """Linear beta schedule from 1e-4 to 0.02 inclusive.

    Short schedules (T below ~300) keep visible signal at t = T; that is
    fine for unit arithmetic but a warning flags them since generation
    starts from pure noise.
    """
    if kind != "linear":
        raise ValueError(f"unknown schedule kind {kind!r}")
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    beta = np.linspace(BETA_START, BETA_END, T)
    alpha = 1.0 - beta
    schedule = DiffusionSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))
    schedule.validate()
    if not schedule.near_gaussian_terminal:
        warnings.warn(
            f"schedule T={T} retains alpha_bar_T={schedule.alpha_bar[-1]:.3f} "
            f">= {TERMINAL_ALPHA_BAR}; sampling from pure noise will be biased"
        )
    return schedule


def _coeff(values: np.ndarray, t, like: torch.Tensor):
    """Look up a per-timestep coefficient, broadcastable against `like`."""
    if isinstance(t, int):
        return float(values[t - 1])
    idx = torch.as_tensor(t, dtype=torch.long) - 1
    coeff = torch.as_tensor(values, dtype=like.dtype, device=like.device)[idx]
    return coeff.reshape((-1,) + (1,) * (like.ndim - 1))


def forward_sample(
    x0: torch.Tensor, t, noise: torch.Tensor, schedule: DiffusionSchedule
) -> torch.Tensor:
    """Closed-form corruption: sqrt(ab_t) x0 + sqrt(1 - ab_t) noise.

    Coefficients are formed in float64 before casting so batched and scalar
    timesteps agree to working precision even at alpha_bar near 1.
    """
    _check_t(t, schedule.T)
    signal = _coeff(np.sqrt(schedule.alpha_bar), t, x0)
    spread = _coeff(np.sqrt(1.0 - schedule.alpha_bar), t, x0)
    return signal * x0 + spread * noise


def _check_t(t, T: int) -> None:
    if isinstance(t, int):
        if not 1 <= t <= T:
            raise ValueError(f"t={t} outside [1, {T}]")
        return
    tt = torch.as_tensor(t)
    if tt.numel() and (int(tt.min()) < 1 or int(tt.max()) > T):
        raise ValueError(f"timesteps outside [1, {T}]")


def guided_noise(
    eps_cond: torch.Tensor, eps_uncond: torch.Tensor, w: float
) -> torch.Tensor:
    """Classifier-free guidance: eps_cond + w (eps_cond - eps_uncond).

    w = 0 returns the conditional prediction unchanged (bitwise).
    """
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError(
            f"shape mismatch: {tuple(eps_cond.shape)} vs {tuple(eps_uncond.shape)}"
        )
    if w == 0:
        return eps_cond
    return eps_cond + w * (eps_cond - eps_uncond)


def reverse_step(
    x_t: torch.Tensor,
    t: int,
    eps_hat: torch.Tensor,
    schedule: DiffusionSchedule,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """One ancestral step x_t -> x_{t-1} with posterior variance.

    The final step (t = 1) is deterministic.
    """
    _check_t(t, schedule.T)
    beta_t = float(schedule.beta[t - 1])
    alpha_t = float(schedule.alpha[t - 1])
    ab_t = float(schedule.alpha_bar[t - 1])
    mean = (x_t - beta_t / np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(alpha_t)
    if t == 1:
        return mean
    ab_prev = float(schedule.alpha_bar[t - 2])
    var = beta_t * (1.0 - ab_prev) / (1.0 - ab_t)
    z = torch.randn(x_t.shape, generator=generator, dtype=x_t.dtype)
    return mean + np.sqrt(var) * z


@dataclass
class LossWeights:
    """Loss mix and guidance hyperparameters.

    Defaults are the tuned operating point: channel weights 2/1.5/1.5,
    spectral consistency weight 5, guidance scale 5, 10% null-token dropout.
    """

    w_r: float = 2.0
    w_g: float = 1.5
    w_b: float = 1.5
    lambda_spec: float = 5.0
    cfg_dropout: float = 0.1
    guidance_w: float = 5.0

    def __post_init__(self) -> None:
        for name in ("w_r", "w_g", "w_b", "lambda_spec", "guidance_w"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not 0.0 <= self.cfg_dropout < 1.0:
            raise ValueError("cfg_dropout must lie in [0, 1)")


def training_loss(
    denoiser: DenoiserUNet,
    surrogate: SpectrumSurrogate | None,
    images01: torch.Tensor,
    spectra: torch.Tensor,
    materials: torch.Tensor,
    weights: LossWeights,
    schedule: DiffusionSchedule,
    generator: torch.Generator | None = None,
) -> tuple[torch.Tensor, dict]:
    """Physics-guided objective for one batch.

    Per-channel noise-prediction MSEs are weighted and summed with the
    spectral consistency term: the one-step clean-image estimate runs
    through the frozen surrogate and its predicted spectrum is compared to
    the target (sum of squared differences over the 201 points, averaged
    over the batch). Conditions drop to the null token with probability
    cfg_dropout. Raises NonFiniteLossError with the part values when the
    total stops being finite.
    """
    b = images01.shape[0]
    x0 = images01 * 2.0 - 1.0
    t = torch.randint(1, schedule.T + 1, (b,), generator=generator)
    noise = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    x_t = forward_sample(x0, t, noise, schedule)
    null_mask = torch.rand(b, generator=generator) < weights.cfg_dropout
    eps_pred = denoiser(x_t, t, spectra, materials, null_mask)

    # per-channel noise MSE; toy configs may carry fewer than 3 channels
    per_channel = ((eps_pred - noise) ** 2).mean(dim=(0, 2, 3))
    zero = x0.new_zeros(())
    l_r = per_channel[0] if per_channel.numel() > 0 else zero
    l_g = per_channel[1] if per_channel.numel() > 1 else zero
    l_b = per_channel[2] if per_channel.numel() > 2 else zero

    if weights.lambda_spec > 0 and surrogate is not None:
        signal = _coeff(np.sqrt(schedule.alpha_bar), t, x0)
        spread = _coeff(np.sqrt(1.0 - schedule.alpha_bar), t, x0)
        x0_hat = torch.clamp((x_t - spread * eps_pred) / signal, -1.0, 1.0)
        pred = surrogate((x0_hat + 1.0) / 2.0, materials)
        l_spec = ((pred - spectra) ** 2).sum(dim=1).mean()
    else:
        l_spec = x0.new_zeros(())

    loss = (
        weights.w_r * l_r
        + weights.w_g * l_g
        + weights.w_b * l_b
        + weights.lambda_spec * l_spec
    )
    parts = {
        "loss": float(loss.detach()),
        "l_r": float(l_r.detach()),
        "l_g": float(l_g.detach()),
        "l_b": float(l_b.detach()),
        "l_spec": float(l_spec.detach()),
        "n_null": int(null_mask.sum()),
        "n_cond": int(b - null_mask.sum()),
    }
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"non-finite training loss: {parts}", parts)
    return loss, parts


def sample_designs(
    denoiser: DenoiserUNet,
    spectra: torch.Tensor,
    materials: torch.Tensor,
    schedule: DiffusionSchedule,
    guidance_w: float,
    generator: torch.Generator | None = None,
    image_size: int = 32,
) -> np.ndarray:
    """Generate one design per condition row; returns (B, 3, H, W) in [0, 1].

    Each reverse step makes a conditional and an unconditional (null token)
    prediction and mixes them with the guidance scale.
    """
    b = spectra.shape[0]
    denoiser.eval()
    all_null = torch.ones(b, dtype=torch.bool)
    no_null = torch.zeros(b, dtype=torch.bool)
    with torch.no_grad():
        x = torch.randn((b, 3, image_size, image_size), generator=generator)
        for t in range(schedule.T, 0, -1):
            tt = torch.full((b,), t, dtype=torch.long)
            eps_cond = denoiser(x, tt, spectra, materials, no_null)
            if guidance_w == 0:
                # the null branch cannot influence the result; skipping it
                # halves the cost and leaves the noise stream untouched
                eps_hat = eps_cond
            else:
                eps_uncond = denoiser(x, tt, spectra, materials, all_null)
                eps_hat = guided_noise(eps_cond, eps_uncond, guidance_w)
            x = reverse_step(x, t, eps_hat, schedule, generator)
            if not torch.isfinite(x).all():
                raise NonFiniteLossError(f"non-finite sample state at step t={t}")
    images = (torch.clamp(x, -1.0, 1.0) + 1.0) / 2.0
    return images.cpu().numpy().astype(np.float64)


def sample_design(
    denoiser: DenoiserUNet,
    spectrum: np.ndarray,
    material_vec: np.ndarray,
    schedule: DiffusionSchedule,
    guidance_w: float,
    generator: torch.Generator | None = None,
) -> np.ndarray:
    """Single-condition convenience wrapper around sample_designs."""
    spectra = torch.as_tensor(np.asarray(spectrum), dtype=torch.float32).reshape(1, -1)
    materials = torch.as_tensor(np.asarray(material_vec), dtype=torch.float32).reshape(1, 3)
    return sample_designs(
        denoiser, spectra, materials, schedule, guidance_w, generator
    )[0]
