"""Forward noising, the reverse sampler and the denoiser training loss.

Image batches are float32 tensors of shape (B, 1, H, W) with values in
[-1, 1]. Step indices follow the 1-based convention of
:mod:`fingersynth.schedules`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, TrainingDivergedError
from .schedules import NoiseSchedule

LOSS_KINDS = ("mse", "huber")


@dataclass(frozen=True)
class DiffusionLossConfig:
    loss_kind: str = "mse"
    huber_delta: float = 1.0

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigurationError(f"unknown loss_kind {self.loss_kind!r}, expected one of {LOSS_KINDS}")
        if self.huber_delta <= 0:
            raise ConfigurationError(f"huber_delta must be positive, got {self.huber_delta}")


def _gather(values, t, schedule: NoiseSchedule, like: torch.Tensor) -> torch.Tensor:
    """Pick per-step coefficients for scalar or per-sample t, shaped for broadcasting."""
    arr = torch.as_tensor(values, dtype=like.dtype, device=like.device)
    if isinstance(t, int):
        if not 1 <= t <= schedule.T:
            raise ValueError(f"step {t} outside 1..{schedule.T}")
        return arr[t - 1]
    t = torch.as_tensor(t)
    if t.ndim != 1 or t.shape[0] != like.shape[0]:
        raise ValueError("per-sample t must be a 1-D tensor matching the batch size")
    if bool((t < 1).any()) or bool((t > schedule.T).any()):
        raise ValueError(f"step indices outside 1..{schedule.T}")
    return arr[t - 1].view(-1, *([1] * (like.ndim - 1)))


def forward_sample(x0: torch.Tensor, t, eps: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    """Closed-form noising: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    abar = _gather(s.alpha_bar, t, s, x0)
    return torch.sqrt(abar) * x0 + torch.sqrt(1.0 - abar) * eps


def reverse_step(xt: torch.Tensor, t: int, eps_pred: torch.Tensor, z: torch.Tensor | None, s: NoiseSchedule) -> torch.Tensor:
    """One denoising step.

        x_{t-1} = 1/sqrt(alpha_t) (x_t - (1 - alpha_t)/sqrt(1 - abar_t) eps_pred) + sigma_t z

    z is ignored at t=1 (sigma_1 = 0).
    """
    if eps_pred.shape != xt.shape:
        raise ValueError(f"eps_pred shape {tuple(eps_pred.shape)} != xt shape {tuple(xt.shape)}")
    if not 1 <= t <= s.T:
        raise ValueError(f"step {t} outside 1..{s.T}")
    alpha = s.alpha_at(t)
    abar = s.alpha_bar_at(t)
    mean = (xt - (1.0 - alpha) / (1.0 - abar) ** 0.5 * eps_pred) / alpha**0.5
    if t == 1 or z is None:
        return mean
    if z.shape != xt.shape:
        raise ValueError(f"z shape {tuple(z.shape)} != xt shape {tuple(xt.shape)}")
    return mean + s.sigma_at(t) * z


@torch.no_grad()
def sample_loop(
    model: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
    s: NoiseSchedule,
    batch_shape: Sequence[int],
    seed: int,
    clamp: bool = True,
) -> torch.Tensor:
    """Denoise unit Gaussian noise through steps T..1; deterministic per seed."""
    model_steps = getattr(model, "time_steps", None)
    if model_steps is not None and model_steps != s.T:
        raise ConfigurationError(f"model trained for T={model_steps} but schedule has T={s.T}")
    model_size = getattr(model, "input_size", None)
    if model_size is not None and tuple(batch_shape[-2:]) != (model_size, model_size):
        raise ConfigurationError(f"batch shape {tuple(batch_shape)} does not match model input size {model_size}")
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(*batch_shape, generator=gen)
    b = batch_shape[0]
    for t in range(s.T, 0, -1):
        eps_pred = model(x, torch.full((b,), t, dtype=torch.long))
        z = torch.randn(*batch_shape, generator=gen) if t > 1 else None
        x = reverse_step(x, t, eps_pred, z, s)
    return x.clamp(-1.0, 1.0) if clamp else x


def diffusion_training_loss(
    model: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
    x0: torch.Tensor,
    s: NoiseSchedule,
    cfg: DiffusionLossConfig,
    rng: torch.Generator,
) -> torch.Tensor:
    """Noise-prediction loss with per-sample uniform step draw.

    Draws t ~ U{1..T} and eps ~ N(0, I) per sample, noises x0 in closed form
    and returns the MSE or Huber distance between eps and the model estimate.
    """
    b = x0.shape[0]
    t = torch.randint(1, s.T + 1, (b,), generator=rng)
    eps = torch.randn(x0.shape, generator=rng)
    xt = forward_sample(x0, t, eps, s)
    pred = model(xt, t)
    if cfg.loss_kind == "mse":
        return F.mse_loss(pred, eps)
    return F.huber_loss(pred, eps, delta=cfg.huber_delta)


@dataclass
class DiffusionTrainConfig:
    batch_size: int = 64
    learning_rate: float = 1e-4
    epochs: int = 500
    loss: DiffusionLossConfig = field(default_factory=DiffusionLossConfig)


def train_ddpm(
    images: torch.Tensor,
    model,
    s: NoiseSchedule,
    cfg: DiffusionTrainConfig,
    seed: int,
    augment: Callable[[torch.Tensor, torch.Generator], torch.Tensor] | None = None,
    on_epoch: Callable[[int, dict], None] | None = None,
) -> list[dict]:
    """Train a denoiser on an image stack; returns per-epoch loss records.

    `augment`, when given, is applied to each batch before noising.
    Non-finite losses abort with :class:`TrainingDivergedError`.
    """
    if images.ndim != 4 or images.shape[0] == 0:
        raise ConfigurationError("training images must be a nonempty (B,1,H,W) tensor")
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    n = images.shape[0]
    log: list[dict] = []
    for epoch in range(1, cfg.epochs + 1):
        perm = torch.randperm(n, generator=gen)
        total, batches = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            batch = images[perm[start : start + cfg.batch_size]]
            if augment is not None:
                batch = augment(batch, gen)
            opt.zero_grad()
            loss = diffusion_training_loss(model, batch, s, cfg.loss, gen)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite diffusion loss at epoch {epoch}", epoch=epoch)
            loss.backward()
            opt.step()
            total += loss.item()
            batches += 1
        record = {"epoch": epoch, "loss": total / max(batches, 1)}
        log.append(record)
        if on_epoch is not None:
            on_epoch(epoch, record)
    model.time_steps = s.T
    return log
