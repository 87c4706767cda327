"""Unpaired live/spoof translation with CycleWGAN-GP.

Generators follow the residual image-to-image body
c7s1-64, d128, d256, R256 x6, u128, u64, c7s1-1 (instance norm, reflection
padding, ReLU) with a tanh output; critics reuse the C64-C128-C256-C512
patch critic. The `base` width scales the whole family for desk-scale runs.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, TrainingDivergedError
from .gan import PatchCritic, gradient_penalty


@dataclass(frozen=True)
class CycleLossConfig:
    lambda_cycle: float = 10.0
    lambda_identity: float = 0.5
    lambda_gp: float = 10.0
    learning_rate: float = 2e-4
    beta1: float = 0.5
    batch_size: int = 1
    epochs_constant: int = 100
    epochs_decay: int = 100
    n_critic: int = 5

    def __post_init__(self):
        for name in ("lambda_cycle", "lambda_identity", "lambda_gp"):
            v = getattr(self, name)
            if not (v >= 0.0 and v == v):
                raise ConfigurationError(f"{name} must be finite and >= 0, got {v}")
        if self.batch_size < 1 or self.n_critic < 1:
            raise ConfigurationError("batch_size and n_critic must be positive")


def lr_at_epoch(epoch: int, base_lr: float, epochs_constant: int, epochs_decay: int) -> float:
    """Constant learning rate, then linear decay to zero.

    Epochs are 1-based; epoch `epochs_constant + epochs_decay` lands at zero
    and any later epoch stays there.
    """
    if epoch <= epochs_constant:
        return base_lr
    frac = (epoch - epochs_constant) / epochs_decay
    return base_lr * max(0.0, 1.0 - frac)


class ResidualBlock(nn.Module):
    """Two 3x3 convolutions with the same filter count and a skip."""

    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.body(x)


class ResnetGenerator(nn.Module):
    """Image-to-image generator with a residual body and tanh output."""

    def __init__(self, base: int = 64, n_blocks: int = 6, in_channels: int = 1, out_channels: int = 1):
        super().__init__()
        if n_blocks < 1:
            raise ConfigurationError("need at least one residual block")
        self.base = base
        self.n_blocks = n_blocks
        self.head = nn.Sequential(
            nn.ReflectionPad2d(3),
            nn.Conv2d(in_channels, base, 7),
            nn.InstanceNorm2d(base),
            nn.ReLU(inplace=True),
        )
        self.down1 = self._down(base, base * 2)
        self.down2 = self._down(base * 2, base * 4)
        self.res = nn.Sequential(*[ResidualBlock(base * 4) for _ in range(n_blocks)])
        self.up1 = self._up(base * 4, base * 2)
        self.up2 = self._up(base * 2, base)
        self.tail = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(base, out_channels, 7), nn.Tanh())

    @staticmethod
    def _down(ci, co):
        return nn.Sequential(nn.Conv2d(ci, co, 3, stride=2, padding=1), nn.InstanceNorm2d(co), nn.ReLU(inplace=True))

    @staticmethod
    def _up(ci, co):
        return nn.Sequential(
            nn.ConvTranspose2d(ci, co, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(co),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        if x.shape[-1] % 4 or x.shape[-2] % 4:
            raise ValueError(f"input size must be divisible by 4, got {tuple(x.shape[-2:])}")
        h = self.head(x)
        h = self.down2(self.down1(h))
        h = self.res(h)
        h = self.up2(self.up1(h))
        return self.tail(h)


@dataclass
class CycleModelSet:
    g_ab: ResnetGenerator
    g_ba: ResnetGenerator
    d_a: PatchCritic
    d_b: PatchCritic


def build_cycle_models(base: int = 64, n_blocks: int = 6, critic_base: int = 64, seed: int = 0) -> CycleModelSet:
    torch.manual_seed(seed)
    return CycleModelSet(
        g_ab=ResnetGenerator(base, n_blocks),
        g_ba=ResnetGenerator(base, n_blocks),
        d_a=PatchCritic(critic_base),
        d_b=PatchCritic(critic_base),
    )


def cycle_consistency_loss(g_ab, g_ba, batch_a: torch.Tensor, batch_b: torch.Tensor) -> torch.Tensor:
    """Mean absolute reconstruction error of both round trips.

    A-domain images go A->B->A, B-domain images go B->A->B.
    """
    if batch_a.shape[1:] != batch_b.shape[1:]:
        raise ValueError("domain batches must share image shape")
    return F.l1_loss(g_ba(g_ab(batch_a)), batch_a) + F.l1_loss(g_ab(g_ba(batch_b)), batch_b)


def identity_loss(g_ab, g_ba, batch_a: torch.Tensor, batch_b: torch.Tensor) -> torch.Tensor:
    """Mean absolute change when a generator sees its own target domain."""
    if batch_a.shape[1:] != batch_b.shape[1:]:
        raise ValueError("domain batches must share image shape")
    return F.l1_loss(g_ab(batch_b), batch_b) + F.l1_loss(g_ba(batch_a), batch_a)


def cycle_full_objective(
    models: CycleModelSet,
    batch_a: torch.Tensor,
    batch_b: torch.Tensor,
    cfg: CycleLossConfig,
    rng: torch.Generator,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Full translation objective and its four-term breakdown.

    The two adversarial terms (each with its own gradient penalty) pair the
    A-domain critic with B->A fakes and vice versa; cycle and identity terms
    enter with their configured weights.
    """
    fake_a = models.g_ba(batch_b)
    fake_b = models.g_ab(batch_a)
    adv_a = models.d_a(fake_a).mean() - models.d_a(batch_a).mean()
    if cfg.lambda_gp:
        adv_a = adv_a + cfg.lambda_gp * gradient_penalty(models.d_a, batch_a, fake_a.detach(), rng)
    adv_b = models.d_b(fake_b).mean() - models.d_b(batch_b).mean()
    if cfg.lambda_gp:
        adv_b = adv_b + cfg.lambda_gp * gradient_penalty(models.d_b, batch_b, fake_b.detach(), rng)
    cyc = cfg.lambda_cycle * cycle_consistency_loss(models.g_ab, models.g_ba, batch_a, batch_b)
    idt = cfg.lambda_identity * identity_loss(models.g_ab, models.g_ba, batch_a, batch_b)
    total = adv_a + adv_b + cyc + idt
    breakdown = {
        "adv_a": float(adv_a.detach()),
        "adv_b": float(adv_b.detach()),
        "cycle": float(cyc.detach()),
        "identity": float(idt.detach()),
    }
    return total, breakdown


def translate(G: ResnetGenerator, images: torch.Tensor) -> torch.Tensor:
    """Map a batch through a trained generator; same shape, values in [-1, 1]."""
    if images.ndim != 4 or images.shape[1] != 1:
        raise ValueError(f"expected (B,1,H,W) batch, got {tuple(images.shape)}")
    with torch.no_grad():
        out = G(images)
    return out


def train_cycle_wgan_gp(
    domain_a: torch.Tensor,
    domain_b: torch.Tensor,
    cfg: CycleLossConfig,
    seed: int,
    models: CycleModelSet | None = None,
    base: int = 64,
    n_blocks: int = 6,
    critic_base: int = 64,
    on_epoch=None,
) -> tuple[CycleModelSet, list[dict]]:
    """Train the four-network translation set.

    One epoch is one pass over the larger domain; the smaller domain is
    resampled with replacement. Critics take `n_critic` updates per
    generator update. The learning rate is constant for `epochs_constant`
    epochs and then decays linearly to zero over `epochs_decay` epochs.
    """
    if domain_a.ndim != 4 or domain_a.shape[0] == 0 or domain_b.ndim != 4 or domain_b.shape[0] == 0:
        raise ConfigurationError("both domains must be nonempty (B,1,H,W) tensors")
    if models is None:
        models = build_cycle_models(base, n_blocks, critic_base, seed)
    epochs = cfg.epochs_constant + cfg.epochs_decay
    opt_g = torch.optim.Adam(
        itertools.chain(models.g_ab.parameters(), models.g_ba.parameters()),
        lr=cfg.learning_rate,
        betas=(cfg.beta1, 0.999),
    )
    opt_d = torch.optim.Adam(
        itertools.chain(models.d_a.parameters(), models.d_b.parameters()),
        lr=cfg.learning_rate,
        betas=(cfg.beta1, 0.999),
    )

    n_a, n_b = domain_a.shape[0], domain_b.shape[0]
    iters = max(n_a, n_b) // cfg.batch_size
    log: list[dict] = []
    for epoch in range(1, epochs + 1):
        lr = lr_at_epoch(epoch, cfg.learning_rate, cfg.epochs_constant, cfg.epochs_decay)
        for group in itertools.chain(opt_g.param_groups, opt_d.param_groups):
            group["lr"] = lr
        gen = torch.Generator().manual_seed(seed * 1_000_003 + epoch)
        big_a = n_a >= n_b
        perm = torch.randperm(max(n_a, n_b), generator=gen)
        sums = {"adv_a": 0.0, "adv_b": 0.0, "cycle": 0.0, "identity": 0.0, "total": 0.0}
        g_updates = 0
        for it in range(iters):
            lo = it * cfg.batch_size
            idx_big = perm[lo : lo + cfg.batch_size]
            idx_small = torch.randint(0, min(n_a, n_b), (len(idx_big),), generator=gen)
            a = domain_a[idx_big if big_a else idx_small]
            b = domain_b[idx_small if big_a else idx_big]

            # critic step
            opt_d.zero_grad()
            fake_a = models.g_ba(b).detach()
            fake_b = models.g_ab(a).detach()
            d_loss = (
                models.d_a(fake_a).mean() - models.d_a(a).mean()
                + models.d_b(fake_b).mean() - models.d_b(b).mean()
                + cfg.lambda_gp * gradient_penalty(models.d_a, a, fake_a, gen)
                + cfg.lambda_gp * gradient_penalty(models.d_b, b, fake_b, gen)
            )
            if not torch.isfinite(d_loss):
                raise TrainingDivergedError(f"non-finite critic loss at epoch {epoch}", epoch=epoch)
            d_loss.backward()
            opt_d.step()

            if (it + 1) % cfg.n_critic == 0:
                opt_g.zero_grad()
                fa, fb = models.g_ba(b), models.g_ab(a)
                cyc = cycle_consistency_loss(models.g_ab, models.g_ba, a, b)
                idt = identity_loss(models.g_ab, models.g_ba, a, b)
                g_loss = (
                    -models.d_a(fa).mean() - models.d_b(fb).mean()
                    + cfg.lambda_cycle * cyc + cfg.lambda_identity * idt
                )
                if not torch.isfinite(g_loss):
                    raise TrainingDivergedError(f"non-finite generator loss at epoch {epoch}", epoch=epoch)
                g_loss.backward()
                opt_g.step()
                g_updates += 1
                sums["cycle"] += float(cyc.detach())
                sums["identity"] += float(idt.detach())
                sums["total"] += float(g_loss.detach())

        with torch.no_grad():
            probe = min(8, n_a, n_b)
            adv_a = float(models.d_a(models.g_ba(domain_b[:probe])).mean() - models.d_a(domain_a[:probe]).mean())
            adv_b = float(models.d_b(models.g_ab(domain_a[:probe])).mean() - models.d_b(domain_b[:probe]).mean())
        record = {
            "epoch": epoch,
            "lr": lr,
            "iterations": iters,
            "adv_a": adv_a,
            "adv_b": adv_b,
            "cycle": sums["cycle"] / max(g_updates, 1),
            "identity": sums["identity"] / max(g_updates, 1),
            "generator_total": sums["total"] / max(g_updates, 1),
        }
        log.append(record)
        if on_epoch is not None:
            on_epoch(epoch, record, models)
    return models, log


def save_cycle_set(path, models: CycleModelSet, cfg: CycleLossConfig | None = None, epoch: int = 0) -> None:
    from .checkpoints import save_checkpoint

    state = {}
    for prefix, net in (("g_ab", models.g_ab), ("g_ba", models.g_ba), ("d_a", models.d_a), ("d_b", models.d_b)):
        state |= {f"{prefix}.{k}": v for k, v in net.state_dict().items()}
    spec = {
        "base": models.g_ab.base,
        "n_blocks": models.g_ab.n_blocks,
        "critic_base": models.d_a.blocks[0][0].out_channels,
    }
    extra = {"epoch": epoch}
    if cfg is not None:
        extra["config"] = {
            "lambda_cycle": cfg.lambda_cycle,
            "lambda_identity": cfg.lambda_identity,
            "lambda_gp": cfg.lambda_gp,
            "learning_rate": cfg.learning_rate,
            "beta1": cfg.beta1,
            "batch_size": cfg.batch_size,
            "epochs_constant": cfg.epochs_constant,
            "epochs_decay": cfg.epochs_decay,
            "n_critic": cfg.n_critic,
        }
    save_checkpoint(path, "cycle_set", spec, state, extra)


def load_cycle_set(path) -> tuple[CycleModelSet, dict]:
    from .checkpoints import load_checkpoint, state_to_module

    ckpt = load_checkpoint(path)
    if ckpt.kind != "cycle_set":
        raise ValueError(f"{path}: checkpoint kind {ckpt.kind!r} is not a cycle set")
    models = CycleModelSet(
        g_ab=ResnetGenerator(ckpt.spec["base"], ckpt.spec["n_blocks"]),
        g_ba=ResnetGenerator(ckpt.spec["base"], ckpt.spec["n_blocks"]),
        d_a=PatchCritic(ckpt.spec["critic_base"]),
        d_b=PatchCritic(ckpt.spec["critic_base"]),
    )
    for prefix, net in (("g_ab", models.g_ab), ("g_ba", models.g_ba), ("d_a", models.d_a), ("d_b", models.d_b)):
        state_to_module(net, {k[len(prefix) + 1 :]: v for k, v in ckpt.params.items() if k.startswith(prefix + ".")})
    return models, ckpt.extra
