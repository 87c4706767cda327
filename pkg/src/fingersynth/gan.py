"""From-noise synthesis with WGAN-GP.

The critic follows the four-block C64-C128-C256-C512 layout (4x4 stride-2
convolutions, no normalization on the first block, leaky slope 0.2) reduced
to a scalar score per image; the generator mirrors it with fractional-stride
convolutions fed by a latent vector. Both scale by a `base` width so the
desk-scale profile stays cheap.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import CapabilityError, ConfigurationError, TrainingDivergedError


@dataclass(frozen=True)
class GanLossConfig:
    lambda_gp: float = 10.0
    n_critic: int = 5
    learning_rate: float = 1e-4
    beta1: float = 0.5

    def __post_init__(self):
        if not (self.lambda_gp >= 0.0 and self.lambda_gp == self.lambda_gp):
            raise ConfigurationError(f"lambda_gp must be finite and >= 0, got {self.lambda_gp}")
        if self.n_critic < 1:
            raise ConfigurationError(f"n_critic must be positive, got {self.n_critic}")


class NoiseGenerator(nn.Module):
    """Latent vector to single-channel image in [-1, 1]."""

    def __init__(self, latent_dim: int = 128, out_size: int = 112, base: int = 64):
        super().__init__()
        if out_size % 16 != 0:
            raise ConfigurationError(f"output size must be divisible by 16, got {out_size}")
        self.latent_dim = latent_dim
        self.out_size = out_size
        start = out_size // 16
        ch = [base * 8, base * 4, base * 2, base]
        self.project = nn.Linear(latent_dim, ch[0] * start * start)
        self.start_shape = (ch[0], start, start)
        ups = []
        for ci, co in zip(ch[:-1], ch[1:]):
            ups += [nn.ConvTranspose2d(ci, co, 4, stride=2, padding=1), nn.InstanceNorm2d(co), nn.ReLU(inplace=True)]
        ups += [nn.ConvTranspose2d(ch[-1], 1, 4, stride=2, padding=1), nn.Tanh()]
        self.net = nn.Sequential(*ups)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ValueError(f"expected (B, {self.latent_dim}) latent batch, got {tuple(z.shape)}")
        h = self.project(z).view(z.shape[0], *self.start_shape)
        return self.net(h)


class PatchCritic(nn.Module):
    """C64-C128-C256-C512 critic reduced to one unbounded score per image."""

    def __init__(self, base: int = 64, in_channels: int = 1):
        super().__init__()
        widths = [base, base * 2, base * 4, base * 8]
        blocks = []
        prev = in_channels
        for i, w in enumerate(widths):
            layers = [nn.Conv2d(prev, w, 4, stride=2, padding=1)]
            if i > 0:
                layers.append(nn.InstanceNorm2d(w))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
            blocks.append(nn.Sequential(*layers))
            prev = w
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Conv2d(prev, 1, 4, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] < 32 or x.shape[-2] < 32:
            raise ValueError(f"critic needs images of at least 32x32, got {tuple(x.shape[-2:])}")
        h = x
        for block in self.blocks:
            h = block(h)
        return self.head(h).mean(dim=(1, 2, 3))


def build_generator(latent_dim: int = 128, out_size: int = 112, base: int = 64, seed: int = 0) -> NoiseGenerator:
    torch.manual_seed(seed)
    return NoiseGenerator(latent_dim, out_size, base)


def build_critic(base: int = 64, in_channels: int = 1, seed: int = 0) -> PatchCritic:
    torch.manual_seed(seed)
    return PatchCritic(base, in_channels)


def gradient_penalty(D, x_real: torch.Tensor, x_fake: torch.Tensor, rng: torch.Generator) -> torch.Tensor:
    """Mean squared deviation of the critic's input-gradient norm from 1.

    Evaluated at per-sample uniform mixtures of real and fake batches. A
    critic that is constant in its input has gradient norm 0 everywhere,
    giving a penalty of exactly 1.
    """
    if x_real.shape != x_fake.shape:
        raise ValueError(f"real {tuple(x_real.shape)} and fake {tuple(x_fake.shape)} shapes differ")
    coeff = torch.rand(x_real.shape[0], *([1] * (x_real.ndim - 1)), generator=rng, dtype=x_real.dtype)
    x_hat = (coeff * x_real + (1.0 - coeff) * x_fake).detach().requires_grad_(True)
    scores = D(x_hat)
    if not isinstance(scores, torch.Tensor):
        raise CapabilityError("critic did not return a tensor; cannot differentiate")
    if not scores.requires_grad:
        # constant critic: zero input gradient
        return torch.ones((), dtype=x_real.dtype)
    try:
        (grads,) = torch.autograd.grad(scores.sum(), x_hat, create_graph=True)
    except RuntimeError as exc:
        raise CapabilityError(f"critic is not differentiable with respect to its input: {exc}") from exc
    norms = grads.flatten(1).norm(2, dim=1)
    return ((norms - 1.0) ** 2).mean()


def wgan_gp_critic_loss(D, G, x_real: torch.Tensor, z: torch.Tensor, cfg: GanLossConfig, rng: torch.Generator) -> torch.Tensor:
    """E[D(G(z))] - E[D(x_real)] + lambda_gp * gradient penalty."""
    x_fake = G(z).detach()
    loss = D(x_fake).mean() - D(x_real).mean()
    if cfg.lambda_gp != 0.0:
        loss = loss + cfg.lambda_gp * gradient_penalty(D, x_real, x_fake, rng)
    return loss


def wgan_generator_loss(D, G, z: torch.Tensor) -> torch.Tensor:
    """-E[D(G(z))]; minimizing it raises the critic's score on fakes."""
    return -D(G(z)).mean()


def wgan_loss(D, G, x_real: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Plain Wasserstein objective, E[D(x)] - E[D(G(z))]."""
    return D(x_real).mean() - D(G(z)).mean()


def original_gan_loss(D, G, x_real: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Minimax cross-entropy objective, E[log D(x)] + E[log(1 - D(G(z)))].

    D must emit probabilities in (0, 1) here, unlike the Wasserstein critic.
    """
    return torch.log(D(x_real)).mean() + torch.log(1.0 - D(G(z))).mean()


def _adam_state(opt: torch.optim.Adam, names: list[str]) -> tuple[dict, int]:
    params = opt.param_groups[0]["params"]
    out, steps = {}, 0
    for name, p in zip(names, params):
        st = opt.state.get(p)
        if st:
            out[f"{name}.exp_avg"] = st["exp_avg"]
            out[f"{name}.exp_avg_sq"] = st["exp_avg_sq"]
            steps = int(st["step"])
    return out, steps


def _restore_adam(opt: torch.optim.Adam, names: list[str], blobs: dict, steps: int) -> None:
    for name, p in zip(names, opt.param_groups[0]["params"]):
        ea, eas = blobs.get(f"{name}.exp_avg"), blobs.get(f"{name}.exp_avg_sq")
        if ea is None:
            continue
        opt.state[p] = {
            "step": torch.tensor(float(steps)),
            "exp_avg": torch.as_tensor(ea, dtype=p.dtype).clone(),
            "exp_avg_sq": torch.as_tensor(eas, dtype=p.dtype).clone(),
        }


def train_wgan_gp(
    images: torch.Tensor,
    G: NoiseGenerator,
    D: PatchCritic,
    cfg: GanLossConfig,
    epochs: int,
    seed: int,
    batch_size: int = 64,
    start_epoch: int = 1,
    resume_state: dict | None = None,
    on_epoch=None,
) -> list[dict]:
    """Alternate n_critic critic updates per generator update.

    Every epoch reseeds its own random stream from (seed, epoch), so a run
    resumed from a checkpoint retraces the interrupted run exactly. Returns
    per-epoch records (epoch, critic_loss, generator_loss, penalty_mean).
    """
    if images.ndim != 4 or images.shape[0] == 0:
        raise ConfigurationError("training images must be a nonempty (B,1,H,W) tensor")
    opt_g = torch.optim.Adam(G.parameters(), lr=cfg.learning_rate, betas=(cfg.beta1, 0.999))
    opt_d = torch.optim.Adam(D.parameters(), lr=cfg.learning_rate, betas=(cfg.beta1, 0.999))
    g_names = [n for n, _ in G.named_parameters()]
    d_names = [n for n, _ in D.named_parameters()]
    if resume_state:
        _restore_adam(opt_g, g_names, resume_state["opt_g"], resume_state["opt_g_steps"])
        _restore_adam(opt_d, d_names, resume_state["opt_d"], resume_state["opt_d_steps"])

    n = images.shape[0]
    log: list[dict] = []
    handles = {"G": G, "D": D, "opt_g": opt_g, "opt_d": opt_d}
    for epoch in range(start_epoch, epochs + 1):
        gen = torch.Generator().manual_seed(seed * 1_000_003 + epoch)
        perm = torch.randperm(n, generator=gen)
        c_losses, g_losses, penalties = [], [], []
        step = 0
        for start in range(0, n, batch_size):
            batch = images[perm[start : start + batch_size]]
            b = batch.shape[0]
            z = torch.randn(b, G.latent_dim, generator=gen)

            opt_d.zero_grad()
            fake = G(z).detach()
            gp = gradient_penalty(D, batch, fake, gen)
            d_loss = D(fake).mean() - D(batch).mean() + cfg.lambda_gp * gp
            if not torch.isfinite(d_loss):
                raise TrainingDivergedError(f"non-finite critic loss at epoch {epoch}", epoch=epoch)
            d_loss.backward()
            opt_d.step()
            c_losses.append(d_loss.item())
            penalties.append(gp.item())

            step += 1
            if step % cfg.n_critic == 0:
                z = torch.randn(b, G.latent_dim, generator=gen)
                opt_g.zero_grad()
                g_loss = wgan_generator_loss(D, G, z)
                if not torch.isfinite(g_loss):
                    raise TrainingDivergedError(f"non-finite generator loss at epoch {epoch}", epoch=epoch)
                g_loss.backward()
                opt_g.step()
                g_losses.append(g_loss.item())

        record = {
            "epoch": epoch,
            "critic_loss": sum(c_losses) / len(c_losses),
            "generator_loss": sum(g_losses) / len(g_losses) if g_losses else float("nan"),
            "penalty_mean": sum(penalties) / len(penalties),
        }
        log.append(record)
        if on_epoch is not None:
            on_epoch(epoch, record, handles)
    return log


def save_wgan(path, G: NoiseGenerator, D: PatchCritic, opt_g=None, opt_d=None, epoch: int = 0) -> None:
    from .checkpoints import save_checkpoint

    state = {f"gen.{k}": v for k, v in G.state_dict().items()}
    state |= {f"critic.{k}": v for k, v in D.state_dict().items()}
    extra = {"epoch": epoch, "opt_g_steps": 0, "opt_d_steps": 0}
    if opt_g is not None:
        blobs, steps = _adam_state(opt_g, [n for n, _ in G.named_parameters()])
        state |= {f"opt_g.{k}": v for k, v in blobs.items()}
        extra["opt_g_steps"] = steps
    if opt_d is not None:
        blobs, steps = _adam_state(opt_d, [n for n, _ in D.named_parameters()])
        state |= {f"opt_d.{k}": v for k, v in blobs.items()}
        extra["opt_d_steps"] = steps
    spec = {
        "latent_dim": G.latent_dim,
        "out_size": G.out_size,
        "gen_base": G.start_shape[0] // 8,
        "critic_base": D.blocks[0][0].out_channels,
    }
    save_checkpoint(path, "wgan", spec, state, extra)


def load_wgan(path) -> tuple[NoiseGenerator, PatchCritic, dict]:
    from .checkpoints import load_checkpoint, state_to_module

    ckpt = load_checkpoint(path)
    if ckpt.kind != "wgan":
        raise ValueError(f"{path}: checkpoint kind {ckpt.kind!r} is not a wgan bundle")
    G = NoiseGenerator(ckpt.spec["latent_dim"], ckpt.spec["out_size"], ckpt.spec["gen_base"])
    D = PatchCritic(ckpt.spec["critic_base"])
    state_to_module(G, {k[4:]: v for k, v in ckpt.params.items() if k.startswith("gen.")})
    state_to_module(D, {k[7:]: v for k, v in ckpt.params.items() if k.startswith("critic.")})
    resume = {
        "opt_g": {k[6:]: v for k, v in ckpt.params.items() if k.startswith("opt_g.")},
        "opt_d": {k[6:]: v for k, v in ckpt.params.items() if k.startswith("opt_d.")},
        "opt_g_steps": ckpt.extra.get("opt_g_steps", 0),
        "opt_d_steps": ckpt.extra.get("opt_d_steps", 0),
        "epoch": ckpt.extra.get("epoch", 0),
    }
    return G, D, resume
