"""Noise-prediction networks: vanilla U-Net, residual/attention U-Net and
the ConvNeXt-block variant.

All variants share the same skeleton: a stem convolution, a down path that
halves resolution per level, a bottleneck, and an up path with skip
connections that restores the input resolution. Odd feature maps downsample
with an unpadded stride-2 convolution, so a 112 input reaches a 3x3
bottleneck over five levels. The step index enters every block additively
after a learned affine map of its sinusoidal embedding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError

VARIANTS = ("vanilla", "resnet_attention", "convnext")


def sinusoidal_time_embedding(t, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of a step index.

    Frequencies are geometric, 10000^(-2k/dim) for k < dim/2; the first half
    of the vector holds sines, the second half cosines. Accepts an int (one
    vector) or a 1-D tensor of steps (one row per step).
    """
    if dim <= 0 or dim % 2 != 0:
        raise ConfigurationError(f"embedding dim must be even and positive, got {dim}")
    scalar = isinstance(t, int)
    t = torch.as_tensor([t] if scalar else t, dtype=torch.float64)
    if bool((t < 0).any()):
        raise ConfigurationError("step index must be nonnegative")
    k = torch.arange(dim // 2, dtype=torch.float64)
    freqs = torch.pow(10000.0, -2.0 * k / dim)
    angles = t[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1).to(torch.float32)
    return emb[0] if scalar else emb


class LayerNorm2d(nn.GroupNorm):
    """Layer normalization over channels of a (B, C, H, W) map."""

    def __init__(self, channels: int):
        super().__init__(1, channels)


class SelfAttention2d(nn.Module):
    """Single-head self-attention over spatial positions."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = LayerNorm2d(channels)
        self.qkv = nn.Conv2d(channels, channels * 3, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(1)
        attn = torch.softmax(q.transpose(1, 2) @ k / math.sqrt(c), dim=-1)
        out = (v @ attn.transpose(1, 2)).reshape(b, c, h, w)
        return x + self.proj(out)


class VanillaBlock(nn.Module):
    """Two convolutions with layer normalization and SiLU."""

    def __init__(self, ch_in: int, ch_out: int, time_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(ch_in, ch_out, 3, padding=1)
        self.norm1 = LayerNorm2d(ch_out)
        self.conv2 = nn.Conv2d(ch_out, ch_out, 3, padding=1)
        self.norm2 = LayerNorm2d(ch_out)
        self.act = nn.SiLU()
        self.time = nn.Linear(time_dim, ch_out)

    def forward(self, x, temb):
        h = self.conv1(x) + self.time(temb)[:, :, None, None]
        h = self.act(self.norm1(h))
        return self.act(self.norm2(self.conv2(h)))


class ResnetBlock(nn.Module):
    """Pre-norm residual block with additive time bias."""

    def __init__(self, ch_in: int, ch_out: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, ch_in)
        self.conv1 = nn.Conv2d(ch_in, ch_out, 3, padding=1)
        self.norm2 = nn.GroupNorm(groups, ch_out)
        self.conv2 = nn.Conv2d(ch_out, ch_out, 3, padding=1)
        self.act = nn.SiLU()
        self.time = nn.Linear(time_dim, ch_out)
        self.skip = nn.Conv2d(ch_in, ch_out, 1) if ch_in != ch_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(self.act(self.norm1(x)))
        h = h + self.time(temb)[:, :, None, None]
        h = self.conv2(self.act(self.norm2(h)))
        return h + self.skip(x)


class ConvNextBlock(nn.Module):
    """Depthwise 7x7 convolution, layer norm, inverted bottleneck with GELU."""

    def __init__(self, ch_in: int, ch_out: int, time_dim: int, mult: int = 2):
        super().__init__()
        self.ds_conv = nn.Conv2d(ch_in, ch_in, 7, padding=3, groups=ch_in)
        self.norm = LayerNorm2d(ch_in)
        self.wide = nn.Conv2d(ch_in, ch_out * mult, 3, padding=1)
        self.act = nn.GELU()
        self.narrow = nn.Conv2d(ch_out * mult, ch_out, 3, padding=1)
        self.time = nn.Linear(time_dim, ch_in)
        self.skip = nn.Conv2d(ch_in, ch_out, 1) if ch_in != ch_out else nn.Identity()

    def forward(self, x, temb):
        h = self.ds_conv(x) + self.time(temb)[:, :, None, None]
        h = self.narrow(self.act(self.wide(self.norm(h))))
        return h + self.skip(x)


def _next_size(size: int) -> int:
    # k3 s2 convolution: padding 1 on even maps, none on odd ones.
    return size // 2 if size % 2 == 0 else (size - 1) // 2


def resolution_chain(input_size: int, levels: int) -> list[int]:
    sizes = [input_size]
    for _ in range(levels - 1):
        sizes.append(_next_size(sizes[-1]))
    return sizes


@dataclass(frozen=True)
class DenoiserSpec:
    """Architecture description for a noise predictor."""

    variant: str = "resnet_attention"
    input_size: int = 32
    channels: tuple[int, ...] = (32, 64, 128)
    time_embed_dim: int = 64
    blocks_per_level: int = 2
    groups: int = 8

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.time_embed_dim % 2 != 0 or self.time_embed_dim <= 0:
            raise ConfigurationError("time_embed_dim must be even and positive")
        if len(self.channels) < 2:
            raise ConfigurationError("need at least two resolution levels")
        sizes = resolution_chain(self.input_size, len(self.channels))
        if sizes[-1] < 2:
            raise ConfigurationError(
                f"input size {self.input_size} cannot support {len(self.channels)} levels (chain {sizes})"
            )
        if self.variant == "resnet_attention" and any(c % self.groups for c in self.channels):
            raise ConfigurationError(f"channels {self.channels} not divisible by group size {self.groups}")

    @property
    def sizes(self) -> list[int]:
        return resolution_chain(self.input_size, len(self.channels))

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "input_size": self.input_size,
            "channels": list(self.channels),
            "time_embed_dim": self.time_embed_dim,
            "blocks_per_level": self.blocks_per_level,
            "groups": self.groups,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserSpec":
        return cls(
            variant=d["variant"],
            input_size=int(d["input_size"]),
            channels=tuple(int(c) for c in d["channels"]),
            time_embed_dim=int(d["time_embed_dim"]),
            blocks_per_level=int(d["blocks_per_level"]),
            groups=int(d["groups"]),
        )


class DenoiserUNet(nn.Module):
    """U-Net noise predictor; output shape always equals input shape."""

    def __init__(self, spec: DenoiserSpec):
        super().__init__()
        self.spec = spec
        self.variant = spec.variant
        self.input_size = spec.input_size
        self.time_embed_dim = spec.time_embed_dim
        self.sizes = spec.sizes
        self.time_steps: int | None = None

        ch = spec.channels
        levels = len(ch)
        n_blocks = 1 if spec.variant == "vanilla" else spec.blocks_per_level
        self.attn_levels = set() if spec.variant == "vanilla" else {levels - 1, levels - 2}

        def block(ci, co):
            if spec.variant == "vanilla":
                return VanillaBlock(ci, co, spec.time_embed_dim)
            if spec.variant == "resnet_attention":
                return ResnetBlock(ci, co, spec.time_embed_dim, spec.groups)
            return ConvNextBlock(ci, co, spec.time_embed_dim)

        self.time_mlp = nn.Sequential(
            nn.Linear(spec.time_embed_dim, spec.time_embed_dim),
            nn.SiLU(),
            nn.Linear(spec.time_embed_dim, spec.time_embed_dim),
        )
        self.stem = nn.Conv2d(1, ch[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        for i in range(levels - 1):
            ci = ch[i - 1] if i > 0 else ch[0]
            blocks = [block(ci, ch[i])] + [block(ch[i], ch[i]) for _ in range(n_blocks - 1)]
            self.down_blocks.append(nn.ModuleList(blocks))
            self.down_attn.append(SelfAttention2d(ch[i]) if i in self.attn_levels else nn.Identity())
            pad = 1 if self.sizes[i] % 2 == 0 else 0
            self.downsamples.append(nn.Conv2d(ch[i], ch[i], 3, stride=2, padding=pad))

        mid_in = ch[levels - 2] if levels > 1 else ch[0]
        self.mid_blocks = nn.ModuleList(
            [block(mid_in, ch[-1])] + [block(ch[-1], ch[-1]) for _ in range(n_blocks - 1)]
        )
        self.mid_attn = SelfAttention2d(ch[-1]) if (levels - 1) in self.attn_levels else nn.Identity()

        self.up_convs = nn.ModuleList()
        self.up_blocks = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        for i in range(levels - 2, -1, -1):
            self.up_convs.append(nn.Conv2d(ch[i + 1], ch[i], 3, padding=1))
            blocks = [block(2 * ch[i], ch[i])] + [block(ch[i], ch[i]) for _ in range(n_blocks - 1)]
            self.up_blocks.append(nn.ModuleList(blocks))
            self.up_attn.append(SelfAttention2d(ch[i]) if i in self.attn_levels else nn.Identity())

        self.head_norm = LayerNorm2d(ch[0]) if spec.variant != "resnet_attention" else nn.GroupNorm(spec.groups, ch[0])
        self.head_act = nn.SiLU()
        self.head = nn.Conv2d(ch[0], 1, 3, padding=1)

    @property
    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, x: torch.Tensor, t) -> torch.Tensor:
        if isinstance(t, int):
            t = torch.full((x.shape[0],), t, dtype=torch.long)
        temb = self.time_mlp(sinusoidal_time_embedding(t, self.time_embed_dim).to(x.dtype))
        h = self.stem(x)
        skips = []
        for i, blocks in enumerate(self.down_blocks):
            for b in blocks:
                h = b(h, temb)
            h = self.down_attn[i](h)
            skips.append(h)
            h = self.downsamples[i](h)
        for b in self.mid_blocks:
            h = b(h, temb)
        h = self.mid_attn(h)
        for j, (up, blocks) in enumerate(zip(self.up_convs, self.up_blocks)):
            level = len(self.down_blocks) - 1 - j
            h = up(F.interpolate(h, size=self.sizes[level], mode="nearest"))
            h = torch.cat([h, skips[level]], dim=1)
            for b in blocks:
                h = b(h, temb)
            h = self.up_attn[j](h)
        return self.head(self.head_act(self.head_norm(h)))


def build_denoiser(spec: DenoiserSpec, seed: int) -> DenoiserUNet:
    """Construct and seed-initialize a denoiser; same (spec, seed) gives identical weights."""
    torch.manual_seed(seed)
    return DenoiserUNet(spec)


def predict_noise(model: DenoiserUNet, xt: torch.Tensor, t) -> torch.Tensor:
    """Run the noise estimator with shape validation."""
    if xt.ndim != 4 or xt.shape[1] != 1:
        raise ValueError(f"expected (B,1,H,W) batch, got {tuple(xt.shape)}")
    if xt.shape[-2] != model.input_size or xt.shape[-1] != model.input_size:
        raise ValueError(f"batch size {tuple(xt.shape[-2:])} does not match model input size {model.input_size}")
    if isinstance(t, int) and t < 1:
        raise ValueError(f"step index must be >= 1, got {t}")
    return model(xt, t)


def save_denoiser(path, model: DenoiserUNet) -> None:
    from .checkpoints import save_checkpoint

    extra = {"time_steps": model.time_steps} if model.time_steps else {}
    save_checkpoint(path, "denoiser", model.spec.to_dict(), model.state_dict(), extra)


def load_denoiser(path) -> DenoiserUNet:
    from .checkpoints import load_checkpoint, state_to_module

    ckpt = load_checkpoint(path)
    if ckpt.kind != "denoiser":
        raise ValueError(f"{path}: checkpoint kind {ckpt.kind!r} is not a denoiser")
    model = DenoiserUNet(DenoiserSpec.from_dict(ckpt.spec))
    state_to_module(model, ckpt.params)
    if ckpt.extra.get("time_steps"):
        model.time_steps = int(ckpt.extra["time_steps"])
    return model
