"""Noise schedules for the diffusion forward/reverse processes.

A schedule fixes the per-step variances beta_1..beta_T together with the
derived quantities

    alpha_t     = 1 - beta_t
    alpha_bar_t = prod_{s<=t} alpha_s
    sigma_t^2   = (1 - alpha_t) (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)

Steps are 1-based; sigma_1 = 0 so the final denoising step injects no noise.
Arrays are stored with index t-1 holding the value for step t.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError

DEFAULT_COSINE_OFFSET = 0.008
DEFAULT_BETA_CLIP = (1e-12, 0.999)


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step diffusion coefficients for T steps."""

    kind: str
    beta: np.ndarray
    alpha: np.ndarray = field(init=False)
    alpha_bar: np.ndarray = field(init=False)
    sigma: np.ndarray = field(init=False)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise ConfigurationError("schedule needs at least one step")
        if np.any(beta <= 0.0) or np.any(beta >= 1.0):
            raise ConfigurationError("beta values must lie strictly in (0, 1)")
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        # sigma_1 = 0; for t > 1 use the posterior variance formula.
        sigma_sq = np.zeros_like(beta)
        if beta.size > 1:
            sigma_sq[1:] = (1.0 - alpha[1:]) * (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:])
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "alpha_bar", alpha_bar)
        object.__setattr__(self, "sigma", np.sqrt(sigma_sq))

    @property
    def T(self) -> int:
        return int(self.beta.size)

    def _index(self, t: int) -> int:
        if not 1 <= t <= self.T:
            raise ConfigurationError(f"step {t} outside 1..{self.T}")
        return t - 1

    def beta_at(self, t: int) -> float:
        return float(self.beta[self._index(t)])

    def alpha_at(self, t: int) -> float:
        return float(self.alpha[self._index(t)])

    def alpha_bar_at(self, t: int) -> float:
        return float(self.alpha_bar[self._index(t)])

    def sigma_at(self, t: int) -> float:
        return float(self.sigma[self._index(t)])

    def to_table(self) -> str:
        """Serialize as a plain-text table of (t, beta, alpha_bar, sigma) rows."""
        out = io.StringIO()
        out.write(f"# noise schedule kind={self.kind} T={self.T}\n")
        out.write("t\tbeta\talpha_bar\tsigma\n")
        for t in range(1, self.T + 1):
            i = t - 1
            out.write(f"{t}\t{self.beta[i]:.17g}\t{self.alpha_bar[i]:.17g}\t{self.sigma[i]:.17g}\n")
        return out.getvalue()


def schedule_from_table(text: str) -> NoiseSchedule:
    """Rebuild a schedule from its `to_table` serialization."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("# noise schedule"):
        raise ConfigurationError("not a schedule table")
    kind = lines[0].split("kind=")[1].split()[0]
    betas = [float(ln.split("\t")[1]) for ln in lines[2:]]
    return NoiseSchedule(kind=kind, beta=np.array(betas))


def make_linear_schedule(T: int, beta_min: float, beta_max: float) -> NoiseSchedule:
    """Linearly spaced betas from beta_min (t=1) to beta_max (t=T).

    With T=1 the single beta takes beta_min.
    """
    if T < 1:
        raise ConfigurationError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ConfigurationError(
            f"need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
        )
    beta = np.linspace(beta_min, beta_max, T)
    return NoiseSchedule(kind="linear", beta=beta)


def make_cosine_schedule(
    T: int,
    offset: float = DEFAULT_COSINE_OFFSET,
    beta_clip: tuple[float, float] | None = None,
) -> NoiseSchedule:
    """Squared-cosine alpha_bar schedule.

        alpha_bar_t = f(t) / f(0),  f(t) = cos^2(((t/T + offset) / (1 + offset)) * pi/2)

    Betas come from consecutive alpha_bar ratios and are clipped to
    (0, 0.999]; `beta_clip` overrides that range (the paper's noise-level
    row is ambiguous for the cosine form, so the clip is exposed here).
    The stored alpha_bar is the exact cumulative product of the clipped
    alphas, which departs from the f-ratio only where clipping bites.
    """
    if T < 1:
        raise ConfigurationError(f"T must be >= 1, got {T}")
    if offset <= 0.0:
        raise ConfigurationError(f"offset must be positive, got {offset}")
    lo, hi = beta_clip if beta_clip is not None else DEFAULT_BETA_CLIP
    if not (0.0 < lo <= hi < 1.0):
        raise ConfigurationError(f"invalid beta clip range [{lo}, {hi}]")

    t = np.arange(0, T + 1, dtype=np.float64)
    f = np.cos(((t / T + offset) / (1.0 + offset)) * math.pi / 2.0) ** 2
    alpha_bar = f / f[0]
    beta = 1.0 - alpha_bar[1:] / alpha_bar[:-1]
    beta = np.clip(beta, lo, hi)
    return NoiseSchedule(kind="cosine", beta=beta)


def cosine_alpha_bar(t: int, T: int, offset: float = DEFAULT_COSINE_OFFSET) -> float:
    """Direct evaluation of the cosine alpha_bar formula, without clipping."""
    f = lambda u: math.cos(((u / T + offset) / (1.0 + offset)) * math.pi / 2.0) ** 2
    return f(t) / f(0)
