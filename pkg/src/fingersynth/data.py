"""Dataset ingestion, padding/normalization, augmentation and the synthetic
ridge-pattern corpus.

Images travel as float32 arrays of shape (N, 1, H, W) in [-1, 1]; PNG files
are 8-bit grayscale. The synthetic corpus filters seeded white noise with
orientation-steered band-pass kernels: every finger identity owns an
orientation field and master ridge pattern derived from its own seed, and
each impression perturbs that master with a small geometric jitter plus
sensor noise, so genuine and impostor pairs are both constructible.
"""

from __future__ import annotations

import math
import os
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from PIL import Image
from scipy.ndimage import gaussian_filter, rotate as nd_rotate

from .errors import ConfigurationError

AUGMENT_OPS = ("hflip", "rotate", "jitter", "translate")
CONDITIONS_LIVE = "live"


# ---------------------------------------------------------------------------
# normalization and padding


def u8_to_unit(arr: np.ndarray) -> np.ndarray:
    """Map 8-bit pixels to [-1, 1]."""
    return (arr.astype(np.float32) / 255.0) * 2.0 - 1.0


def unit_to_u8(arr: np.ndarray) -> np.ndarray:
    """Map [-1, 1] values back to 8-bit pixels (rounded, clipped)."""
    return np.clip(np.rint((np.asarray(arr) + 1.0) / 2.0 * 255.0), 0, 255).astype(np.uint8)


def pad_center(img: np.ndarray, pad_to: int, fill: float = -1.0) -> np.ndarray:
    """Center an image on a square canvas of side pad_to."""
    h, w = img.shape[-2:]
    if h > pad_to or w > pad_to:
        raise ConfigurationError(f"image {h}x{w} larger than pad target {pad_to}")
    top, left = (pad_to - h) // 2, (pad_to - w) // 2
    out = np.full(img.shape[:-2] + (pad_to, pad_to), fill, dtype=np.float32)
    out[..., top : top + h, left : left + w] = img
    return out


def unpad_center(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Crop the centered region back out; inverts pad_center."""
    h, w = img.shape[-2:]
    top, left = (h - height) // 2, (w - width) // 2
    return img[..., top : top + height, left : left + width]


# ---------------------------------------------------------------------------
# dataset container


@dataclass
class PatchDataset:
    images: np.ndarray  # (N, 1, H, W) float32 in [-1, 1]
    identities: list[str | None]
    conditions: list[str]
    pad_to: int
    source: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        if self.images.ndim != 4 or self.images.shape[1] != 1:
            raise ConfigurationError(f"images must be (N,1,H,W), got {self.images.shape}")
        n = self.images.shape[0]
        if len(self.identities) != n or len(self.conditions) != n:
            raise ConfigurationError("identity/condition lists must match image count")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def size(self) -> int:
        return self.images.shape[-1]

    def to_tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.images)

    def subset(self, indices) -> "PatchDataset":
        idx = np.asarray(indices)
        return PatchDataset(
            self.images[idx],
            [self.identities[i] for i in idx],
            [self.conditions[i] for i in idx],
            self.pad_to,
            self.source,
        )

    def split(self, holdout_fraction: float, seed: int) -> tuple["PatchDataset", "PatchDataset"]:
        """Deterministic train/held-out split that keeps identities intact per side."""
        rng = np.random.default_rng(seed)
        perm = rng.permutation(len(self))
        n_hold = int(round(len(self) * holdout_fraction))
        return self.subset(np.sort(perm[n_hold:])), self.subset(np.sort(perm[:n_hold]))


# ---------------------------------------------------------------------------
# manifest and PNG I/O


def read_manifest(path) -> dict[str, dict]:
    """Delimited identity manifest: filename, person, finger, condition[, device]."""
    entries = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) not in (4, 5):
                raise ConfigurationError(f"{path}:{lineno}: expected 4 or 5 tab-separated columns")
            entry = {"person": parts[1], "finger": parts[2], "condition": parts[3]}
            if len(parts) == 5:
                entry["device"] = parts[4]
            entries[parts[0]] = entry
    return entries


def write_manifest(path, entries: dict[str, dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("# filename\tperson\tfinger\tcondition[\tdevice]\n")
        for name in sorted(entries):
            e = entries[name]
            cols = [name, e["person"], e["finger"], e["condition"]]
            if "device" in e:
                cols.append(e["device"])
            f.write("\t".join(cols) + "\n")


def _atomic_png(img_u8: np.ndarray, path) -> None:
    path = os.fspath(path)
    tmp = f"{path}.{os.getpid()}.tmp"
    Image.fromarray(img_u8, mode="L").save(tmp, format="PNG")
    os.replace(tmp, path)


def save_png(img: np.ndarray, path) -> None:
    """Write one [-1, 1] image (1,H,W) or (H,W) as 8-bit grayscale PNG."""
    arr = np.asarray(img)
    if arr.ndim == 3:
        arr = arr[0]
    _atomic_png(unit_to_u8(arr), path)


def load_png(path) -> np.ndarray:
    """Read a grayscale PNG into a [-1, 1] (H, W) array."""
    with Image.open(path) as im:
        return u8_to_unit(np.asarray(im.convert("L")))


def save_png_grid(images, path, ncols: int = 8, gap: int = 2) -> None:
    """Tile a batch into one mosaic PNG with light separators."""
    arr = images.detach().cpu().numpy() if isinstance(images, torch.Tensor) else np.asarray(images)
    if arr.ndim != 4:
        raise ConfigurationError(f"expected (N,1,H,W) batch, got {arr.shape}")
    n, _, h, w = arr.shape
    ncols = min(ncols, n)
    nrows = math.ceil(n / ncols)
    canvas = np.full((nrows * (h + gap) - gap, ncols * (w + gap) - gap), 255, dtype=np.uint8)
    for i in range(n):
        r, c = divmod(i, ncols)
        canvas[r * (h + gap) : r * (h + gap) + h, c * (w + gap) : c * (w + gap) + w] = unit_to_u8(arr[i, 0])
    _atomic_png(canvas, path)


def load_image_dataset(path, pad_to: int, condition_default: str = CONDITIONS_LIVE) -> PatchDataset:
    """Load a directory of grayscale images, center-padded and mapped to [-1, 1].

    A `manifest.tsv` in the directory attaches person/finger identities and
    conditions. An empty directory yields a size-0 dataset with a warning;
    unreadable files are reported together in one error.
    """
    path = os.fspath(path)
    names = sorted(
        f for f in os.listdir(path) if f.lower().endswith((".png", ".bmp", ".tif", ".tiff", ".jpg", ".jpeg"))
    )
    manifest = {}
    manifest_path = os.path.join(path, "manifest.tsv")
    if os.path.exists(manifest_path):
        manifest = read_manifest(manifest_path)

    images, identities, conditions, failures = [], [], [], []
    for name in names:
        try:
            img = load_png(os.path.join(path, name))
            images.append(pad_center(img, pad_to))
        except ConfigurationError as exc:
            failures.append(f"{name}: {exc}")
            continue
        except Exception as exc:
            failures.append(f"{name}: {exc}")
            continue
        entry = manifest.get(name)
        if entry:
            identities.append(f"{entry['person']}/{entry['finger']}")
            conditions.append(entry["condition"])
        else:
            identities.append(None)
            conditions.append(condition_default)
    if failures:
        raise ConfigurationError(f"{len(failures)} files failed to load: " + "; ".join(failures))
    if not images:
        warnings.warn(f"no images found under {path}; dataset is empty")
        stack = np.zeros((0, 1, pad_to, pad_to), dtype=np.float32)
    else:
        stack = np.stack(images)[:, None]
    return PatchDataset(stack, identities, conditions, pad_to, source=path)


def save_image_dataset(ds: PatchDataset, path) -> None:
    os.makedirs(path, exist_ok=True)
    entries = {}
    for i in range(len(ds)):
        name = f"patch_{i:05d}.png"
        save_png(ds.images[i], os.path.join(path, name))
        ident = ds.identities[i]
        if ident is not None:
            person, _, finger = ident.partition("/")
            entries[name] = {"person": person, "finger": finger or "0", "condition": ds.conditions[i]}
    if entries:
        write_manifest(os.path.join(path, "manifest.tsv"), entries)


# ---------------------------------------------------------------------------
# synthetic ridge corpus


@dataclass(frozen=True)
class RidgeParams:
    """Knobs of the ridge-pattern generator; serializable for regeneration."""

    frequency: float = 0.11  # cycles per pixel
    orientation_scale: float = 10.0  # smoothing radius of the orientation field
    n_singularities: int = 0
    noise_level: float = 0.08
    contrast: float = 2.0
    jitter_px: int = 2
    jitter_deg: float = 3.0

    def __post_init__(self):
        if not 0.0 < self.frequency < 0.5:
            raise ConfigurationError(f"frequency must lie in (0, 0.5) cycles/pixel, got {self.frequency}")
        if self.noise_level < 0 or self.contrast <= 0:
            raise ConfigurationError("noise_level must be >= 0 and contrast > 0")

    def to_dict(self) -> dict:
        return {
            "frequency": self.frequency,
            "orientation_scale": self.orientation_scale,
            "n_singularities": self.n_singularities,
            "noise_level": self.noise_level,
            "contrast": self.contrast,
            "jitter_px": self.jitter_px,
            "jitter_deg": self.jitter_deg,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RidgeParams":
        return cls(**d)


def _orientation_field(size: int, params: RidgeParams, rng: np.random.Generator) -> np.ndarray:
    """Smooth pi-periodic orientation field, optionally with core singular points."""
    z = rng.normal(size=(size, size)) + 1j * rng.normal(size=(size, size))
    z = gaussian_filter(z.real, params.orientation_scale) + 1j * gaussian_filter(z.imag, params.orientation_scale)
    theta = np.angle(z) / 2.0
    for _ in range(params.n_singularities):
        cy, cx = rng.uniform(size * 0.25, size * 0.75, size=2)
        yy, xx = np.mgrid[0:size, 0:size]
        theta = theta + 0.5 * np.arctan2(yy - cy, xx - cx)
    return theta


def _master_ridges(size: int, params: RidgeParams, rng: np.random.Generator) -> np.ndarray:
    """Filter seeded white noise with orientation-steered band-pass kernels."""
    theta = _orientation_field(size, params, rng)
    noise = rng.normal(size=(size, size))
    spectrum = np.fft.fft2(noise)

    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    radius = np.hypot(fy, fx)
    phi = np.arctan2(fy, fx)
    radial = np.exp(-((radius - params.frequency) ** 2) / (2 * (0.25 * params.frequency) ** 2))

    n_bins = 8
    wave_dir = theta + np.pi / 2.0  # ridge flow is perpendicular to the wave vector
    acc = np.zeros((size, size))
    for k in range(n_bins):
        phi_k = k * np.pi / n_bins
        angular = np.cos(phi - phi_k) ** 6 + np.cos(phi - phi_k - np.pi) ** 6
        band = np.real(np.fft.ifft2(spectrum * radial * angular))
        weight = np.maximum(np.cos(2.0 * (wave_dir - phi_k)), 0.0) ** 2
        acc += weight * band
    acc /= max(acc.std(), 1e-9)
    return np.tanh(params.contrast * acc).astype(np.float32)


def _impression(master: np.ndarray, params: RidgeParams, rng: np.random.Generator) -> np.ndarray:
    img = master
    if params.jitter_deg > 0:
        angle = rng.uniform(-params.jitter_deg, params.jitter_deg)
        img = nd_rotate(img, angle, reshape=False, order=1, mode="reflect")
    if params.jitter_px > 0:
        dy, dx = rng.integers(-params.jitter_px, params.jitter_px + 1, size=2)
        img = np.roll(img, (dy, dx), axis=(0, 1))
    if params.noise_level > 0:
        img = img + rng.normal(scale=params.noise_level, size=img.shape)
    return np.clip(img, -1.0, 1.0).astype(np.float32)


def synth_ridge_dataset(
    n: int,
    size: int,
    params: RidgeParams | None = None,
    seed: int = 0,
    n_fingers: int | None = None,
    condition: str = CONDITIONS_LIVE,
) -> PatchDataset:
    """Generate n ridge patches across n_fingers identities (default: all distinct).

    Impression i of finger f derives its random stream from (seed, f, i), so
    serial and parallel generation agree bitwise and the corpus regenerates
    exactly from (params, seed).
    """
    if n < 1:
        raise ConfigurationError("need n >= 1 patches")
    params = params or RidgeParams()
    n_fingers = n if n_fingers is None else min(n_fingers, n)

    masters = {}
    images = np.empty((n, 1, size, size), dtype=np.float32)
    identities, conditions = [], []
    for i in range(n):
        f = i % n_fingers
        if f not in masters:
            master_rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, f)))
            masters[f] = _master_ridges(size, params, master_rng)
        imp_rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, f, i)))
        images[i, 0] = _impression(masters[f], params, imp_rng)
        identities.append(f"synth/{f:05d}")
        conditions.append(condition)
    return PatchDataset(images, identities, conditions, pad_to=size, source=f"synthetic:{seed}")


def apply_spoof_corruption(images: np.ndarray, seed: int = 0, blur: float = 1.2,
                           contrast: float = 0.65, shift: float = 0.15, blotch_level: float = 0.5) -> np.ndarray:
    """Fixed spoof-style degradation: blur, contrast shift and blotch noise."""
    rng = np.random.default_rng(seed)
    out = np.empty_like(images, dtype=np.float32)
    for i in range(images.shape[0]):
        img = gaussian_filter(images[i, 0], blur)
        img = img * contrast + shift
        blotch = gaussian_filter(rng.normal(size=img.shape), 4.0)
        blotch = blotch / max(np.abs(blotch).max(), 1e-9)
        img = img - blotch_level * np.clip(blotch, 0.0, None)
        out[i, 0] = np.clip(img, -1.0, 1.0)
    return out


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    ops: tuple[str, ...] = AUGMENT_OPS
    hflip_prob: float = 0.5
    max_rotate_deg: float = 10.0
    max_jitter: float = 0.1
    max_translate_px: int = 4

    def __post_init__(self):
        unknown = [op for op in self.ops if op not in AUGMENT_OPS]
        if unknown:
            raise ConfigurationError(f"unknown augmentations {unknown}; known: {AUGMENT_OPS}")


def hflip(batch: torch.Tensor) -> torch.Tensor:
    """Horizontal mirror; applying it twice restores the batch."""
    return torch.flip(batch, dims=[-1])


def augment_batch(batch: torch.Tensor, cfg: AugmentConfig, rng: torch.Generator) -> torch.Tensor:
    """Apply the configured label-free augmentations; output stays in [-1, 1]."""
    if not cfg.ops:
        return batch
    out = batch
    b = batch.shape[0]
    if "hflip" in cfg.ops:
        mask = torch.rand(b, generator=rng) < cfg.hflip_prob
        if mask.any():
            out = out.clone()
            out[mask] = torch.flip(out[mask], dims=[-1])
    if "rotate" in cfg.ops and cfg.max_rotate_deg > 0:
        angles = (torch.rand(b, generator=rng) * 2 - 1) * cfg.max_rotate_deg
        arr = out.detach().cpu().numpy().copy()
        for i in range(b):
            arr[i, 0] = nd_rotate(arr[i, 0], float(angles[i]), reshape=False, order=1, mode="reflect")
        out = torch.from_numpy(arr)
    if "translate" in cfg.ops and cfg.max_translate_px > 0:
        shifts = torch.randint(-cfg.max_translate_px, cfg.max_translate_px + 1, (b, 2), generator=rng)
        out = torch.stack([torch.roll(out[i], tuple(shifts[i].tolist()), dims=(-2, -1)) for i in range(b)])
    if "jitter" in cfg.ops and cfg.max_jitter > 0:
        scale = 1.0 + (torch.rand(b, 1, 1, 1, generator=rng) * 2 - 1) * cfg.max_jitter
        offset = (torch.rand(b, 1, 1, 1, generator=rng) * 2 - 1) * cfg.max_jitter
        out = out * scale + offset
    return out.clamp(-1.0, 1.0)
