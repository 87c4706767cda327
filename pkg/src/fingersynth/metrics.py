"""Distribution-level evaluation: feature extraction, FID, KID and PRDC.

Feature sets are (N, D) float matrices tagged with the extractor that
produced them. FID uses an eigendecomposition-based matrix square root with
negative-eigenvalue clipping; KID averages the unbiased paired MMD^2
estimator with a cubic polynomial kernel over random subsets; PRDC follows
the k-NN-ball membership definitions with radii computed within each set
excluding self.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
from scipy.spatial.distance import cdist

from .errors import CapabilityError, ConfigurationError, ExtractionError, FingersynthError

FEATURESET_MAGIC = b"FSFS"
FEATURESET_VERSION = 1


class NumericalError(FingersynthError):
    """A metric computation lost numerical validity."""


@dataclass
class FeatureSet:
    features: np.ndarray
    extractor_id: str
    source_id: str = ""

    def __post_init__(self):
        arr = np.asarray(self.features, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise ValueError(f"features must be a nonempty (N, D) matrix, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("features contain non-finite entries")
        self.features = arr

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def save_featureset(path, fs: FeatureSet) -> None:
    ext = fs.extractor_id.encode("utf-8")
    with open(path, "wb") as f:
        f.write(FEATURESET_MAGIC)
        f.write(struct.pack("<IQQH", FEATURESET_VERSION, fs.n, fs.dim, len(ext)))
        f.write(ext)
        f.write(np.ascontiguousarray(fs.features, dtype="<f4").tobytes())


def load_featureset(path, source_id: str | None = None) -> FeatureSet:
    with open(path, "rb") as f:
        if f.read(4) != FEATURESET_MAGIC:
            raise ValueError(f"{path}: not a feature-set file")
        version, n, d, ext_len = struct.unpack("<IQQH", f.read(22))
        if version != FEATURESET_VERSION:
            raise ValueError(f"{path}: unsupported feature-set version {version}")
        extractor_id = f.read(ext_len).decode("utf-8")
        data = np.frombuffer(f.read(4 * n * d), dtype="<f4").reshape(n, d)
    return FeatureSet(data.astype(np.float64), extractor_id, source_id or str(path))


# ---------------------------------------------------------------------------
# extractors


def _to_image_array(images) -> np.ndarray:
    arr = images.detach().cpu().numpy() if isinstance(images, torch.Tensor) else np.asarray(images)
    if arr.ndim == 3:
        arr = arr[:, None]
    if arr.ndim != 4 or arr.shape[1] != 1:
        raise ValueError(f"expected (N,1,H,W) images, got shape {arr.shape}")
    return arr.astype(np.float64)


class PixelPCAExtractor:
    """Deterministic PCA over flattened pixels.

    Components come from the SVD of the centered fitting matrix with a fixed
    sign convention (the entry of largest magnitude in each component is
    positive), so projections are reproducible across fits on the same data.
    """

    def __init__(self, n_components: int = 24):
        if n_components < 1:
            raise ConfigurationError("n_components must be positive")
        self.n_components = n_components
        self.mean: np.ndarray | None = None
        self.components: np.ndarray | None = None
        self.extractor_id = f"pixel-pca-{n_components}"

    def fit(self, images) -> "PixelPCAExtractor":
        x = _to_image_array(images).reshape(len(images), -1)
        if x.shape[0] < 2:
            raise ConfigurationError("PCA fit needs at least 2 images")
        if self.n_components > min(x.shape[0] - 1, x.shape[1]):
            raise ConfigurationError(
                f"n_components {self.n_components} exceeds rank bound {min(x.shape[0] - 1, x.shape[1])}"
            )
        self.mean = x.mean(axis=0)
        _, _, vt = np.linalg.svd(x - self.mean, full_matrices=False)
        comps = vt[: self.n_components]
        flips = np.sign(comps[np.arange(len(comps)), np.abs(comps).argmax(axis=1)])
        self.components = comps * flips[:, None]
        return self

    def __call__(self, images) -> np.ndarray:
        if self.components is None:
            raise ConfigurationError("PCA extractor must be fit before use")
        x = _to_image_array(images).reshape(len(images), -1)
        if x.shape[1] != self.mean.shape[0]:
            raise ValueError(f"image size changed between fit ({self.mean.shape[0]} px) and transform ({x.shape[1]} px)")
        return (x - self.mean) @ self.components.T


class SmallCnnExtractor:
    """Convolutional autoencoder embedding trained on the toy corpus."""

    def __init__(self, embed_dim: int = 32, width: int = 16):
        self.embed_dim = embed_dim
        self.width = width
        self.extractor_id = f"small-cnn-{embed_dim}"
        self.encoder: nn.Module | None = None
        self._decoder: nn.Module | None = None

    def _build(self, seed: int):
        torch.manual_seed(seed)
        w = self.width
        self.encoder = nn.Sequential(
            nn.Conv2d(1, w, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(2 * w, self.embed_dim, 3, stride=2, padding=1),
        )
        self._decoder = nn.Sequential(
            nn.Upsample(scale_factor=2), nn.Conv2d(self.embed_dim, 2 * w, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2), nn.Conv2d(2 * w, w, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2), nn.Conv2d(w, 1, 3, padding=1), nn.Tanh(),
        )

    def fit(self, images, epochs: int = 8, batch_size: int = 64, lr: float = 2e-3, seed: int = 0) -> "SmallCnnExtractor":
        self._build(seed)
        x = torch.as_tensor(_to_image_array(images), dtype=torch.float32)
        opt = torch.optim.Adam([*self.encoder.parameters(), *self._decoder.parameters()], lr=lr)
        gen = torch.Generator().manual_seed(seed)
        for _ in range(epochs):
            perm = torch.randperm(x.shape[0], generator=gen)
            for lo in range(0, x.shape[0], batch_size):
                batch = x[perm[lo : lo + batch_size]]
                opt.zero_grad()
                loss = nn.functional.mse_loss(self._decoder(self.encoder(batch)), batch)
                loss.backward()
                opt.step()
        self.encoder.eval()
        return self

    def __call__(self, images) -> np.ndarray:
        if self.encoder is None:
            raise ConfigurationError("small-CNN extractor must be fit before use")
        x = torch.as_tensor(_to_image_array(images), dtype=torch.float32)
        with torch.no_grad():
            z = self.encoder(x).mean(dim=(2, 3))
        return z.double().numpy()


class InceptionExtractor:
    """Standard pretrained classifier embedding; needs downloadable weights."""

    extractor_id = "inception-v3-pool3"

    def __init__(self):
        try:
            from torchvision import models  # noqa: F401
        except ImportError as exc:
            raise CapabilityError("torchvision is not installed; use the pixel-PCA or small-CNN extractor") from exc
        try:
            from torchvision.models import Inception_V3_Weights, inception_v3

            self._net = inception_v3(weights=Inception_V3_Weights.IMAGENET1K_V1)
        except Exception as exc:
            raise CapabilityError(
                "pretrained inception weights are unavailable in this environment; "
                "use the pixel-PCA or small-CNN extractor"
            ) from exc
        self._net.fc = nn.Identity()
        self._net.eval()

    def __call__(self, images) -> np.ndarray:
        x = torch.as_tensor(_to_image_array(images), dtype=torch.float32)
        x = x.repeat(1, 3, 1, 1)
        x = nn.functional.interpolate(x, size=(299, 299), mode="bilinear", align_corners=False)
        with torch.no_grad():
            return self._net(x).double().numpy()


def extract_features(extractor, images, source_id: str = "") -> FeatureSet:
    """Embed an image stack or an iterable of stacks, row per image."""
    chunks = [images] if isinstance(images, (np.ndarray, torch.Tensor)) else list(images)
    rows = []
    for i, chunk in enumerate(chunks):
        feats = np.asarray(extractor(chunk), dtype=np.float64)
        if not np.all(np.isfinite(feats)):
            raise ExtractionError(f"non-finite activations in batch {i} from {getattr(extractor, 'extractor_id', extractor)}")
        rows.append(feats)
    return FeatureSet(np.concatenate(rows, axis=0), getattr(extractor, "extractor_id", "custom"), source_id)


# ---------------------------------------------------------------------------
# metrics


def _sqrt_trace_of_product(cov_a: np.ndarray, cov_b: np.ndarray) -> float:
    """Tr((cov_a cov_b)^{1/2}) via the symmetrized eigendecomposition."""
    try:
        wa, va = np.linalg.eigh((cov_a + cov_a.T) / 2.0)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"covariance eigendecomposition failed: {exc}") from exc
    wa = np.clip(wa, 0.0, None)
    root_a = (va * np.sqrt(wa)) @ va.T
    m = root_a @ cov_b @ root_a
    try:
        wm = np.linalg.eigvalsh((m + m.T) / 2.0)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            f"product square root failed (eig range [{wa.min():.3e}, {wa.max():.3e}]): {exc}"
        ) from exc
    return float(np.sqrt(np.clip(wm, 0.0, None)).sum())


def compute_fid(a: FeatureSet, b: FeatureSet) -> float:
    """Frechet distance between Gaussian moment summaries of two feature sets."""
    if a.dim != b.dim:
        raise ValueError(f"feature dims differ: {a.dim} vs {b.dim}")
    if a.n < 2 or b.n < 2:
        raise ValueError("FID needs at least 2 feature rows per set")
    mu_a, mu_b = a.features.mean(axis=0), b.features.mean(axis=0)
    cov_a = np.cov(a.features, rowvar=False)
    cov_b = np.cov(b.features, rowvar=False)
    cov_a = np.atleast_2d(cov_a)
    cov_b = np.atleast_2d(cov_b)
    diff = mu_a - mu_b
    fid = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * _sqrt_trace_of_product(cov_a, cov_b))
    return max(fid, 0.0)


def _polynomial_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return (x @ y.T / x.shape[1] + 1.0) ** 3


def _mmd2_unbiased(x: np.ndarray, y: np.ndarray) -> float:
    """Paired unbiased MMD^2: all three terms exclude i == j."""
    m = x.shape[0]
    kxx, kyy, kxy = _polynomial_kernel(x, x), _polynomial_kernel(y, y), _polynomial_kernel(x, y)
    off = lambda k: k.sum() - np.trace(k)
    return float((off(kxx) + off(kyy) - 2.0 * off(kxy)) / (m * (m - 1)))


def compute_kid(a: FeatureSet, b: FeatureSet, subset_size: int = 100, n_subsets: int = 10, seed: int = 0) -> float:
    """Mean unbiased MMD^2 over equal-size subsets of both sets.

    A subset that spans a whole set keeps its row order, so identical inputs
    score exactly zero; smaller subsets are drawn without replacement.
    """
    if a.dim != b.dim:
        raise ValueError(f"feature dims differ: {a.dim} vs {b.dim}")
    if subset_size < 2:
        raise ValueError(f"subset_size must be >= 2, got {subset_size}")
    if subset_size > min(a.n, b.n):
        raise ValueError(f"subset_size {subset_size} exceeds set sizes ({a.n}, {b.n})")
    if n_subsets < 1:
        raise ValueError("n_subsets must be positive")
    rng = np.random.default_rng(seed)
    vals = []
    for _ in range(n_subsets):
        ia = np.arange(a.n) if subset_size == a.n else rng.choice(a.n, subset_size, replace=False)
        ib = np.arange(b.n) if subset_size == b.n else rng.choice(b.n, subset_size, replace=False)
        vals.append(_mmd2_unbiased(a.features[ia], b.features[ib]))
    return float(np.mean(vals))


def compute_prdc(real: FeatureSet, gen: FeatureSet, k: int = 5) -> dict:
    """Precision, recall, density and coverage from k-NN ball membership."""
    if real.dim != gen.dim:
        raise ValueError(f"feature dims differ: {real.dim} vs {gen.dim}")
    if not 1 <= k < min(real.n, gen.n):
        raise ValueError(f"k must satisfy 1 <= k < min(n_real, n_gen) = {min(real.n, gen.n)}")

    def knn_radii(x: np.ndarray) -> np.ndarray:
        d = cdist(x, x)
        np.fill_diagonal(d, np.inf)
        return np.partition(d, k - 1, axis=1)[:, k - 1]

    r_real = knn_radii(real.features)
    r_gen = knn_radii(gen.features)
    d_rg = cdist(real.features, gen.features)  # (n_real, n_gen)

    inside_real_balls = d_rg <= r_real[:, None]
    precision = float(inside_real_balls.any(axis=0).mean())
    density = float(inside_real_balls.sum(axis=0).mean() / k)
    recall = float((d_rg <= r_gen[None, :]).any(axis=1).mean())
    coverage = float((d_rg.min(axis=1) <= r_real).mean())
    return {
        "precision": precision,
        "recall": recall,
        "density": density,
        "coverage": coverage,
        "k": k,
        "n_real": real.n,
        "n_gen": gen.n,
    }


# ---------------------------------------------------------------------------
# report


REPORT_KEYS = ("fid", "kid", "precision", "recall", "density", "coverage", "k", "n_a", "n_b")


@dataclass
class MetricReport:
    fid: float | None = None
    kid: float | None = None
    precision: float | None = None
    recall: float | None = None
    density: float | None = None
    coverage: float | None = None
    k: int | None = None
    n_a: int | None = None
    n_b: int | None = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.fid is not None and self.fid < 0:
            raise ValueError("fid must be nonnegative")
        for name in ("precision", "recall", "coverage"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.density is not None and self.density < 0:
            raise ValueError("density must be nonnegative")

    def to_text(self) -> str:
        out = io.StringIO()
        out.write("# metric report: key, full value, rounded display\n")
        for key in REPORT_KEYS:
            v = getattr(self, key)
            if v is None:
                out.write(f"{key}\tabsent\tabsent\n")
            elif key in ("k", "n_a", "n_b"):
                out.write(f"{key}\t{int(v)}\t{int(v)}\n")
            else:
                out.write(f"{key}\t{v:.17g}\t{v:.2f}\n")
        return out.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "MetricReport":
        values = {}
        for line in text.splitlines():
            if not line or line.startswith("#"):
                continue
            key, full, _ = line.split("\t")
            if key not in REPORT_KEYS:
                raise ValueError(f"unknown report key {key!r}")
            if full == "absent":
                values[key] = None
            elif key in ("k", "n_a", "n_b"):
                values[key] = int(full)
            else:
                values[key] = float(full)
        return cls(**values)


def evaluate_feature_sets(a: FeatureSet, b: FeatureSet, k: int = 5, kid_subset_size: int | None = None,
                          kid_subsets: int = 10, seed: int = 0) -> MetricReport:
    """Full metric panel between a reference set and a candidate set."""
    subset = kid_subset_size or min(100, a.n, b.n)
    prdc = compute_prdc(a, b, k=k) if min(a.n, b.n) > k else None
    return MetricReport(
        fid=compute_fid(a, b),
        kid=compute_kid(a, b, subset_size=subset, n_subsets=kid_subsets, seed=seed),
        precision=None if prdc is None else prdc["precision"],
        recall=None if prdc is None else prdc["recall"],
        density=None if prdc is None else prdc["density"],
        coverage=None if prdc is None else prdc["coverage"],
        k=k,
        n_a=a.n,
        n_b=b.n,
    )
