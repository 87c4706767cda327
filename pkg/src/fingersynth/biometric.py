"""Matcher-based uniqueness analysis and spoof-score histograms.

The default matcher takes the best normalized cross-correlation over cyclic
translations within +/-8 px and rotations within +/-15 degrees in 5-degree
steps, averaged over both argument orders (exactly symmetric) and clipped to
[0, 1] so anti-correlation maps to the floor. Scoring is batched through
precomputed FFT stacks; higher scores mean more similar images.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
from scipy.ndimage import rotate as nd_rotate

from .errors import ConfigurationError

PAIR_TYPES = ("genuine", "impostor", "assumed_impostor")
DEFAULT_ANGLES = (-15.0, -10.0, -5.0, 0.0, 5.0, 10.0, 15.0)
DEFAULT_MAX_SHIFT = 8


def _image_stack(images) -> np.ndarray:
    arr = images.detach().cpu().numpy() if isinstance(images, torch.Tensor) else np.asarray(images)
    if arr.ndim == 4 and arr.shape[1] == 1:
        arr = arr[:, 0]
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"expected (N,H,W) or (N,1,H,W) images, got shape {arr.shape}")
    return arr.astype(np.float64)


def _normalize(img: np.ndarray) -> np.ndarray:
    z = img - img.mean()
    n = np.linalg.norm(z)
    return z / n if n > 0 else z


class MatcherIndex:
    """Per-image FFT stacks for one image set (base + each rotation)."""

    def __init__(self, images, angles=DEFAULT_ANGLES):
        arr = _image_stack(images)
        n, h, w = arr.shape
        self.shape = (h, w)
        base = np.empty((n, h, w))
        rots = np.empty((n, len(angles), h, w))
        for i in range(n):
            base[i] = _normalize(arr[i])
            for a, ang in enumerate(angles):
                r = arr[i] if ang == 0 else nd_rotate(arr[i], ang, reshape=False, order=1, mode="nearest")
                rots[i, a] = _normalize(r)
        self.base_fft = np.fft.rfft2(base).astype(np.complex64)
        self.rot_fft = np.fft.rfft2(rots).astype(np.complex64)


def _shift_mask(h: int, w: int, max_shift: int) -> np.ndarray:
    mask = np.zeros((h, w), dtype=bool)
    s = min(max_shift, h - 1, w - 1)
    mask[: s + 1, : s + 1] = True
    mask[: s + 1, w - s :] = True
    mask[h - s :, : s + 1] = True
    mask[h - s :, w - s :] = True
    return mask


class NccMatcher:
    """Translation/rotation-searched normalized cross-correlation matcher."""

    def __init__(self, max_shift: int = DEFAULT_MAX_SHIFT, angles=DEFAULT_ANGLES, chunk: int = 512):
        self.max_shift = max_shift
        self.angles = tuple(angles)
        self.chunk = chunk
        self.matcher_id = f"ncc-shift{max_shift}-rot{int(max(angles))}"

    def index(self, images) -> MatcherIndex:
        return MatcherIndex(images, self.angles)

    def _best_dir(self, base_fft: np.ndarray, rot_fft: np.ndarray, mask: np.ndarray, h: int, w: int) -> np.ndarray:
        corr = np.fft.irfft2(np.conj(base_fft)[:, None] * rot_fft, s=(h, w))
        return corr[..., mask].max(axis=(1, 2))

    def score_indexed(self, index_a: MatcherIndex, idx_a, index_b: MatcherIndex, idx_b) -> np.ndarray:
        if index_a.shape != index_b.shape:
            raise ValueError(f"image sizes differ: {index_a.shape} vs {index_b.shape}")
        idx_a = np.asarray(idx_a, dtype=np.int64)
        idx_b = np.asarray(idx_b, dtype=np.int64)
        h, w = index_a.shape
        mask = _shift_mask(h, w, self.max_shift)
        out = np.empty(len(idx_a))
        for lo in range(0, len(idx_a), self.chunk):
            ia, ib = idx_a[lo : lo + self.chunk], idx_b[lo : lo + self.chunk]
            fwd = self._best_dir(index_a.base_fft[ia], index_b.rot_fft[ib], mask, h, w)
            rev = self._best_dir(index_b.base_fft[ib], index_a.rot_fft[ia], mask, h, w)
            out[lo : lo + self.chunk] = (fwd + rev) / 2.0
        return np.clip(out, 0.0, 1.0)

    def score(self, img_a, img_b) -> float:
        a, b = _image_stack(img_a), _image_stack(img_b)
        if a.shape != b.shape:
            raise ValueError(f"image sizes differ: {a.shape[1:]} vs {b.shape[1:]}")
        return float(self.score_indexed(self.index(a), [0], self.index(b), [0])[0])


def default_match_score(img_a, img_b) -> float:
    """Score one pair with the default matcher; symmetric, in [0, 1]."""
    return NccMatcher().score(img_a, img_b)


# ---------------------------------------------------------------------------
# pair construction and scoring


@dataclass
class PairSet:
    idx_a: np.ndarray
    idx_b: np.ndarray
    pair_type: str
    seed: int
    cross_dataset: bool = False

    def __len__(self) -> int:
        return len(self.idx_a)


def make_pairs(dataset_a, pair_type: str, n_pairs: int, seed: int, dataset_b=None) -> PairSet:
    """Sample index pairs uniformly; deterministic per seed, no self-pairs.

    genuine/impostor need identity labels on dataset_a; assumed_impostor
    pairs draw within dataset_a or across (dataset_a, dataset_b).
    """
    if pair_type not in PAIR_TYPES:
        raise ValueError(f"unknown pair type {pair_type!r}, expected one of {PAIR_TYPES}")
    if n_pairs < 1:
        raise ValueError("n_pairs must be positive")
    rng = np.random.default_rng(seed)
    n_a = len(dataset_a)

    if pair_type in ("genuine", "impostor"):
        if dataset_b is not None:
            raise ValueError(f"{pair_type} pairs are drawn within one labeled dataset")
        idents = list(getattr(dataset_a, "identities", []))
        if not idents or any(v is None for v in idents):
            raise ValueError(f"{pair_type} pairs need identity labels on every image")
        uniq, codes = np.unique(np.array(idents, dtype=object), return_inverse=True)
        counts = np.bincount(codes)
        if pair_type == "genuine" and not np.any(counts >= 2):
            raise ValueError("no identity has two or more images; genuine pairs impossible")
        if pair_type == "impostor" and len(uniq) < 2:
            raise ValueError("need at least two identities for impostor pairs")

        out_a, out_b = [], []
        while len(out_a) < n_pairs:
            cand = rng.integers(0, n_a, size=(max(4 * n_pairs, 1024), 2))
            ok = cand[:, 0] != cand[:, 1]
            same = codes[cand[:, 0]] == codes[cand[:, 1]]
            ok &= same if pair_type == "genuine" else ~same
            out_a.extend(cand[ok, 0].tolist())
            out_b.extend(cand[ok, 1].tolist())
        return PairSet(np.array(out_a[:n_pairs]), np.array(out_b[:n_pairs]), pair_type, seed)

    if dataset_b is None:
        if n_a < 2:
            raise ValueError("need at least two images for within-set pairs")
        out_a, out_b = [], []
        while len(out_a) < n_pairs:
            cand = rng.integers(0, n_a, size=(max(2 * n_pairs, 1024), 2))
            ok = cand[:, 0] != cand[:, 1]
            out_a.extend(cand[ok, 0].tolist())
            out_b.extend(cand[ok, 1].tolist())
        return PairSet(np.array(out_a[:n_pairs]), np.array(out_b[:n_pairs]), pair_type, seed)

    ia = rng.integers(0, n_a, size=n_pairs)
    ib = rng.integers(0, len(dataset_b), size=n_pairs)
    return PairSet(ia, ib, pair_type, seed, cross_dataset=True)


@dataclass
class MatchScoreTable:
    scores: np.ndarray
    pair_set: PairSet
    matcher_id: str

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("match scores must be finite")


def score_pairs(pair_set: PairSet, images_a=None, images_b=None, matcher: NccMatcher | None = None,
                index_a: MatcherIndex | None = None, index_b: MatcherIndex | None = None) -> MatchScoreTable:
    """Score every pair in a PairSet with the (default) matcher, batched.

    Pass raw image stacks or prebuilt MatcherIndex objects (cheaper when one
    set participates in many pair populations).
    """
    matcher = matcher or NccMatcher()
    if images_a is None and index_a is None:
        raise ValueError("need images_a or index_a")
    ia = index_a if index_a is not None else matcher.index(images_a)
    if pair_set.cross_dataset:
        if images_b is None and index_b is None:
            raise ValueError("cross-dataset pairs need images_b or index_b")
        ib = index_b if index_b is not None else matcher.index(images_b)
    else:
        ib = ia
    return MatchScoreTable(matcher.score_indexed(ia, pair_set.idx_a, ib, pair_set.idx_b), pair_set, matcher.matcher_id)


def write_score_table(path, table: MatchScoreTable, ids_a=None, ids_b=None) -> None:
    """Delimited text: pair_index, id_a, id_b, pair_type, score."""
    ps = table.pair_set
    with open(path, "w", encoding="utf-8") as f:
        f.write("# pair_index\tid_a\tid_b\tpair_type\tscore\n")
        for i in range(len(ps)):
            a, b = int(ps.idx_a[i]), int(ps.idx_b[i])
            name_a = ids_a[a] if ids_a is not None and ids_a[a] is not None else f"a{a}"
            name_b = ids_b[b] if ids_b is not None and ids_b[b] is not None else f"b{b}"
            f.write(f"{i}\t{name_a}\t{name_b}\t{ps.pair_type}\t{table.scores[i]:.17g}\n")


# ---------------------------------------------------------------------------
# FAR calibration


@dataclass(frozen=True)
class FarThreshold:
    threshold: float
    k: int
    realized_far: float
    tie_flag: bool
    baseline_far: float


def calibrate_far_threshold(impostor_scores, baseline_far: float) -> FarThreshold:
    """Threshold at the k-th highest impostor score, k = floor(N * baseline_far).

    The accept rule is score >= threshold. With k = 0 the threshold is +inf
    (nothing accepted). Ties can push the realized FAR above target; the tie
    flag records that.
    """
    scores = np.asarray(impostor_scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("impostor score vector is empty")
    if not 0.0 < baseline_far < 1.0:
        raise ValueError(f"baseline_far must lie in (0, 1), got {baseline_far}")
    n = scores.size
    k = int(math.floor(n * baseline_far))
    if k == 0:
        return FarThreshold(float("inf"), 0, 0.0, False, baseline_far)
    threshold = float(np.sort(scores)[::-1][k - 1])
    realized = float(np.mean(scores >= threshold))
    return FarThreshold(threshold, k, realized, realized > k / n, baseline_far)


def compute_synthetic_far(scores, threshold: float) -> float:
    """Fraction of scores at or above the calibrated threshold."""
    arr = scores.scores if isinstance(scores, MatchScoreTable) else np.asarray(scores, dtype=np.float64)
    if arr.size == 0:
        return 0.0
    return float(np.mean(arr >= threshold))


@dataclass
class FarAnalysis:
    baseline_far: float
    threshold: float
    realized_baseline_far: float
    tie_flag: bool
    populations: dict[str, float] = field(default_factory=dict)

    def to_text(self) -> str:
        out = io.StringIO()
        out.write("# pair_population\tbaseline_far\tthreshold\tsynthetic_far\ttie_flag\n")
        out.write(
            f"real_impostor\t{self.baseline_far:.17g}\t{self.threshold:.17g}\t"
            f"{self.realized_baseline_far:.17g}\t{int(self.tie_flag)}\n"
        )
        for name in sorted(self.populations):
            out.write(
                f"{name}\t{self.baseline_far:.17g}\t{self.threshold:.17g}\t"
                f"{self.populations[name]:.17g}\t{int(self.tie_flag)}\n"
            )
        return out.getvalue()


def far_analysis(impostor_scores, population_scores: dict[str, np.ndarray], baseline_far: float) -> FarAnalysis:
    """Calibrate on real impostors and report synthetic FARs per population."""
    cal = calibrate_far_threshold(impostor_scores, baseline_far)
    pops = {name: compute_synthetic_far(scores, cal.threshold) for name, scores in population_scores.items()}
    return FarAnalysis(baseline_far, cal.threshold, cal.realized_far, cal.tie_flag, pops)


def cumulative_distribution(scores) -> np.ndarray:
    """Sorted (score, fraction <= score) rows for cumulative plots."""
    arr = np.sort(np.asarray(scores, dtype=np.float64))
    frac = np.arange(1, arr.size + 1) / arr.size
    return np.column_stack([arr, frac])


# ---------------------------------------------------------------------------
# spoof-score histograms


@dataclass
class SpoofHistogram:
    counts: np.ndarray
    bin_edges: np.ndarray
    mean: float
    std: float
    n: int

    def to_rows(self) -> str:
        out = io.StringIO()
        out.write("# bin_left\tbin_right\tcount\n")
        for i, c in enumerate(self.counts):
            out.write(f"{self.bin_edges[i]:.17g}\t{self.bin_edges[i + 1]:.17g}\t{int(c)}\n")
        return out.getvalue()


def spoof_score_histogram(scorer, images, bins: int = 20) -> SpoofHistogram:
    """Histogram of spoof-detection scores over [0, 1] with summary stats."""
    stack = _image_stack(images)
    if stack.shape[0] == 0:
        raise ValueError("dataset is empty")
    scores = np.asarray(scorer(images), dtype=np.float64).ravel()
    if scores.min() < 0.0 or scores.max() > 1.0:
        raise ValueError("spoof scores must lie in [0, 1]")
    counts, edges = np.histogram(scores, bins=bins, range=(0.0, 1.0))
    return SpoofHistogram(counts, edges, float(scores.mean()), float(scores.std()), scores.size)


def histogram_overlap(h1: SpoofHistogram, h2: SpoofHistogram) -> float:
    """Overlap coefficient: sum of per-bin minima of the normalized masses."""
    if len(h1.counts) != len(h2.counts) or not np.allclose(h1.bin_edges, h2.bin_edges):
        raise ValueError("histograms must share binning")
    p = h1.counts / max(h1.n, 1)
    q = h2.counts / max(h2.n, 1)
    return float(np.minimum(p, q).sum())


class CnnSpoofScorer:
    """Small binary live/spoof classifier; higher output = more spoof-like."""

    scorer_id = "cnn-spoof-v1"

    def __init__(self, width: int = 8):
        self.width = width
        self.net: nn.Module | None = None

    def fit(self, live_images, spoof_images, epochs: int = 12, batch_size: int = 64,
            lr: float = 5e-3, seed: int = 0) -> "CnnSpoofScorer":
        torch.manual_seed(seed)
        w = self.width
        self.net = nn.Sequential(
            nn.Conv2d(1, w, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(2 * w, 2 * w, 3, stride=2, padding=1), nn.SiLU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(2 * w, 1),
        )
        x = torch.cat([
            torch.as_tensor(_image_stack(live_images)[:, None], dtype=torch.float32),
            torch.as_tensor(_image_stack(spoof_images)[:, None], dtype=torch.float32),
        ])
        y = torch.cat([torch.zeros(len(live_images)), torch.ones(len(spoof_images))])
        opt = torch.optim.Adam(self.net.parameters(), lr=lr)
        gen = torch.Generator().manual_seed(seed)
        for _ in range(epochs):
            perm = torch.randperm(len(x), generator=gen)
            for lo in range(0, len(x), batch_size):
                sel = perm[lo : lo + batch_size]
                opt.zero_grad()
                logits = self.net(x[sel]).squeeze(1)
                loss = nn.functional.binary_cross_entropy_with_logits(logits, y[sel])
                loss.backward()
                opt.step()
        self.net.eval()
        return self

    def __call__(self, images) -> np.ndarray:
        if self.net is None:
            raise ConfigurationError("spoof scorer must be fit before use")
        x = torch.as_tensor(_image_stack(images)[:, None], dtype=torch.float32)
        with torch.no_grad():
            return torch.sigmoid(self.net(x).squeeze(1)).double().numpy()
