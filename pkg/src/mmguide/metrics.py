"""Distribution and region metrics plus report rendering.

FID between feature sets a, b with Gaussian fits (mu, Sigma):

    ||mu_a - mu_b||^2 + Tr(Sigma_a + Sigma_b - 2 (Sigma_a Sigma_b)^{1/2})

The trace of the matrix square root is taken from the eigendecomposition of
the symmetrized product Sa^{1/2} Sb Sa^{1/2}; eigenvalues in [-1e-8, 0) are
clipped to zero, anything lower raises with condition diagnostics.

KID is the unbiased MMD^2 estimate under the polynomial kernel
(x.y/d + 1)^3, averaged over random equal-size subsets; it may be slightly
negative when the two distributions coincide.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import NumericalDegeneracyError
from .mask import RegionDetector
from .synthetic import MIXTURE_CENTERS, render_blob

EIG_CLIP_TOL = 1e-8
SIMILARITY_SCALE = 100.0  # similarity is reported as 100 * cosine
DEFAULT_TAU_DETECT = 0.4


@dataclass(frozen=True)
class FeatureSet:
    """N x d feature matrix with a provenance tag."""

    features: np.ndarray
    source: str = ""

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        object.__setattr__(self, "features", f)
        if f.ndim != 2 or f.shape[0] < 1:
            raise ValueError(f"features must be a non-empty N x d matrix, got shape {f.shape}")
        if not np.isfinite(f).all():
            raise ValueError("features contain non-finite values")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


class PoolFeatureEmbedder:
    """Bundled image embedder: adaptive block means plus global stats.

    Deterministic and training-free; external encoders can replace it behind
    the same embed() surface.
    """

    def __init__(self, grid: int = 4):
        self.grid = grid
        self.dim = grid * grid + 2

    def embed(self, images: torch.Tensor) -> np.ndarray:
        if images.ndim != 4 or images.shape[1] != 1:
            raise ValueError(f"expected (N, 1, H, W) images, got {tuple(images.shape)}")
        with torch.no_grad():
            pooled = torch.nn.functional.adaptive_avg_pool2d(images.to(torch.float64), self.grid)
            flat = pooled.reshape(len(images), -1)
            mean = images.mean(dim=(1, 2, 3), keepdim=False)[:, None]
            std = images.std(dim=(1, 2, 3), unbiased=False)[:, None]
            return torch.cat([flat, mean, std], dim=1).numpy()


def _psd_eigsqrt(mat: np.ndarray, what: str) -> np.ndarray:
    """Eigenvalues' square roots of a symmetric near-PSD matrix, clipped."""
    w = np.linalg.eigvalsh((mat + mat.T) / 2.0)
    if w.min() < -EIG_CLIP_TOL:
        raise NumericalDegeneracyError(
            f"{what}: eigenvalue {w.min():.3e} below clip tolerance -{EIG_CLIP_TOL:.0e} "
            f"(max {w.max():.3e}, condition {abs(w.max() / w.min()):.3e})"
        )
    return np.sqrt(np.clip(w, 0.0, None))


def compute_fid(a: FeatureSet, b: FeatureSet) -> float:
    """Frechet distance between Gaussian fits of the two feature sets."""
    if a.dim != b.dim:
        raise ValueError(f"feature dims differ: {a.dim} vs {b.dim}")
    if a.n < 2 or b.n < 2:
        raise ValueError("FID needs at least 2 samples per set (covariance rank)")
    mu_a, mu_b = a.features.mean(axis=0), b.features.mean(axis=0)
    cov_a = np.cov(a.features, rowvar=False)
    cov_b = np.cov(b.features, rowvar=False)

    # sqrt(Sa) via eigendecomposition, then the symmetrized product.
    wa, va = np.linalg.eigh((cov_a + cov_a.T) / 2.0)
    if wa.min() < -EIG_CLIP_TOL:
        raise NumericalDegeneracyError(f"covariance of {a.source or 'a'} not PSD: min eig {wa.min():.3e}")
    sqrt_a = (va * np.sqrt(np.clip(wa, 0.0, None))) @ va.T
    inner = sqrt_a @ cov_b @ sqrt_a
    tr_sqrt = float(_psd_eigsqrt(inner, "FID product matrix").sum())
    return float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)


def _poly_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def _mmd2_unbiased(x: np.ndarray, y: np.ndarray) -> float:
    m, n = len(x), len(y)
    kxx = _poly_kernel(x, x)
    kyy = _poly_kernel(y, y)
    kxy = _poly_kernel(x, y)
    sum_xx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    sum_yy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(sum_xx + sum_yy - 2.0 * kxy.mean())


def kid_subset_values(a: FeatureSet, b: FeatureSet, subset_size: int = 100, subsets: int = 100, seed: int = 0) -> np.ndarray:
    """Per-subset unbiased MMD^2 estimates (useful for standard errors)."""
    if a.dim != b.dim:
        raise ValueError(f"feature dims differ: {a.dim} vs {b.dim}")
    if subset_size < 2:
        raise ValueError(f"subset_size must be >= 2, got {subset_size}")
    if subset_size > a.n or subset_size > b.n:
        raise ValueError(f"subset_size {subset_size} exceeds set sizes ({a.n}, {b.n})")
    rng = np.random.default_rng(seed)
    vals = np.empty(subsets)
    for i in range(subsets):
        xa = a.features[rng.choice(a.n, subset_size, replace=False)]
        xb = b.features[rng.choice(b.n, subset_size, replace=False)]
        vals[i] = _mmd2_unbiased(xa, xb)
    return vals


def compute_kid(a: FeatureSet, b: FeatureSet, subset_size: int = 100, subsets: int = 100, seed: int = 0) -> float:
    """Subset-averaged unbiased MMD^2 with the cubic polynomial kernel."""
    return float(kid_subset_values(a, b, subset_size, subsets, seed).mean())


def hand_confidence(images, detector: RegionDetector, include_undetected: bool = False) -> float | None:
    """Mean detector confidence over images with a detected region.

    Returns None (undefined-metric marker) when nothing is detected.  With
    include_undetected=True undetected images count as zeros instead.
    """
    scores, detected = [], []
    for img in images:
        det = detector.detect(img)
        hit = bool(det.D.sum() > 0)
        detected.append(hit)
        scores.append(det.S if hit else 0.0)
    if include_undetected:
        return float(np.mean(scores)) if scores else None
    hits = [s for s, d in zip(scores, detected) if d]
    if not hits:
        return None
    return float(np.mean(hits))


def hand_probability(images, detector: RegionDetector, tau_detect: float = DEFAULT_TAU_DETECT) -> float:
    """Fraction of images with a detection at confidence >= tau_detect."""
    n = len(images)
    if n == 0:
        raise ValueError("hand_probability needs a non-empty image list")
    hits = 0
    for img in images:
        det = detector.detect(img)
        if det.D.sum() > 0 and det.S >= tau_detect:
            hits += 1
    return hits / n


def text_image_similarity(images, prompts: list[str], embedder) -> float:
    """Mean scaled cosine similarity between paired image/prompt embeddings."""
    if len(images) != len(prompts):
        raise ValueError(f"got {len(images)} images but {len(prompts)} prompts")
    ei = np.asarray(embedder.embed_images(images), dtype=np.float64)
    et = np.asarray(embedder.embed_tokens(prompts), dtype=np.float64)
    num = (ei * et).sum(axis=1)
    den = np.linalg.norm(ei, axis=1) * np.linalg.norm(et, axis=1)
    return float(SIMILARITY_SCALE * np.mean(num / den))


class ToyImageJointEmbedder:
    """Shared image/token space for the blob vocabulary.

    Token prototypes are mean features of seeded class renders; the neutral
    and null tokens map to the average prototype.
    """

    def __init__(self, pixel_size: int = 32, vocab=("<null>", "shape", "disc", "square"), n_renders: int = 64, seed: int = 1234):
        self.embedder = PoolFeatureEmbedder()
        self.pixel_size = pixel_size
        gen = torch.Generator().manual_seed(seed)
        protos = {}
        for shape in ("disc", "square"):
            renders = []
            for _ in range(n_renders):
                extent = float(torch.empty(1, dtype=torch.float64).uniform_(pixel_size / 6.5, pixel_size / 4.2, generator=gen))
                cy = float(torch.empty(1, dtype=torch.float64).uniform_(extent + 1, pixel_size - extent - 2, generator=gen))
                cx = float(torch.empty(1, dtype=torch.float64).uniform_(extent + 1, pixel_size - extent - 2, generator=gen))
                renders.append(render_blob(pixel_size, shape, cy, cx, extent, 0.95))
            protos[shape] = self.embedder.embed(torch.stack(renders)).mean(axis=0)
        avg = (protos["disc"] + protos["square"]) / 2.0
        self.prototypes = {tok: protos.get(tok, avg) for tok in vocab}

    def embed_images(self, images) -> np.ndarray:
        if not isinstance(images, torch.Tensor):
            images = torch.stack(list(images))
        return self.embedder.embed(images)

    def embed_tokens(self, tokens: list[str]) -> np.ndarray:
        return np.stack([self.prototypes[t] for t in tokens])


class ToyPointJointEmbedder:
    """Shared point/token space: points lifted with a constant coordinate."""

    def __init__(self):
        a, b = np.asarray(MIXTURE_CENTERS[0]), np.asarray(MIXTURE_CENTERS[1])
        self.prototypes = {
            "mode_a": np.append(a, 1.0),
            "mode_b": np.append(b, 1.0),
            "point": np.append((a + b) / 2.0, 1.0),
            "<null>": np.append((a + b) / 2.0, 1.0),
        }

    def embed_images(self, points) -> np.ndarray:
        pts = points.detach().numpy() if isinstance(points, torch.Tensor) else np.asarray(points)
        return np.concatenate([pts, np.ones((len(pts), 1))], axis=1)

    def embed_tokens(self, tokens: list[str]) -> np.ndarray:
        return np.stack([self.prototypes[t] for t in tokens])


@dataclass(frozen=True)
class MetricsReport:
    """Table-row schema: the five metrics plus run metadata.

    None marks an undefined metric (rendered as n/a).
    """

    fid: float | None
    kid: float | None
    hand_confidence: float | None
    hand_probability: float | None
    text_image_similarity: float | None
    metadata: dict = field(default_factory=dict)


def make_report(
    fid: float | None,
    kid: float | None,
    hand_conf: float | None,
    hand_prob: float | None,
    similarity: float | None,
    metadata: dict,
    out_path=None,
) -> MetricsReport:
    """Assemble a report and optionally write it (byte-stable JSON)."""
    report = MetricsReport(
        fid=fid,
        kid=kid,
        hand_confidence=hand_conf,
        hand_probability=hand_prob,
        text_image_similarity=similarity,
        metadata=dict(metadata),
    )
    if out_path is not None:
        write_report(out_path, report)
    return report


def write_report(path, report: MetricsReport) -> None:
    with open(Path(path), "w", encoding="utf-8") as fh:
        json.dump(asdict(report), fh, sort_keys=True, indent=2)
        fh.write("\n")


def read_report(path) -> MetricsReport:
    with open(Path(path), encoding="utf-8") as fh:
        d = json.load(fh)
    return MetricsReport(
        fid=d["fid"],
        kid=d["kid"],
        hand_confidence=d["hand_confidence"],
        hand_probability=d["hand_probability"],
        text_image_similarity=d["text_image_similarity"],
        metadata=d["metadata"],
    )


_COLUMNS = ("fid", "kid", "hand_confidence", "hand_probability", "text_image_similarity")


def render_comparison_table(rows: list[tuple[str, MetricsReport]]) -> str:
    """Fixed-width comparison table, sorted by FID ascending (n/a rows last)."""

    def key(item):
        fid = item[1].fid
        return (fid is None, fid if fid is not None else 0.0)

    def fmt(v):
        return "n/a" if v is None else f"{v:.4f}"

    header = ["method", "FID", "KID", "HandConf", "HandProb", "TextSim"]
    lines = [" | ".join(f"{h:>12}" for h in header)]
    lines.append("-+-".join("-" * 12 for _ in header))
    for name, rep in sorted(rows, key=key):
        cells = [name] + [fmt(getattr(rep, c)) for c in _COLUMNS]
        lines.append(" | ".join(f"{c:>12}" for c in cells))
    return "\n".join(lines) + "\n"
