"""Synthetic datasets: the two-mode point mixture, bright-blob images, and
the bundled discriminator corpora.

Everything here is seeded and deterministic; these generators stand in for
the external image corpora so the whole pipeline runs offline.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch

from .imgio import save_image_png
from .models import IMAGE_VOCAB, POINT_VOCAB

MIXTURE_CENTERS = ((-2.0, 0.0), (2.0, 0.0))  # mode_a, mode_b
MIXTURE_STD = 0.3


@dataclass(frozen=True)
class ToyDataset:
    """Clean samples paired with their condition token ids."""

    z0: torch.Tensor
    cond_ids: torch.Tensor

    def __post_init__(self):
        if len(self.z0) == 0:
            raise ValueError("dataset must be non-empty")
        if len(self.z0) != len(self.cond_ids):
            raise ValueError("z0 and cond_ids lengths differ")

    def __len__(self):
        return len(self.z0)


def mixture_points(n: int, seed: int, centers=MIXTURE_CENTERS, std: float = MIXTURE_STD):
    """n points from an equal-weight 2-D Gaussian mixture; returns (points, mode labels)."""
    gen = torch.Generator().manual_seed(seed)
    labels = torch.randint(0, len(centers), (n,), generator=gen)
    c = torch.tensor(centers, dtype=torch.float64)[labels]
    pts = c + std * torch.randn((n, 2), generator=gen, dtype=torch.float64)
    return pts, labels


def point_dataset(n: int, seed: int) -> ToyDataset:
    """Mixture points conditioned on their mode tokens (mode_a / mode_b)."""
    pts, labels = mixture_points(n, seed)
    cond = torch.where(
        labels == 0,
        torch.tensor(POINT_VOCAB.index("mode_a")),
        torch.tensor(POINT_VOCAB.index("mode_b")),
    )
    return ToyDataset(pts, cond)


def render_blob(size: int, shape: str, cy: float, cx: float, extent: float, value: float) -> torch.Tensor:
    """One bright region on black, shape (1, size, size).

    disc: filled circle of radius extent; square: filled axis-aligned square
    of half-side extent.
    """
    ys = torch.arange(size, dtype=torch.float64)[:, None]
    xs = torch.arange(size, dtype=torch.float64)[None, :]
    if shape == "disc":
        inside = (ys - cy) ** 2 + (xs - cx) ** 2 <= extent**2
    elif shape == "square":
        inside = (torch.abs(ys - cy) <= extent) & (torch.abs(xs - cx) <= extent)
    else:
        raise ValueError(f"unknown blob shape {shape!r}")
    return torch.where(inside, torch.tensor(value, dtype=torch.float64), torch.tensor(0.0, dtype=torch.float64))[None]


def _random_blob(size: int, shape: str, gen: torch.Generator, value_range=(0.85, 1.0)) -> torch.Tensor:
    extent = float(torch.empty(1, dtype=torch.float64).uniform_(size / 6.5, size / 4.2, generator=gen))
    lo, hi = extent + 1.0, size - extent - 2.0
    cy = float(torch.empty(1, dtype=torch.float64).uniform_(lo, hi, generator=gen))
    cx = float(torch.empty(1, dtype=torch.float64).uniform_(lo, hi, generator=gen))
    val = float(torch.empty(1, dtype=torch.float64).uniform_(*value_range, generator=gen))
    return render_blob(size, shape, cy, cx, extent, val)


def blob_dataset(n: int, seed: int, size: int = 16, background_noise: float = 0.02) -> ToyDataset:
    """n single-blob images conditioned on their shape tokens (disc / square)."""
    gen = torch.Generator().manual_seed(seed)
    imgs, conds = [], []
    shapes = ("disc", "square")
    for i in range(n):
        shape = shapes[int(torch.randint(0, 2, (1,), generator=gen))]
        img = _random_blob(size, shape, gen)
        img = img + background_noise * torch.randn(img.shape, generator=gen, dtype=torch.float64)
        imgs.append(img.clamp(0.0, 1.0))
        conds.append(IMAGE_VOCAB.index(shape))
    return ToyDataset(torch.stack(imgs), torch.tensor(conds))


@dataclass(frozen=True)
class DiscCorpus:
    """Inputs, condition ids, and real/fake labels for discriminator training."""

    inputs: torch.Tensor
    cond_ids: torch.Tensor
    labels: torch.Tensor  # bool, True = real

    def __len__(self):
        return len(self.inputs)


def point_disc_corpus(n_per_class: int, seed: int) -> DiscCorpus:
    """Points labelled real at mode_a and fake at mode_b, neutral condition.

    Training a discriminator on this corpus makes visual guidance prefer
    mode_a.
    """
    gen = torch.Generator().manual_seed(seed)
    a = torch.tensor(MIXTURE_CENTERS[0], dtype=torch.float64) + MIXTURE_STD * torch.randn(
        (n_per_class, 2), generator=gen, dtype=torch.float64
    )
    b = torch.tensor(MIXTURE_CENTERS[1], dtype=torch.float64) + MIXTURE_STD * torch.randn(
        (n_per_class, 2), generator=gen, dtype=torch.float64
    )
    x = torch.cat([a, b])
    cond = torch.full((2 * n_per_class,), POINT_VOCAB.index("point"))
    labels = torch.cat([torch.ones(n_per_class, dtype=torch.bool), torch.zeros(n_per_class, dtype=torch.bool)])
    return DiscCorpus(x, cond, labels)


def image_disc_corpus(n_per_class: int, seed: int, pixel_size: int = 32) -> DiscCorpus:
    """Crisp blobs (real) vs mushy blob+noise composites (fake) at pixel resolution."""
    gen = torch.Generator().manual_seed(seed)
    shapes = ("disc", "square")
    imgs, conds, labels = [], [], []
    for i in range(2 * n_per_class):
        shape = shapes[int(torch.randint(0, 2, (1,), generator=gen))]
        blob = _random_blob(pixel_size, shape, gen)
        real = i < n_per_class
        if real:
            img = blob + 0.02 * torch.randn(blob.shape, generator=gen, dtype=torch.float64)
        else:
            noise = torch.rand(blob.shape, generator=gen, dtype=torch.float64)
            img = 0.45 * blob + 0.5 * noise
        imgs.append(img.clamp(0.0, 1.0))
        conds.append(IMAGE_VOCAB.index(shape))
        labels.append(real)
    return DiscCorpus(torch.stack(imgs), torch.tensor(conds), torch.tensor(labels, dtype=torch.bool))


def write_fixture_corpus(root, n_per_source: int, seed: int, pixel_size: int = 32) -> dict[str, list[Path]]:
    """Write a two-source directory tree of blob PNGs for pipeline fixtures.

    Intensities straddle the 0.8 detector-score threshold so filtering has
    something to reject: even indices render bright (kept), odd ones dim
    (dropped).
    """
    root = Path(root)
    gen = torch.Generator().manual_seed(seed)
    out: dict[str, list[Path]] = {}
    for source in ("corpusA", "corpusB"):
        d = root / source
        d.mkdir(parents=True, exist_ok=True)
        paths = []
        for i in range(n_per_source):
            bright = i % 2 == 0
            vr = (0.9, 1.0) if bright else (0.45, 0.6)
            shape = ("disc", "square")[int(torch.randint(0, 2, (1,), generator=gen))]
            img = _random_blob(pixel_size, shape, gen, value_range=vr)
            p = d / f"{source}_{i:04d}.png"
            save_image_png(p, img)
            paths.append(p)
        out[source] = paths
    return out
