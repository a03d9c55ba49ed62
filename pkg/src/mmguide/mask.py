"""Cumulative region masks: detection, thresholded accumulation, and
resampling to latent resolution.

The mask law is

    M_next = max(M, [S >= tau] * D)

elementwise over a binary H x W grid, where D is a detector's binary region
output and S its confidence.  The max makes the mask pixelwise nondecreasing
over a sampling trajectory, which is what makes it robust to a detector that
fires only occasionally.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
import torch
from scipy import ndimage

from .imgio import save_mask_png


def _as_grid(image) -> np.ndarray:
    """Coerce a (1,H,W) / (H,W) tensor or array to a 2-D float64 array."""
    if isinstance(image, torch.Tensor):
        image = image.detach().cpu().numpy()
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D grid, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class Detection:
    """Binary detector output D with scalar confidence S."""

    D: np.ndarray
    S: float

    def __post_init__(self):
        D = np.asarray(self.D, dtype=np.uint8)
        object.__setattr__(self, "D", D)
        if not np.isin(D, (0, 1)).all():
            raise ValueError("detection grid must be binary")
        if not 0.0 <= self.S <= 1.0:
            raise ValueError(f"confidence must be in [0,1], got {self.S}")


@dataclass(frozen=True)
class CumulativeMask:
    """Monotone binary mask with a per-update area log.

    Value-semantic: updates return new masks, the grid is never mutated.
    """

    M: np.ndarray
    history: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        M = np.asarray(self.M, dtype=np.uint8)
        M.setflags(write=False)
        object.__setattr__(self, "M", M)
        if M.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {M.shape}")
        if not np.isin(M, (0, 1)).all():
            raise ValueError("mask values must be exactly 0 or 1")

    @property
    def shape(self) -> tuple[int, int]:
        return self.M.shape

    @property
    def area(self) -> int:
        return int(self.M.sum())


class RegionDetector(Protocol):
    def detect(self, image) -> Detection: ...


def init_mask(H: int, W: int) -> CumulativeMask:
    """All-zero mask of the given pixel dimensions."""
    if H < 1 or W < 1:
        raise ValueError(f"mask dims must be >= 1, got {H}x{W}")
    return CumulativeMask(np.zeros((H, W), dtype=np.uint8))


def update_mask(mask: CumulativeMask, det: Detection, tau: float) -> CumulativeMask:
    """Accumulate a detection: max(M, [S >= tau] * D).  Returns a new mask."""
    if det.D.shape != mask.M.shape:
        raise ValueError(f"detection shape {det.D.shape} != mask shape {mask.M.shape}")
    contrib = det.D if det.S >= tau else np.zeros_like(det.D)
    new = np.maximum(mask.M, contrib)
    out = CumulativeMask(new, mask.history + (int(new.sum()),))
    return out


def downsample_mask(mask: CumulativeMask | np.ndarray, latent_h: int, latent_w: int) -> np.ndarray:
    """Max-pool the pixel mask onto a latent grid.

    Pixel (i, j) belongs to latent cell ((i*latent_h)//H, (j*latent_w)//W);
    a cell is 1 iff any of its pixels is 1, so accumulation order and
    downsampling commute.
    """
    M = mask.M if isinstance(mask, CumulativeMask) else np.asarray(mask, dtype=np.uint8)
    H, W = M.shape
    if not (1 <= latent_h <= H and 1 <= latent_w <= W):
        raise ValueError(f"latent dims {latent_h}x{latent_w} must be in [1, {H}]x[1, {W}]")
    ri = (np.arange(H) * latent_h) // H
    ci = (np.arange(W) * latent_w) // W
    out = np.zeros((latent_h, latent_w), dtype=np.uint8)
    np.maximum.at(out, (ri[:, None].repeat(W, axis=1), ci[None, :].repeat(H, axis=0)), M)
    return out


def synthetic_detect(image, intensity_threshold: float = 0.5) -> Detection:
    """Bundled detector: the largest 4-connected bright region.

    D marks that region's support; S is its mean intensity clipped to [0,1].
    No region above threshold is a valid result (D all-zero, S=0), not an
    error.
    """
    arr = _as_grid(image)
    if not np.isfinite(arr).all():
        raise ValueError("image contains non-finite values")
    above = arr > intensity_threshold
    labels, n = ndimage.label(above)
    if n == 0:
        return Detection(np.zeros_like(arr, dtype=np.uint8), 0.0)
    sizes = np.bincount(labels.ravel())[1:]
    best = int(np.argmax(sizes)) + 1  # ties resolve to the first label
    D = (labels == best).astype(np.uint8)
    S = float(np.clip(arr[D == 1].mean(), 0.0, 1.0))
    return Detection(D, S)


@dataclass(frozen=True)
class SyntheticBlobDetector:
    """RegionDetector adapter around :func:`synthetic_detect`."""

    intensity_threshold: float = 0.5

    def detect(self, image) -> Detection:
        return synthetic_detect(image, self.intensity_threshold)


def save_mask(path, mask: CumulativeMask) -> Path:
    """Persist as 1-bit PNG plus a line-delimited area log sidecar."""
    path = Path(path)
    save_mask_png(path, mask.M)
    sidecar = path.with_suffix(".areas.jsonl")
    with open(sidecar, "w", encoding="utf-8") as fh:
        for i, area in enumerate(mask.history):
            fh.write(f'{{"update": {i}, "area": {area}}}\n')
    return sidecar
