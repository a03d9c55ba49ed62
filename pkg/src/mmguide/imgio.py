"""PNG and array persistence helpers.

Images travel as float64 tensors in [0, 1] with shape (1, H, W); masks as
numpy uint8 {0,1} grids.  PNG encoding is deterministic, so fixed tensors
produce byte-identical files.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image


def save_image_png(path, img: torch.Tensor) -> None:
    arr = img.detach().to(torch.float64).numpy()
    if arr.ndim == 3:
        if arr.shape[0] != 1:
            raise ValueError(f"expected single-channel image, got shape {arr.shape}")
        arr = arr[0]
    q = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(q, mode="L").save(path, format="PNG")


def load_image_png(path) -> torch.Tensor:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    return torch.from_numpy(arr)[None, :, :]


def save_mask_png(path, mask: np.ndarray) -> None:
    Image.fromarray((mask > 0).astype(np.uint8) * 255, mode="L").convert("1").save(path, format="PNG")


def load_mask_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) > 127).astype(np.uint8)


def list_pngs(directory) -> list[Path]:
    return sorted(Path(directory).glob("*.png"))
