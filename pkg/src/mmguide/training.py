"""Noise-prediction training for the toy backbones.

Standard denoising objective: draw (z_0, c) from the dataset, a uniform
timestep and fresh Gaussian noise, and regress the model output onto the
noise with MSE.  Conditioning tokens are randomly dropped to the null token
(classifier-free training) or coarsened to the neutral token so that both
the unconditional and the generic prompt are usable at sampling time.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import TrainingDivergedError
from .models import NULL_ID, ImageDenoiser, PointDenoiser
from .schedules import NoiseSchedule
from .synthetic import ToyDataset


@dataclass
class DenoiserTrainResult:
    model: nn.Module
    epoch_losses: list[float]


def _build_model(dataset: ToyDataset, sched: NoiseSchedule) -> nn.Module:
    shape = tuple(dataset.z0.shape[1:])
    if shape == (2,):
        return PointDenoiser(T=sched.T)
    if len(shape) == 3 and shape[0] == 1 and shape[1] == shape[2]:
        return ImageDenoiser(T=sched.T, size=shape[1])
    raise ValueError(f"no backbone for sample shape {shape}")


def train_toy_denoiser(
    dataset: ToyDataset,
    sched: NoiseSchedule,
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int = 128,
    p_uncond: float = 0.1,
    p_neutral: float = 0.3,
    neutral_id: int = 1,
    model: nn.Module | None = None,
) -> DenoiserTrainResult:
    """Train a noise predictor on clean samples; deterministic given seed.

    Per batch element the condition is the sample's own token, replaced by
    the null token with probability p_uncond and by the neutral token with
    probability p_neutral.
    """
    if len(dataset) == 0:
        raise ValueError("dataset must be non-empty")
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    z0_all = dataset.z0.to(torch.float64)
    cond_all = dataset.cond_ids.to(torch.long)
    n = len(dataset)
    expand = (-1,) + (1,) * (z0_all.ndim - 1)

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if model is None:
            model = _build_model(dataset, sched)
        opt = torch.optim.Adam(model.parameters(), lr=lr)
        losses = []
        for _ in range(epochs):
            perm = torch.randperm(n)
            total, count = 0.0, 0
            for start in range(0, n, batch_size):
                idx = perm[start : start + batch_size]
                z0 = z0_all[idx]
                cond = cond_all[idx].clone()
                u = torch.rand(len(idx), dtype=torch.float64)
                cond[u < p_uncond + p_neutral] = neutral_id
                cond[u < p_uncond] = NULL_ID
                tb = torch.randint(1, sched.T + 1, (len(idx),))
                eps = torch.randn(z0.shape, dtype=torch.float64)
                ab = sched.alpha_bar[tb].view(expand)
                z_t = torch.sqrt(ab) * z0 + torch.sqrt(1.0 - ab) * eps
                pred = model(z_t, cond, tb)
                loss = torch.mean((pred - eps) ** 2)
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(f"non-finite denoiser loss at epoch {len(losses) + 1}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
                count += len(idx)
            losses.append(total / count)
    return DenoiserTrainResult(model=model, epoch_losses=losses)
