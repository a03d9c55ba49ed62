"""Noise-prediction backbones and latent-to-pixel decoders.

Two trainable reference backbones ship:

* a fully-connected denoiser over 2-D points (admits analytic oracles), and
* a small convolutional denoiser over 1x16x16 latents (exercises spatial
  masks; decoded to 1x32x32 pixels by nearest-neighbour replication).

Conditioning is a learned embedding table over a closed token vocabulary;
id 0 is always the null token used for classifier-free dropout.  The
analytic-score denoiser of a Gaussian is included as a ground-truth model for
sampler verification.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .schedules import NoiseSchedule

NULL_ID = 0

# Point backbone: "point" is the neutral token covering both mixture modes;
# "mode_a"/"mode_b" name the components.
POINT_VOCAB = ("<null>", "point", "mode_a", "mode_b")

# Image backbone: "shape" is the neutral token; "disc"/"square" are the two
# bright-blob classes rendered by the synthetic dataset.
IMAGE_VOCAB = ("<null>", "shape", "disc", "square")

_TIME_FREQS = (1.0, 2.0, 4.0, 8.0)


def time_features(t, T: int, batch: int) -> torch.Tensor:
    """Fixed Fourier features of t/T, shape (batch, 9)."""
    if not isinstance(t, torch.Tensor):
        t = torch.tensor(float(t), dtype=torch.float64)
    tt = (t.to(torch.float64) / T).reshape(-1)
    if tt.numel() == 1:
        tt = tt.expand(batch)
    feats = [tt]
    for f in _TIME_FREQS:
        feats.append(torch.sin(math.pi * f * tt))
        feats.append(torch.cos(math.pi * f * tt))
    return torch.stack(feats, dim=1)


def _cond_ids(cond, batch: int) -> torch.Tensor:
    if not isinstance(cond, torch.Tensor):
        cond = torch.tensor(int(cond))
    cond = cond.reshape(-1).to(torch.long)
    if cond.numel() == 1:
        cond = cond.expand(batch)
    return cond


class _DenoiserBase(nn.Module):
    """Shared token plumbing for the trainable backbones."""

    vocab: tuple[str, ...]
    latent_shape: tuple[int, ...]
    T: int

    def token_id(self, token: str) -> int:
        try:
            return self.vocab.index(token)
        except ValueError:
            raise ValueError(f"unknown token {token!r}; vocabulary is {self.vocab}") from None

    def predict(self, z: torch.Tensor, cond, t) -> torch.Tensor:
        """Noise prediction; alias for the module call so autograd through z works."""
        return self(z, cond, t)


class PointDenoiser(_DenoiserBase):
    """MLP noise predictor for 2-D point diffusion."""

    backbone = "point2d"

    def __init__(self, T: int, vocab: tuple[str, ...] = POINT_VOCAB, emb_dim: int = 16, hidden: int = 96):
        super().__init__()
        self.T = T
        self.vocab = tuple(vocab)
        self.latent_shape = (2,)
        self.emb_dim = emb_dim
        self.hidden = hidden
        t_dim = 1 + 2 * len(_TIME_FREQS)
        self.embed = nn.Embedding(len(self.vocab), emb_dim)
        self.fc_in = nn.Linear(2 + emb_dim + t_dim, hidden)
        self.fc_hidden = nn.Linear(hidden, hidden)
        self.fc_out = nn.Linear(hidden, 2)
        self.act = nn.SiLU()
        self.double()

    def forward(self, z, cond, t):
        b = z.shape[0]
        e = self.embed(_cond_ids(cond, b))
        tf = time_features(t, self.T, b)
        h = torch.cat([z, e, tf], dim=1)
        h = self.act(self.fc_in(h))
        h = self.act(self.fc_hidden(h))
        return self.fc_out(h)

    def arch_config(self) -> dict:
        return {
            "T": self.T,
            "vocab": list(self.vocab),
            "emb_dim": self.emb_dim,
            "hidden": self.hidden,
        }


class ImageDenoiser(_DenoiserBase):
    """Convolutional noise predictor for 1 x size x size latents.

    Condition and time enter as per-channel biases after each hidden conv
    (FiLM-style, additive only).
    """

    backbone = "image16"

    def __init__(self, T: int, vocab: tuple[str, ...] = IMAGE_VOCAB, size: int = 16, channels: int = 32, emb_dim: int = 16):
        super().__init__()
        self.T = T
        self.vocab = tuple(vocab)
        self.size = size
        self.channels = channels
        self.emb_dim = emb_dim
        self.latent_shape = (1, size, size)
        t_dim = 1 + 2 * len(_TIME_FREQS)
        self.embed = nn.Embedding(len(self.vocab), emb_dim)
        self.cond_proj = nn.Linear(emb_dim, channels)
        self.time_proj = nn.Linear(t_dim, channels)
        self.conv_in = nn.Conv2d(1, channels, 3, padding=1)
        self.conv_mid1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv_mid2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv_out = nn.Conv2d(channels, 1, 3, padding=1)
        self.act = nn.SiLU()
        self.double()

    def forward(self, z, cond, t):
        b = z.shape[0]
        bias = (self.cond_proj(self.embed(_cond_ids(cond, b))) + self.time_proj(time_features(t, self.T, b)))
        bias = bias[:, :, None, None]
        h = self.act(self.conv_in(z) + bias)
        h = self.act(self.conv_mid1(h) + bias)
        h = self.act(self.conv_mid2(h) + bias)
        return self.conv_out(h)

    def arch_config(self) -> dict:
        return {
            "T": self.T,
            "vocab": list(self.vocab),
            "size": self.size,
            "channels": self.channels,
            "emb_dim": self.emb_dim,
        }


class AnalyticGaussianDenoiser:
    """Exact noise predictor for z_0 ~ N(mean, std^2 I); ignores conditioning.

    The posterior mean of z_0 given z_t is available in closed form, so the
    optimal prediction is

        eps*(z_t, t) = (z_t - sqrt(ab) E[z_0 | z_t]) / sqrt(1 - ab),
        E[z_0 | z_t] = mean + sqrt(ab) std^2 / (ab std^2 + 1 - ab)
                       * (z_t - sqrt(ab) mean).

    For the unit Gaussian this reduces to eps* = sqrt(1 - ab) z_t.
    """

    def __init__(self, sched: NoiseSchedule, mean, std: float = 1.0):
        self.sched = sched
        self.mean = torch.as_tensor(mean, dtype=torch.float64)
        self.std = float(std)
        self.latent_shape = tuple(self.mean.shape)
        self.T = sched.T

    def predict(self, z, cond, t):
        ab = self.sched.abar(t)
        var = self.std**2
        gain = torch.sqrt(ab) * var / (ab * var + 1.0 - ab)
        x0_post = self.mean + gain * (z - torch.sqrt(ab) * self.mean)
        return (z - torch.sqrt(ab) * x0_post) / torch.sqrt(1.0 - ab)

    def __call__(self, z, cond, t):
        return self.predict(z, cond, t)


class IdentityDecoder(nn.Module):
    """Latent space is pixel space (point backbone)."""

    factor = 1

    def forward(self, z):
        return z


class PixelReplicationDecoder(nn.Module):
    """Nearest-neighbour upsampling by an integer factor.

    Deterministic and differentiable: each latent cell maps to a factor x
    factor pixel block, and gradients sum back over the block.
    """

    def __init__(self, factor: int = 2):
        super().__init__()
        if factor < 1:
            raise ValueError(f"factor must be >= 1, got {factor}")
        self.factor = factor

    def forward(self, z):
        if self.factor == 1:
            return z
        return z.repeat_interleave(self.factor, dim=-2).repeat_interleave(self.factor, dim=-1)
