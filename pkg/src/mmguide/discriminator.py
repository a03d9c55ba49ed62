"""Conditional real/fake discriminators used for visual guidance.

Least-squares objective: the head emits a raw score vector (one score per
patch for images), trained with MSE against all-ones targets for real
examples and all-zeros for fake ones.  Scores stay differentiable with
respect to the input, which is what the guidance gradient needs; an optional
sigmoid on the head is available but off by default.

The image feature extractor is pluggable so an external pretrained encoder
can stand in for the bundled convolutional net.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import TrainingDivergedError
from .models import IMAGE_VOCAB, POINT_VOCAB
from .synthetic import DiscCorpus


class PointDiscriminator(nn.Module):
    """MLP scorer over 2-D points with token conditioning."""

    disc_kind = "point"

    def __init__(self, vocab: tuple[str, ...] = POINT_VOCAB, emb_dim: int = 16, hidden: int = 64, score_dim: int = 4, sigmoid_head: bool = False):
        super().__init__()
        self.vocab = tuple(vocab)
        self.emb_dim = emb_dim
        self.hidden = hidden
        self.score_dim = score_dim
        self.sigmoid_head = sigmoid_head
        self.embed = nn.Embedding(len(self.vocab), emb_dim)
        self.fc1 = nn.Linear(2, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.head = nn.Linear(hidden + emb_dim, score_dim)
        self.act = nn.SiLU()
        self.double()

    def token_id(self, token: str) -> int:
        return self.vocab.index(token)

    def score(self, x: torch.Tensor, cond) -> torch.Tensor:
        if x.ndim != 2 or x.shape[-1] != 2:
            raise ValueError(f"expected points of shape (B, 2), got {tuple(x.shape)}")
        b = x.shape[0]
        h = self.act(self.fc2(self.act(self.fc1(x))))
        e = self.embed(_ids(cond, b))
        out = self.head(torch.cat([h, e], dim=1))
        return torch.sigmoid(out) if self.sigmoid_head else out

    forward = score

    def arch_config(self) -> dict:
        return {
            "vocab": list(self.vocab),
            "emb_dim": self.emb_dim,
            "hidden": self.hidden,
            "score_dim": self.score_dim,
            "sigmoid_head": self.sigmoid_head,
        }


class ImageDiscriminator(nn.Module):
    """Convolutional patch scorer over single-channel pixel images.

    The default extractor downsamples by 8, so a 32x32 input yields a 4x4
    patch grid and a 16-dimensional score vector.  Conditioning enters as a
    per-channel bias on the patch features before the scoring head.
    """

    disc_kind = "image"

    def __init__(
        self,
        vocab: tuple[str, ...] = IMAGE_VOCAB,
        pixel_size: int = 32,
        channels: int = 32,
        emb_dim: int = 16,
        sigmoid_head: bool = False,
        feature_extractor: nn.Module | None = None,
    ):
        super().__init__()
        if pixel_size % 8 != 0:
            raise ValueError(f"pixel_size must be divisible by 8, got {pixel_size}")
        self.vocab = tuple(vocab)
        self.pixel_size = pixel_size
        self.channels = channels
        self.emb_dim = emb_dim
        self.sigmoid_head = sigmoid_head
        self._custom_extractor = feature_extractor is not None
        if feature_extractor is None:
            feature_extractor = nn.Sequential(
                nn.Conv2d(1, channels // 2, 3, stride=2, padding=1),
                nn.SiLU(),
                nn.Conv2d(channels // 2, channels, 3, stride=2, padding=1),
                nn.SiLU(),
                nn.Conv2d(channels, channels, 3, stride=2, padding=1),
                nn.SiLU(),
            )
        self.features = feature_extractor
        self.embed = nn.Embedding(len(self.vocab), emb_dim)
        self.cond_proj = nn.Linear(emb_dim, channels)
        self.head = nn.Conv2d(channels, 1, 1)
        self.score_dim = (pixel_size // 8) ** 2
        self.double()

    def token_id(self, token: str) -> int:
        return self.vocab.index(token)

    def score(self, image: torch.Tensor, cond) -> torch.Tensor:
        if image.ndim != 4 or image.shape[1] != 1 or image.shape[-2:] != (self.pixel_size, self.pixel_size):
            raise ValueError(
                f"expected images of shape (B, 1, {self.pixel_size}, {self.pixel_size}), got {tuple(image.shape)}"
            )
        b = image.shape[0]
        f = self.features(image)
        f = f + self.cond_proj(self.embed(_ids(cond, b)))[:, :, None, None]
        out = self.head(f).reshape(b, -1)
        return torch.sigmoid(out) if self.sigmoid_head else out

    forward = score

    def arch_config(self) -> dict:
        if self._custom_extractor:
            raise ValueError("discriminators with custom feature extractors cannot be checkpointed")
        return {
            "vocab": list(self.vocab),
            "pixel_size": self.pixel_size,
            "channels": self.channels,
            "emb_dim": self.emb_dim,
            "sigmoid_head": self.sigmoid_head,
        }


def _ids(cond, batch: int) -> torch.Tensor:
    if not isinstance(cond, torch.Tensor):
        cond = torch.tensor(int(cond))
    cond = cond.reshape(-1).to(torch.long)
    if cond.numel() == 1:
        cond = cond.expand(batch)
    return cond


@dataclass
class DiscTrainResult:
    model: nn.Module
    epoch_losses: list[float]
    holdout_accuracy: float


def discriminator_accuracy(model, inputs: torch.Tensor, cond_ids: torch.Tensor, labels: torch.Tensor) -> float:
    """Fraction correctly classified when the mean score is thresholded at 0.5."""
    with torch.no_grad():
        pred = model.score(inputs, cond_ids).mean(dim=1) > 0.5
    return float((pred == labels).to(torch.float64).mean())


def _augment(x: torch.Tensor) -> torch.Tensor:
    if x.ndim == 4:  # images: random horizontal flip + light pixel noise
        flip = torch.rand(x.shape[0]) < 0.5
        x = torch.where(flip[:, None, None, None], x.flip(-1), x)
        return x + 0.01 * torch.randn(x.shape, dtype=x.dtype)
    return x + 0.02 * torch.randn(x.shape, dtype=x.dtype)  # points: jitter


def train_discriminator(
    corpus: DiscCorpus,
    epochs: int = 120,
    batch: int = 64,
    augment: bool = True,
    seed: int = 0,
    lr: float = 1e-3,
    holdout_fraction: float = 0.2,
    model: nn.Module | None = None,
) -> DiscTrainResult:
    """MSE training on {0,1}-vector targets with a stratified holdout split.

    Augmentation (flips/jitter) applies at training time only; scoring never
    augments.  Deterministic given seed.
    """
    labels = corpus.labels.to(torch.bool)
    if labels.all() or not labels.any():
        raise ValueError("corpus must contain both real and fake examples")
    x_all = corpus.inputs.to(torch.float64)
    cond_all = corpus.cond_ids.to(torch.long)

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if model is None:
            if x_all.ndim == 2:
                model = PointDiscriminator()
            else:
                model = ImageDiscriminator(pixel_size=x_all.shape[-1])
        train_idx, hold_idx = _stratified_split(labels, holdout_fraction)
        opt = torch.optim.Adam(model.parameters(), lr=lr)
        losses = []
        n = len(train_idx)
        for _ in range(epochs):
            perm = train_idx[torch.randperm(n)]
            total, count = 0.0, 0
            for start in range(0, n, batch):
                idx = perm[start : start + batch]
                x = x_all[idx]
                if augment:
                    x = _augment(x)
                s = model.score(x, cond_all[idx])
                target = labels[idx].to(torch.float64)[:, None].expand_as(s)
                loss = torch.mean((s - target) ** 2)
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(f"non-finite discriminator loss at epoch {len(losses) + 1}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
                count += len(idx)
            losses.append(total / count)
    acc = discriminator_accuracy(model, x_all[hold_idx], cond_all[hold_idx], labels[hold_idx])
    return DiscTrainResult(model=model, epoch_losses=losses, holdout_accuracy=acc)


def _stratified_split(labels: torch.Tensor, holdout_fraction: float):
    """Per-class split so both classes appear on each side (seeded by caller)."""
    train_parts, hold_parts = [], []
    for cls in (True, False):
        idx = torch.nonzero(labels == cls, as_tuple=True)[0]
        idx = idx[torch.randperm(len(idx))]
        k = max(1, int(round(len(idx) * holdout_fraction)))
        hold_parts.append(idx[:k])
        train_parts.append(idx[k:])
    return torch.cat(train_parts), torch.cat(hold_parts)
