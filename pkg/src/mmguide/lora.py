"""Low-rank adapters and directional (slider-style) training.

An adapter attaches rank-r factor pairs (A: d x r, B: r x k) to named linear
layers of a frozen denoiser; the adapted layer computes

    y = W x + scale * (x A) B.

B starts at zero so a fresh adapter is an exact no-op.  Directional training
regresses the adapted model's prediction at the neutral token onto the frozen
base shifted along a positive-minus-negative prompt direction:

    target = eps(z_t, p, t) + v_train * [eps(z_t, p+, t) - eps(z_t, p-, t)]

with L2 loss, touching only adapter parameters.  At inference the learned
residual is merged into the noise prediction at a caller-chosen scale v.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, replace

import torch
from torch import nn

from .checkpoint import FORMAT, config_hash, model_param_checksum
from .errors import TrainingDivergedError
from .schedules import NoiseSchedule
from .synthetic import ToyDataset


@dataclass(frozen=True)
class PromptTriple:
    """Neutral token plus positive/negative direction token sets."""

    neutral: str
    positives: tuple[str, ...]
    negatives: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "positives", tuple(self.positives))
        object.__setattr__(self, "negatives", tuple(self.negatives))
        if not self.positives or not self.negatives:
            raise ValueError("positives and negatives must be non-empty")

    def resolve(self, model) -> tuple[int, tuple[int, ...], tuple[int, ...]]:
        return (
            model.token_id(self.neutral),
            tuple(model.token_id(p) for p in self.positives),
            tuple(model.token_id(n) for n in self.negatives),
        )


@dataclass(frozen=True)
class LoRAAdapter:
    """Rank-r factor pairs per target layer, with a merge scale.

    Immutable view: :func:`set_scale` returns a derived adapter sharing the
    same factor parameters.
    """

    rank: int
    targets: tuple[str, ...]
    pairs: dict[str, tuple[nn.Parameter, nn.Parameter]]
    scale: float
    base_hash: str

    @property
    def param_count(self) -> int:
        return sum(a.numel() + b.numel() for a, b in self.pairs.values())

    def parameters(self) -> list[nn.Parameter]:
        out = []
        for a, b in self.pairs.values():
            out.extend([a, b])
        return out


def linear_targets(model: nn.Module) -> tuple[str, ...]:
    """Names of all linear submodules (the default adapter attachment set)."""
    return tuple(name for name, m in model.named_modules() if isinstance(m, nn.Linear))


def init_adapter(model: nn.Module, rank: int = 4, targets=None, seed: int = 0, scale: float = 1.0) -> LoRAAdapter:
    """Fresh adapter: B zero (exact no-op), A ~ U(-1/sqrt(d), 1/sqrt(d))."""
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    if targets is None:
        targets = linear_targets(model)
    modules = dict(model.named_modules())
    gen = torch.Generator().manual_seed(seed)
    pairs = {}
    for name in targets:
        if name not in modules or not isinstance(modules[name], nn.Linear):
            raise ValueError(f"target {name!r} is not a linear submodule of the model")
        lin = modules[name]
        d, k = lin.in_features, lin.out_features
        bound = 1.0 / d**0.5
        A = nn.Parameter(torch.empty(d, rank, dtype=torch.float64).uniform_(-bound, bound, generator=gen))
        B = nn.Parameter(torch.zeros(rank, k, dtype=torch.float64))
        pairs[name] = (A, B)
    return LoRAAdapter(rank=rank, targets=tuple(targets), pairs=pairs, scale=scale, base_hash=model_param_checksum(model))


def set_scale(adapter: LoRAAdapter, v: float) -> LoRAAdapter:
    """Derived adapter view with a new scale; factors are shared, no retraining."""
    return replace(adapter, scale=float(v))


class LoRALinear(nn.Module):
    """A frozen linear layer plus the adapter's low-rank residual."""

    def __init__(self, base: nn.Linear, A: nn.Parameter, B: nn.Parameter, adapter: LoRAAdapter):
        super().__init__()
        self.base = base
        self.A = A
        self.B = B
        self._adapter = adapter

    def forward(self, x):
        out = self.base(x)
        s = self._adapter.scale
        if s != 0.0:
            out = out + s * ((x @ self.A) @ self.B)
        return out


def apply_adapter(model: nn.Module, adapter: LoRAAdapter) -> nn.Module:
    """Adapted copy of the model; the original is untouched and stays frozen.

    With adapter scale 0 the copy's forward runs the exact base computation.
    """
    adapted = copy.deepcopy(model)
    for p in adapted.parameters():
        p.requires_grad_(False)
    for name in adapter.targets:
        parent, attr = _parent_of(adapted, name)
        A, B = adapter.pairs[name]
        setattr(parent, attr, LoRALinear(getattr(parent, attr), A, B, adapter))
    return adapted


def _parent_of(model: nn.Module, dotted: str):
    parts = dotted.split(".")
    parent = model
    for p in parts[:-1]:
        parent = getattr(parent, p)
    return parent, parts[-1]


def merge_textual_eps(eps_base: torch.Tensor, eps_direction: torch.Tensor, v: float) -> torch.Tensor:
    """eps_base + v * direction; v=0 returns eps_base bit-exactly."""
    if eps_base.shape != eps_direction.shape:
        raise ValueError(f"shape mismatch: {tuple(eps_base.shape)} vs {tuple(eps_direction.shape)}")
    if v == 0.0:
        return eps_base
    return eps_base + v * eps_direction


def slider_target(model, z_t, tb, neutral_id: int, pos_id: int, neg_id: int, v_train: float) -> torch.Tensor:
    """Frozen-base regression target for one batch."""
    with torch.no_grad():
        base = model.predict(z_t, neutral_id, tb)
        if v_train == 0.0:
            return base
        direction = model.predict(z_t, pos_id, tb) - model.predict(z_t, neg_id, tb)
        return base + v_train * direction


@dataclass
class SliderTrainResult:
    adapter: LoRAAdapter
    step_losses: list[float]


def train_slider(
    model: nn.Module,
    adapter: LoRAAdapter,
    triples: list[PromptTriple],
    dataset: ToyDataset,
    sched: NoiseSchedule,
    v_train: float = 1.0,
    steps: int = 1000,
    lr: float = 1e-4,
    seed: int = 0,
    batch_size: int = 1,
) -> SliderTrainResult:
    """Directional adapter training; only adapter parameters receive updates.

    Per step one triple and one positive/negative token pair are drawn, a
    dataset sample is forward-noised to a uniform timestep, and the adapted
    prediction at the neutral token is regressed onto the shifted base
    target with L2 loss (AdamW).
    """
    if not triples:
        raise ValueError("triples must be non-empty")
    if adapter.scale == 0.0:
        raise ValueError("cannot train an adapter at scale 0 (no gradient path)")
    resolved = [t.resolve(model) for t in triples]
    adapted = apply_adapter(model, adapter)
    opt = torch.optim.AdamW(adapter.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    z0_all = dataset.z0.to(torch.float64)
    n = len(dataset)
    expand = (-1,) + (1,) * (z0_all.ndim - 1)
    losses = []
    for step in range(steps):
        neutral_id, pos_ids, neg_ids = resolved[int(torch.randint(0, len(resolved), (1,), generator=gen))]
        pos = pos_ids[int(torch.randint(0, len(pos_ids), (1,), generator=gen))]
        neg = neg_ids[int(torch.randint(0, len(neg_ids), (1,), generator=gen))]
        idx = torch.randint(0, n, (batch_size,), generator=gen)
        tb = torch.randint(1, sched.T + 1, (batch_size,), generator=gen)
        eps = torch.randn(z0_all[idx].shape, generator=gen, dtype=torch.float64)
        ab = sched.alpha_bar[tb].view(expand)
        z_t = torch.sqrt(ab) * z0_all[idx] + torch.sqrt(1.0 - ab) * eps
        target = slider_target(model, z_t, tb, neutral_id, pos, neg, v_train)
        pred = adapted(z_t, neutral_id, tb)
        loss = torch.mean((pred - target) ** 2)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"non-finite slider loss at step {step + 1}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return SliderTrainResult(adapter=adapter, step_losses=losses)


def save_adapter(path, adapter: LoRAAdapter, seed: int) -> str:
    meta = {"rank": adapter.rank, "targets": list(adapter.targets), "scale": adapter.scale,
            "base_hash": adapter.base_hash, "seed": seed}
    h = config_hash(meta)
    torch.save(
        {
            "format": FORMAT,
            "kind": "lora-adapter",
            **meta,
            "config_hash": h,
            "pairs": {name: {"A": a.detach(), "B": b.detach()} for name, (a, b) in adapter.pairs.items()},
        },
        path,
    )
    return h


def load_adapter(path, model: nn.Module) -> LoRAAdapter:
    ckpt = torch.load(path, weights_only=True)
    if ckpt.get("format") != FORMAT or ckpt.get("kind") != "lora-adapter":
        raise ValueError(f"{path}: not an adapter checkpoint")
    if ckpt["base_hash"] != model_param_checksum(model):
        raise ValueError(f"{path}: adapter was trained against a different base model")
    pairs = {
        name: (nn.Parameter(t["A"].clone()), nn.Parameter(t["B"].clone()))
        for name, t in ckpt["pairs"].items()
    }
    return LoRAAdapter(
        rank=ckpt["rank"],
        targets=tuple(ckpt["targets"]),
        pairs=pairs,
        scale=ckpt["scale"],
        base_hash=ckpt["base_hash"],
    )
