"""Noise schedules for the discrete-time diffusion backbones.

A schedule is the sequence of cumulative signal fractions

    alpha_bar[t] = prod_{i<=t} (1 - beta_i),   alpha_bar[0] = 1,

so the forward marginal is z_t = sqrt(alpha_bar[t]) * z_0
+ sqrt(1 - alpha_bar[t]) * eps.  Everything downstream (noising, clean-sample
recovery, DDIM stepping) indexes into this table; t runs over [0, T].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

# Linear schedule endpoints (beta_1 .. beta_T linearly spaced).
LINEAR_BETA_START = 1e-4
LINEAR_BETA_END = 0.02

# Cosine schedule offset and per-step beta cap.  The cap is 0.99 (not the
# conventional 0.999) so that alpha_bar[T] stays above the 1e-8 floor used by
# clean-sample recovery even at T=1000.
COSINE_S = 0.008
COSINE_MAX_BETA = 0.99

SCHEDULE_KINDS = ("linear-beta", "cosine")


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative-product table alpha_bar of length T+1.

    Invariants: alpha_bar[0] == 1 exactly, strictly decreasing, all values
    in (0, 1].  Validated at construction.
    """

    T: int
    alpha_bar: torch.Tensor
    kind: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        ab = torch.as_tensor(self.alpha_bar, dtype=torch.float64)
        object.__setattr__(self, "alpha_bar", ab)
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if ab.shape != (self.T + 1,):
            raise ValueError(f"alpha_bar must have length T+1={self.T + 1}, got {tuple(ab.shape)}")
        if ab[0].item() != 1.0:
            raise ValueError("alpha_bar[0] must equal 1 exactly")
        if not torch.all(ab[1:] < ab[:-1]):
            raise ValueError("alpha_bar must be strictly decreasing")
        if not (torch.all(ab > 0) and torch.all(ab <= 1)):
            raise ValueError("alpha_bar values must lie in (0, 1]")

    def abar(self, t: int | torch.Tensor) -> torch.Tensor:
        """alpha_bar at step t (scalar or integer tensor)."""
        if isinstance(t, torch.Tensor):
            return self.alpha_bar[t]
        if not 0 <= t <= self.T:
            raise ValueError(f"t={t} outside schedule bounds [0, {self.T}]")
        return self.alpha_bar[t]


def make_schedule(T: int, kind: str = "linear-beta", **overrides) -> NoiseSchedule:
    """Build a schedule of the given kind.

    linear-beta: beta_t linearly spaced over [1e-4, 0.02] (for T=1 the single
    beta is the start value).  cosine: squared-cosine cumulative profile with
    offset s=0.008 and per-step beta capped at 0.99.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if kind == "linear-beta":
        beta_start = overrides.pop("beta_start", LINEAR_BETA_START)
        beta_end = overrides.pop("beta_end", LINEAR_BETA_END)
        betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
        alpha_bar = torch.cumprod(1.0 - betas, dim=0)
        params = {"beta_start": beta_start, "beta_end": beta_end}
    elif kind == "cosine":
        s = overrides.pop("s", COSINE_S)
        max_beta = overrides.pop("max_beta", COSINE_MAX_BETA)

        def f(t):
            return math.cos((t / T + s) / (1 + s) * math.pi / 2) ** 2

        vals = []
        abar = 1.0
        for t in range(1, T + 1):
            beta = min(1.0 - f(t) / f(t - 1), max_beta)
            abar *= 1.0 - beta
            vals.append(abar)
        alpha_bar = torch.tensor(vals, dtype=torch.float64)
        params = {"s": s, "max_beta": max_beta}
    else:
        raise ValueError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    if overrides:
        raise ValueError(f"unknown schedule overrides: {sorted(overrides)}")
    full = torch.cat([torch.ones(1, dtype=torch.float64), alpha_bar])
    return NoiseSchedule(T=T, alpha_bar=full, kind=kind, params=params)
