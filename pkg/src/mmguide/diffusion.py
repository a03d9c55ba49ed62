"""Core diffusion mechanics: forward noising, clean-sample recovery, DDIM
stepping, and classifier-free combination.

Conventions: all tensors are float64; t is an integer step in [0, T] indexing
a :class:`~mmguide.schedules.NoiseSchedule`; t=0 is clean data.

Key formulas:
    forward:   z_t = sqrt(ab_t) * z_0 + sqrt(1 - ab_t) * eps
    recovery:  x0_hat = (z_t - sqrt(1 - ab_t) * eps_hat) / sqrt(ab_t)
    DDIM:      z_s = sqrt(ab_s) * x0_hat + sqrt(1 - ab_s - sigma^2) * eps_hat
                     + sigma * xi,
               sigma = eta * sqrt((1 - ab_s)/(1 - ab_t)) * sqrt(1 - ab_t/ab_s)
    cfg:       eps = eps_u + scale * (eps_c - eps_u)
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import NumericalDegeneracyError
from .schedules import NoiseSchedule

# Below this alpha_bar, clean-sample recovery divides by ~0 and is refused.
ALPHA_BAR_FLOOR = 1e-8


@dataclass(frozen=True)
class LatentState:
    """A latent tensor together with its diffusion timestep."""

    z: torch.Tensor
    t: int

    def __post_init__(self):
        if not torch.isfinite(self.z).all():
            raise ValueError("latent contains non-finite values")
        if self.t < 0:
            raise ValueError(f"t must be >= 0, got {self.t}")


@dataclass(frozen=True)
class SamplerConfig:
    """Knobs for a DDIM sampling run.

    eta=0 makes every step deterministic; cfg_scale follows the usual
    classifier-free extrapolation (1 = conditional prediction only).
    """

    num_steps: int = 100
    eta: float = 0.0
    cfg_scale: float = 3.0
    seed: int = 0

    def validate(self, T: int) -> list[str]:
        errs = []
        if self.num_steps < 1:
            errs.append(f"sampler.num_steps: must be >= 1, got {self.num_steps}")
        elif self.num_steps > T:
            errs.append(f"sampler.num_steps: must be <= T={T}, got {self.num_steps}")
        if self.eta < 0:
            errs.append(f"sampler.eta: must be >= 0, got {self.eta}")
        return errs


def add_noise(z0: torch.Tensor, t: int, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Forward-noise a clean sample: z_t = sqrt(ab_t) z_0 + sqrt(1-ab_t) eps."""
    if z0.shape != eps.shape:
        raise ValueError(f"z0 shape {tuple(z0.shape)} != eps shape {tuple(eps.shape)}")
    ab = sched.abar(t)
    return torch.sqrt(ab) * z0 + torch.sqrt(1.0 - ab) * eps


def predict_x0(z_t: torch.Tensor, eps_hat: torch.Tensor, t: int, sched: NoiseSchedule) -> torch.Tensor:
    """Recover the clean-sample estimate by inverting the forward formula.

    Exact inverse of :func:`add_noise` when eps_hat is the true noise.
    Raises :class:`NumericalDegeneracyError` when alpha_bar[t] is below the
    1e-8 floor (division would blow up).
    """
    if z_t.shape != eps_hat.shape:
        raise ValueError(f"z_t shape {tuple(z_t.shape)} != eps_hat shape {tuple(eps_hat.shape)}")
    ab = sched.abar(t)
    if ab.item() < ALPHA_BAR_FLOOR:
        raise NumericalDegeneracyError(
            f"alpha_bar[{t}]={ab.item():.3e} below floor {ALPHA_BAR_FLOOR:.0e}"
        )
    return (z_t - torch.sqrt(1.0 - ab) * eps_hat) / torch.sqrt(ab)


def ddim_step(
    z_t: torch.Tensor,
    eps_hat: torch.Tensor,
    t: int,
    t_prev: int,
    sched: NoiseSchedule,
    eta: float = 0.0,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """One reverse step t -> t_prev through the clean-sample estimate.

    With eta=0 the step is a pure function of its inputs; with t_prev=0 the
    output equals the clean-sample estimate exactly (alpha_bar[0]=1).
    """
    if t_prev >= t:
        raise ValueError(f"t_prev={t_prev} must be < t={t}")
    x0_hat = predict_x0(z_t, eps_hat, t, sched)
    ab_t = sched.abar(t)
    ab_s = sched.abar(t_prev)
    if eta == 0.0:
        sigma2 = torch.zeros((), dtype=torch.float64)
    else:
        sigma2 = eta**2 * (1.0 - ab_s) / (1.0 - ab_t) * (1.0 - ab_t / ab_s)
    out = torch.sqrt(ab_s) * x0_hat + torch.sqrt(1.0 - ab_s - sigma2) * eps_hat
    if eta != 0.0 and sigma2.item() > 0.0:
        xi = torch.randn(z_t.shape, generator=generator, dtype=z_t.dtype)
        out = out + torch.sqrt(sigma2) * xi
    return out


def cfg_combine(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, scale: float) -> torch.Tensor:
    """Classifier-free extrapolation from the unconditional prediction.

    scale=0 and scale=1 return their respective inputs bit-exactly.
    """
    if eps_uncond.shape != eps_cond.shape:
        raise ValueError(
            f"shape mismatch: {tuple(eps_uncond.shape)} vs {tuple(eps_cond.shape)}"
        )
    if scale == 0.0:
        return eps_uncond
    if scale == 1.0:
        return eps_cond
    return eps_uncond + scale * (eps_cond - eps_uncond)


def ddim_timesteps(T: int, num_steps: int) -> list[int]:
    """Descending timestep trajectory [T, ..., 0] with num_steps+1 entries.

    Integer spacing t_i = (T*i)//num_steps guarantees strict monotonicity for
    num_steps <= T and exact endpoints.
    """
    if not 1 <= num_steps <= T:
        raise ValueError(f"num_steps must be in [1, T={T}], got {num_steps}")
    return [(T * i) // num_steps for i in range(num_steps, -1, -1)]


def sample_cfg(
    model,
    sched: NoiseSchedule,
    prompt_id: int,
    sampler: SamplerConfig,
    batch: int = 1,
    null_id: int = 0,
) -> torch.Tensor:
    """Plain DDIM sampling with classifier-free combination (no guidance).

    Draws z_T from the seed, then walks the deterministic (or eta-noised)
    trajectory down to t=0.  Returns the final latents, shape
    (batch, *model.latent_shape).
    """
    gen = torch.Generator().manual_seed(sampler.seed)
    z = torch.randn((batch, *model.latent_shape), generator=gen, dtype=torch.float64)
    traj = ddim_timesteps(sched.T, sampler.num_steps)
    with torch.no_grad():
        for t, t_prev in zip(traj[:-1], traj[1:]):
            eps_u = model.predict(z, null_id, t)
            eps_c = model.predict(z, prompt_id, t)
            eps = cfg_combine(eps_u, eps_c, sampler.cfg_scale)
            z = ddim_step(z, eps, t, t_prev, sched, sampler.eta, generator=gen)
    return z
