"""Guided sampling: per-step classifier-free combination, directional
textual merge, masked discriminator-gradient steering, and the timestep
window schedule.

The noise prediction fed to each DDIM step is composed in a fixed order:

    base -> cfg -> textual merge -> masked visual gradient add

The visual term is w * grad_z of the MSE between an all-ones target and the
discriminator scores of the decoded clean-sample estimate; the gradient flows
through the denoiser, the recovery formula, and the decoder.  It is gated by
the cumulative mask (resampled to latent resolution) before being added, and
is only computed inside the configured timestep window, so steps outside the
window contribute exactly zero guidance by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .diffusion import SamplerConfig, cfg_combine, ddim_step, ddim_timesteps, predict_x0
from .errors import GuidanceDivergedError
from .lora import LoRAAdapter, apply_adapter, merge_textual_eps
from .mask import CumulativeMask, RegionDetector, downsample_mask, init_mask, update_mask
from .models import NULL_ID, IdentityDecoder
from .schedules import NoiseSchedule

START_STEP_MODES = ("countdown", "countup")
TEXTUAL_MODES = ("residual", "literal")


@dataclass(frozen=True)
class GuidanceConfig:
    """All steering knobs.

    w scales the visual (discriminator-gradient) term, v the textual merge,
    tau the mask confidence threshold.  Guidance is active only when the
    current t lies in [window_t_low, window_t_high] AND the start-step gate
    holds.  start_step_mode picks how guidance_start_step counts: "countdown"
    numbers steps with the descending timestep (step 65 of 100 is t=650 on a
    1000-step schedule, making the two window conventions coincide);
    "countup" counts executed steps from 1.
    """

    w: float = 2.0
    v: float = 0.5
    tau: float = 0.4
    window_t_high: int = 650
    window_t_low: int = 150
    cfg_scale: float = 3.0
    guidance_start_step: int = 65
    start_step_mode: str = "countdown"
    textual_mode: str = "residual"

    def validate(self, T: int | None = None) -> list[str]:
        errs = []
        if self.w < 0:
            errs.append(f"guidance.w: must be >= 0, got {self.w}")
        if not 0.0 <= self.tau <= 1.0:
            errs.append(f"guidance.tau: must be in [0,1], got {self.tau}")
        if self.window_t_low >= self.window_t_high:
            errs.append(
                f"guidance.window_t_low: must be < window_t_high, got {self.window_t_low} >= {self.window_t_high}"
            )
        if T is not None and self.window_t_high > T:
            errs.append(f"guidance.window_t_high: must be <= T={T}, got {self.window_t_high}")
        if self.guidance_start_step < 1:
            errs.append(f"guidance.guidance_start_step: must be >= 1, got {self.guidance_start_step}")
        if self.start_step_mode not in START_STEP_MODES:
            errs.append(f"guidance.start_step_mode: expected one of {START_STEP_MODES}, got {self.start_step_mode!r}")
        if self.textual_mode not in TEXTUAL_MODES:
            errs.append(f"guidance.textual_mode: expected one of {TEXTUAL_MODES}, got {self.textual_mode!r}")
        return errs


def guidance_target(score_dim: int) -> torch.Tensor:
    """The all-ones target vector matched against discriminator scores."""
    return torch.ones(score_dim, dtype=torch.float64)


def in_window(t: int, cfg: GuidanceConfig) -> bool:
    """True iff t lies inside the guidance timestep window (inclusive)."""
    return cfg.window_t_low <= t <= cfg.window_t_high


def start_gate(step_index: int, num_steps: int, cfg: GuidanceConfig) -> bool:
    """Start-step gate for the 1-based executed step index."""
    if cfg.start_step_mode == "countdown":
        return num_steps - step_index + 1 <= cfg.guidance_start_step
    return step_index >= cfg.guidance_start_step


def apply_mask(grad: torch.Tensor, mask) -> torch.Tensor:
    """Zero the gradient outside the mask (elementwise product).

    mask may be a CumulativeMask or a bare binary grid, already at the
    gradient's spatial resolution.  The point backbone carries no spatial
    structure; its effective mask is all-ones and this function is not
    called.
    """
    grid = mask.M if isinstance(mask, CumulativeMask) else np.asarray(mask)
    if grad.shape[-2:] != grid.shape:
        raise ValueError(f"mask shape {grid.shape} does not match gradient grid {tuple(grad.shape[-2:])}")
    return grad * torch.from_numpy(grid.astype(np.float64))


def visual_gradient(
    z: torch.Tensor,
    t: int,
    cond_id: int,
    model,
    f_D,
    decoder,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """grad_z of MSE(ones, f_D(decode(x0_hat), c)) through the full chain.

    The clean-sample estimate is recovered from the conditional prediction,
    so the gradient also flows through the denoiser.  Per-sample losses are
    summed over the batch, which leaves each sample's gradient independent.
    """
    zg = z.detach().requires_grad_(True)
    eps = model.predict(zg, cond_id, t)
    x0 = predict_x0(zg, eps, t, sched)
    scores = f_D.score(decoder(x0), cond_id)
    y = torch.ones_like(scores)
    loss = torch.mean((y - scores) ** 2, dim=1).sum()
    return torch.autograd.grad(loss, zg)[0]


def visual_guidance_eps(
    z: torch.Tensor,
    t: int,
    cond_id: int,
    model,
    f_D,
    decoder,
    sched: NoiseSchedule,
    cfg: GuidanceConfig,
    latent_mask=None,
) -> torch.Tensor:
    """Conditional prediction plus the masked, weighted guidance gradient.

    w=0 returns the base prediction bit-exactly (the gradient is never
    computed).
    """
    with torch.no_grad():
        base = model.predict(z, cond_id, t)
    if cfg.w == 0.0:
        return base
    grad = visual_gradient(z, t, cond_id, model, f_D, decoder, sched)
    if latent_mask is not None:
        grad = apply_mask(grad, latent_mask)
    term = cfg.w * grad
    if not torch.isfinite(term).all():
        raise GuidanceDivergedError(step=0, t=t)
    return base + term


@dataclass
class StepRecord:
    """Per-step trace entry; norms are exactly 0.0 when guidance was inactive."""

    step: int
    t: int
    t_prev: int
    active: bool
    mask_area: int
    latent_mask_area: int
    visual_grad_norm: float
    textual_norm: float
    outside_mask_max: float
    detector_score: float | None
    detector_failed: bool
    guidance_term: torch.Tensor | None = None
    latent_mask: np.ndarray | None = None

    def scalar_dict(self) -> dict:
        return {
            "step": self.step,
            "t": self.t,
            "t_prev": self.t_prev,
            "active": self.active,
            "mask_area": self.mask_area,
            "latent_mask_area": self.latent_mask_area,
            "visual_grad_norm": self.visual_grad_norm,
            "textual_norm": self.textual_norm,
            "outside_mask_max": self.outside_mask_max,
            "detector_score": self.detector_score,
            "detector_failed": self.detector_failed,
        }


@dataclass
class GuidedResult:
    latent: torch.Tensor
    image: torch.Tensor
    mask: CumulativeMask | None
    trace: list[StepRecord] = field(default_factory=list)


def sample_guided(
    prompt_id: int,
    model,
    sched: NoiseSchedule,
    guidance: GuidanceConfig,
    sampler: SamplerConfig,
    discriminator=None,
    adapter: LoRAAdapter | None = None,
    detector: RegionDetector | None = None,
    decoder=None,
    batch: int = 1,
    null_id: int = NULL_ID,
    keep_tensors: bool = True,
) -> GuidedResult:
    """Run one guided DDIM trajectory.

    Every step: base + cfg prediction; one mask update from the detector on
    the decoded clean-sample estimate; then, inside the window, the textual
    merge followed by the masked visual gradient.  With w=0 and v=0 the
    latent arithmetic is identical to :func:`mmguide.diffusion.sample_cfg`.

    Spatial backbones (3-D latents) run with batch=1 because the mask is
    per-sample state; the point backbone supports arbitrary batches.
    """
    decoder = decoder if decoder is not None else IdentityDecoder()
    spatial = len(model.latent_shape) == 3
    if spatial and batch != 1:
        raise ValueError("spatial backbones sample one trajectory at a time (per-sample mask state)")

    gen = torch.Generator().manual_seed(sampler.seed)
    z = torch.randn((batch, *model.latent_shape), generator=gen, dtype=torch.float64)

    mask = None
    latent_hw = None
    if spatial:
        with torch.no_grad():
            px = decoder(z)
        mask = init_mask(px.shape[-2], px.shape[-1])
        latent_hw = (model.latent_shape[-2], model.latent_shape[-1])

    adapted = None
    if adapter is not None and guidance.v != 0.0:
        adapted = apply_adapter(model, adapter)

    traj = ddim_timesteps(sched.T, sampler.num_steps)
    trace: list[StepRecord] = []
    for i, (t, t_prev) in enumerate(zip(traj[:-1], traj[1:]), start=1):
        with torch.no_grad():
            eps_u = model.predict(z, null_id, t)
            eps_c = model.predict(z, prompt_id, t)
            eps = cfg_combine(eps_u, eps_c, guidance.cfg_scale)

        det_score: float | None = None
        det_failed = False
        if spatial and detector is not None:
            with torch.no_grad():
                x0_det = predict_x0(z, eps, t, sched)
                px = decoder(x0_det)
            try:
                det = detector.detect(px[0])
                det_score = det.S
                mask = update_mask(mask, det, guidance.tau)
            except Exception:
                det_failed = True  # non-fatal: the mask simply does not grow

        active = in_window(t, guidance) and start_gate(i, sampler.num_steps, guidance)

        textual_norm = 0.0
        if active and adapted is not None:
            with torch.no_grad():
                eps_adapted = adapted.predict(z, prompt_id, t)
                direction = eps_adapted - eps_c if guidance.textual_mode == "residual" else eps_adapted
            eps = merge_textual_eps(eps, direction, guidance.v)
            textual_norm = float(torch.linalg.vector_norm(guidance.v * direction))

        visual_norm = 0.0
        outside_max = 0.0
        term = None
        latent_mask = None
        if active and discriminator is not None and guidance.w != 0.0:
            grad = visual_gradient(z, t, prompt_id, model, discriminator, decoder, sched)
            if spatial:
                latent_mask = downsample_mask(mask, *latent_hw)
                grad = apply_mask(grad, latent_mask)
            term = guidance.w * grad
            if not torch.isfinite(term).all():
                raise GuidanceDivergedError(step=i, t=t)
            visual_norm = float(torch.linalg.vector_norm(term))
            if spatial:
                outside = term[..., torch.from_numpy(latent_mask) == 0]
                outside_max = float(outside.abs().max()) if outside.numel() else 0.0
            eps = eps + term

        with torch.no_grad():
            z = ddim_step(z, eps, t, t_prev, sched, sampler.eta, generator=gen)

        trace.append(
            StepRecord(
                step=i,
                t=t,
                t_prev=t_prev,
                active=active,
                mask_area=mask.area if mask is not None else 0,
                latent_mask_area=int(latent_mask.sum()) if latent_mask is not None else 0,
                visual_grad_norm=visual_norm,
                textual_norm=textual_norm,
                outside_mask_max=outside_max,
                detector_score=det_score,
                detector_failed=det_failed,
                guidance_term=term.detach() if (keep_tensors and term is not None) else None,
                latent_mask=latent_mask if keep_tensors else None,
            )
        )

    with torch.no_grad():
        image = decoder(z)
    return GuidedResult(latent=z, image=image, mask=mask, trace=trace)


def write_trace(path, trace: list[StepRecord], sample_index: int | None = None, append: bool = False) -> None:
    """Persist the scalar trace as one JSON object per line."""
    mode = "a" if append else "w"
    with open(Path(path), mode, encoding="utf-8") as fh:
        for rec in trace:
            d = rec.scalar_dict()
            if sample_index is not None:
                d = {"sample": sample_index, **d}
            fh.write(json.dumps(d, sort_keys=True) + "\n")
