"""Checkpoint containers for trained components.

Every checkpoint records the seed it was trained with and a hash of its
defining configuration, so a run directory can name exactly which artifacts
produced it.  Reload is bit-exact: state tensors round-trip unchanged.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import torch

from .models import ImageDenoiser, PointDenoiser
from .schedules import NoiseSchedule, make_schedule

FORMAT = "mmguide-checkpoint/v1"

_DENOISERS = {"point2d": PointDenoiser, "image16": ImageDenoiser}


def config_hash(obj) -> str:
    """sha256 over the canonical JSON form of a config-like object."""
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def model_param_checksum(model) -> str:
    """sha256 over all parameter and buffer bytes, in sorted name order."""
    h = hashlib.sha256()
    state = model.state_dict()
    for name in sorted(state):
        h.update(name.encode())
        h.update(state[name].detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _schedule_payload(sched: NoiseSchedule) -> dict:
    if sched.kind == "custom":
        raise ValueError("only named schedule kinds can be checkpointed")
    return {"T": sched.T, "kind": sched.kind, "params": dict(sched.params)}


def rebuild_schedule(payload: dict) -> NoiseSchedule:
    return make_schedule(payload["T"], payload["kind"], **payload["params"])


def save_denoiser(path, model, sched: NoiseSchedule, seed: int) -> str:
    """Write a denoiser checkpoint; returns its config hash."""
    meta = {
        "backbone": model.backbone,
        "arch": model.arch_config(),
        "schedule": _schedule_payload(sched),
        "seed": seed,
    }
    h = config_hash(meta)
    torch.save(
        {"format": FORMAT, "kind": "denoiser", **meta, "config_hash": h, "state": model.state_dict()},
        path,
    )
    return h


def load_denoiser(path):
    """Rebuild (model, schedule) from a denoiser checkpoint."""
    ckpt = _load(path, "denoiser")
    arch = dict(ckpt["arch"])
    arch["vocab"] = tuple(arch["vocab"])
    model = _DENOISERS[ckpt["backbone"]](**arch)
    model.load_state_dict(ckpt["state"])
    model.eval()
    return model, rebuild_schedule(ckpt["schedule"])


def save_discriminator(path, model, seed: int) -> str:
    meta = {"arch": model.arch_config(), "disc_kind": model.disc_kind, "seed": seed}
    h = config_hash(meta)
    torch.save(
        {"format": FORMAT, "kind": "discriminator", **meta, "config_hash": h, "state": model.state_dict()},
        path,
    )
    return h


def load_discriminator(path):
    from .discriminator import ImageDiscriminator, PointDiscriminator

    ckpt = _load(path, "discriminator")
    cls = {"point": PointDiscriminator, "image": ImageDiscriminator}[ckpt["disc_kind"]]
    model = cls(**ckpt["arch"])
    model.load_state_dict(ckpt["state"])
    model.eval()
    return model


def checkpoint_hash(path) -> str:
    """config_hash recorded inside a checkpoint file."""
    return torch.load(path, weights_only=True)["config_hash"]


def _load(path, expected_kind: str) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    ckpt = torch.load(path, weights_only=True)
    if ckpt.get("format") != FORMAT:
        raise ValueError(f"{path}: not a {FORMAT} file")
    if ckpt.get("kind") != expected_kind:
        raise ValueError(f"{path}: expected kind {expected_kind!r}, got {ckpt.get('kind')!r}")
    return ckpt
