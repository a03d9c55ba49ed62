"""Captioned real/fake dataset construction.

A build ingests a local directory tree of images, keeps those the region
detector scores at or above a threshold, captions them (deterministic local
stub or an HTTP captioner), optionally pairs them with generated fakes, and
persists everything as a line-delimited manifest: one header line followed
by one JSON record per image, sorted by (source, path) so rebuilds are
byte-identical.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import torch

from .errors import ManifestBuildError
from .imgio import list_pngs, load_image_png, save_image_png
from .mask import RegionDetector, synthetic_detect

MANIFEST_SCHEMA = "mmguide-manifest/v1"
SOURCES = ("corpusA", "corpusB", "generated")
CAPTION_FAILED = "<caption-failed>"


@dataclass(frozen=True)
class ManifestRecord:
    image_path: str  # relative to the manifest's directory
    caption: str
    source: str
    detector_score: float
    label: str  # real | fake
    seed: int | None = None  # generation seed, fake records only
    generator_hash: str | None = None

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}, got {self.source!r}")
        if self.label not in ("real", "fake"):
            raise ValueError(f"label must be real|fake, got {self.label!r}")
        if not 0.0 <= self.detector_score <= 1.0:
            raise ValueError(f"detector_score must be in [0,1], got {self.detector_score}")

    def to_json(self) -> str:
        d = {
            "image_path": self.image_path,
            "caption": self.caption,
            "source": self.source,
            "detector_score": self.detector_score,
            "label": self.label,
        }
        if self.label == "fake":
            d["seed"] = self.seed
            d["generator_hash"] = self.generator_hash
        return json.dumps(d, sort_keys=True)


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[ManifestRecord, ...]
    version: str
    threshold: float
    counts: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))

    @staticmethod
    def tally(records) -> dict:
        counts = {"real": 0, "fake": 0, "by_source": {}}
        for r in records:
            counts[r.label] += 1
            counts["by_source"][r.source] = counts["by_source"].get(r.source, 0) + 1
        return counts


class CaptionerClient(Protocol):
    def caption(self, image: torch.Tensor) -> str: ...


@dataclass(frozen=True)
class StubCaptioner:
    """Deterministic template captions derived from image content.

    The largest bright region is classified as disc-like or square-like by
    how much of its bounding box it fills (a square fills it, a disc leaves
    the corners), then described by area and centre.
    """

    intensity_threshold: float = 0.5

    def caption(self, image: torch.Tensor) -> str:
        det = synthetic_detect(image, self.intensity_threshold)
        if det.D.sum() == 0:
            return "an empty dark field"
        ys, xs = det.D.nonzero()
        area = int(det.D.sum())
        box = (ys.max() - ys.min() + 1) * (xs.max() - xs.min() + 1)
        shape = "square" if area / box > 0.92 else "disc"
        cy, cx = int(round(ys.mean())), int(round(xs.mean()))
        return f"a bright {shape} of {area} pixels centred near row {cy}, column {cx}"


class HTTPCaptioner:
    """POSTs PNG-encoded images to an endpoint returning {"caption": text}.

    Bounded retries and timeouts; the endpoint URL and bearer token may come
    from the CAPTIONER_URL / CAPTIONER_TOKEN environment variables.
    """

    def __init__(self, url: str | None = None, session=None, retries: int = 2, timeout: float = 10.0):
        self.url = url or os.environ.get("CAPTIONER_URL")
        if not self.url:
            raise ValueError("no captioner endpoint configured (argument or CAPTIONER_URL)")
        if session is None:
            import requests

            session = requests.Session()
        self.session = session
        self.retries = retries
        self.timeout = timeout

    def caption(self, image: torch.Tensor) -> str:
        import io

        buf = io.BytesIO()
        from PIL import Image
        import numpy as np

        arr = (image.detach().numpy().squeeze(0) * 255).clip(0, 255).astype(np.uint8)
        Image.fromarray(arr, mode="L").save(buf, format="PNG")
        headers = {}
        token = os.environ.get("CAPTIONER_TOKEN")
        if token:
            headers["Authorization"] = f"Bearer {token}"
        last_err = None
        for _ in range(self.retries + 1):
            try:
                resp = self.session.post(self.url, data=buf.getvalue(), headers=headers, timeout=self.timeout)
                resp.raise_for_status()
                return resp.json()["caption"]
            except Exception as err:  # noqa: BLE001 - any transport failure retries
                last_err = err
        raise RuntimeError(f"captioner failed after {self.retries + 1} attempts: {last_err}")


def filter_by_detector(images: list[tuple[Path, torch.Tensor]], detector: RegionDetector, threshold: float = 0.8):
    """Keep images the detector scores at >= threshold (inclusive).

    Returns [(path, image, score), ...] preserving input order.
    """
    kept = []
    for path, img in images:
        det = detector.detect(img)
        if det.S >= threshold:
            kept.append((path, img, det.S))
    return kept


def caption_images(images: list[torch.Tensor], client: CaptionerClient, max_failure_rate: float = 0.5) -> list[str]:
    """One caption per image, order-preserving; failures are per-item markers.

    Raises only when the failure rate exceeds max_failure_rate.
    """
    captions = []
    failures = 0
    for img in images:
        try:
            captions.append(client.caption(img))
        except Exception:  # noqa: BLE001 - captioning is best-effort per item
            captions.append(CAPTION_FAILED)
            failures += 1
    if images and failures / len(images) > max_failure_rate:
        raise RuntimeError(f"caption failure rate {failures}/{len(images)} exceeds bound {max_failure_rate}")
    return captions


@dataclass(frozen=True)
class GeneratedFake:
    image: torch.Tensor
    caption: str
    seed: int
    generator_hash: str
    failed: bool = False


def generate_fakes(captions: list[str], generator: Callable[[str, int], torch.Tensor], seed: int, generator_hash: str = "") -> list[GeneratedFake]:
    """One generated image per caption; item i uses seed + i (recorded)."""
    out = []
    for i, cap in enumerate(captions):
        item_seed = seed + i
        try:
            img = generator(cap, item_seed)
            out.append(GeneratedFake(image=img, caption=cap, seed=item_seed, generator_hash=generator_hash))
        except Exception:  # noqa: BLE001 - per-item marker, build continues
            out.append(GeneratedFake(image=torch.zeros(1), caption=cap, seed=item_seed, generator_hash=generator_hash, failed=True))
    return out


def build_manifest(real_records: list[ManifestRecord], fake_records: list[ManifestRecord], out_path, threshold: float, max_source_fraction: float = 1.0) -> DatasetManifest:
    """Validate, sort, and atomically write the manifest.

    All violations (unresolvable paths, dominance bound) are collected and
    reported together.  Rebuilding from the same inputs is byte-identical.
    """
    out_path = Path(out_path)
    records = sorted(real_records + fake_records, key=lambda r: (r.source, r.image_path))
    offenders = []
    for r in records:
        if not (out_path.parent / r.image_path).exists():
            offenders.append(f"{r.image_path}: file not found")
    counts = DatasetManifest.tally(records)
    if records and max_source_fraction < 1.0:
        for source, n in counts["by_source"].items():
            frac = n / len(records)
            if frac > max_source_fraction:
                offenders.append(f"source {source}: fraction {frac:.3f} exceeds dominance bound {max_source_fraction}")
    if offenders:
        raise ManifestBuildError(offenders)

    header = {
        "schema": MANIFEST_SCHEMA,
        "version": "1",
        "threshold": threshold,
        "max_source_fraction": max_source_fraction,
        "counts": counts,
    }
    tmp = out_path.with_name(out_path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for r in records:
            fh.write(r.to_json() + "\n")
    os.replace(tmp, out_path)
    return DatasetManifest(records=tuple(records), version="1", threshold=threshold, counts=counts)


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    header = json.loads(lines[0])
    if header.get("schema") != MANIFEST_SCHEMA:
        raise ValueError(f"{path}: not a {MANIFEST_SCHEMA} file")
    records = []
    for line in lines[1:]:
        d = json.loads(line)
        records.append(
            ManifestRecord(
                image_path=d["image_path"],
                caption=d["caption"],
                source=d["source"],
                detector_score=d["detector_score"],
                label=d["label"],
                seed=d.get("seed"),
                generator_hash=d.get("generator_hash"),
            )
        )
    return DatasetManifest(records=tuple(records), version=header["version"], threshold=header["threshold"], counts=header["counts"])


def ingest_directory(input_dir) -> list[tuple[str, Path, torch.Tensor]]:
    """Load (source, path, image) triples from input_dir/<source>/*.png."""
    input_dir = Path(input_dir)
    items = []
    for source_dir in sorted(p for p in input_dir.iterdir() if p.is_dir()):
        for png in list_pngs(source_dir):
            items.append((source_dir.name, png, load_image_png(png)))
    return items


def build_dataset(
    input_dir,
    out_path,
    captioner: CaptionerClient,
    detector: RegionDetector,
    threshold: float = 0.8,
    generator: Callable[[str, int], torch.Tensor] | None = None,
    generator_hash: str = "",
    seed: int = 0,
    fakes_per_real: float = 1.0,
    max_source_fraction: float = 1.0,
) -> DatasetManifest:
    """End-to-end build: ingest, filter, caption, generate fakes, persist.

    Generated fakes are written next to the manifest under generated/ and
    recorded with their per-item seeds.
    """
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    items = ingest_directory(input_dir)
    filtered = []
    for source, path, img in items:
        det = detector.detect(img)
        if det.S >= threshold:
            filtered.append((source, path, img, det.S))
    captions = caption_images([img for _, _, img, _ in filtered], captioner)

    real_records = []
    for (source, path, _img, score), cap in zip(filtered, captions):
        rel = os.path.relpath(path, out_path.parent)
        real_records.append(ManifestRecord(image_path=rel, caption=cap, source=source, detector_score=score, label="real"))

    fake_records = []
    if generator is not None and real_records:
        n_fakes = int(round(fakes_per_real * len(real_records)))
        fake_captions = [real_records[i % len(real_records)].caption for i in range(n_fakes)]
        fakes = generate_fakes(fake_captions, generator, seed, generator_hash)
        gen_dir = out_path.parent / "generated"
        gen_dir.mkdir(exist_ok=True)
        for i, fake in enumerate(fakes):
            if fake.failed:
                continue
            p = gen_dir / f"fake_{i:05d}.png"
            save_image_png(p, fake.image)
            det = detector.detect(fake.image)
            fake_records.append(
                ManifestRecord(
                    image_path=os.path.relpath(p, out_path.parent),
                    caption=fake.caption,
                    source="generated",
                    detector_score=det.S,
                    label="fake",
                    seed=fake.seed,
                    generator_hash=fake.generator_hash,
                )
            )
    return build_manifest(real_records, fake_records, out_path, threshold, max_source_fraction)
