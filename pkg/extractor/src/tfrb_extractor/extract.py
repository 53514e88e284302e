"""Folder-to-TFRB export pipeline.

Each source directory contributes records with one (label, tag) pair. Images
are listed in sorted order, optionally augmented (train exports only), encoded
by the frozen encoder, and written as float32 token matrices with the cls row
first. Unreadable images are skipped with a warning and listed in the JSON
manifest; everything that affects bytes (encoder id, resolution, augmentation
parameters, seed) is recorded there too.
"""

from __future__ import annotations

import json
import os
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .augment import AugmentSpec, augment_image
from .encoders import load_encoder
from .tfrb import write_tfrb

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".webp", ".tif", ".tiff"}


@dataclass(frozen=True)
class SourceSpec:
    directory: str
    label: int
    tag: str


@dataclass(frozen=True)
class ExportConfig:
    encoder: str
    resolution: int
    sources: tuple[SourceSpec, ...]
    out_path: str
    augment: bool = False
    seed: int = 0
    batch_size: int = 8

    def validate(self) -> None:
        if self.resolution < 1:
            raise ValueError(f"resolution must be >= 1, got {self.resolution}")
        if not self.sources:
            raise ValueError("at least one source directory is required")
        for src in self.sources:
            if src.label not in (0, 1):
                raise ValueError(f"label must be 0 or 1, got {src.label}")


@dataclass
class ExportResult:
    out_path: str
    manifest_path: str
    dim: int
    tokens_per_record: int
    written: int
    skipped: list[str] = field(default_factory=list)


def _list_images(directory: str) -> list[Path]:
    root = Path(directory)
    if not root.is_dir():
        raise FileNotFoundError(f"source directory not found: {directory}")
    return sorted(
        p for p in root.iterdir()
        if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
    )


def extract(config: ExportConfig) -> ExportResult:
    config.validate()
    encoder = load_encoder(config.encoder)
    n_tokens = encoder.token_count(config.resolution)  # validates resolution
    rng = np.random.default_rng(config.seed)
    skipped: list[str] = []
    records: list[tuple[int, str, np.ndarray]] = []

    # single-threaded inference keeps reductions order-stable across runs
    prev_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        for src in config.sources:
            pending: list[torch.Tensor] = []

            def flush() -> None:
                if not pending:
                    return
                batch = torch.stack(pending)
                tokens = encoder.encode(batch)
                for row in tokens:
                    records.append((src.label, src.tag, row))
                pending.clear()

            for path in _list_images(src.directory):
                try:
                    with Image.open(path) as img:
                        img.load()
                        image = img.convert("RGB")
                except Exception as exc:
                    print(f"warning: skipping unreadable image {path}: {exc}",
                          file=sys.stderr)
                    skipped.append(str(path))
                    continue
                if config.augment:
                    image = augment_image(image, rng)
                pending.append(encoder.preprocess(image, config.resolution))
                if len(pending) >= config.batch_size:
                    flush()
            flush()
    finally:
        torch.set_num_threads(prev_threads)

    write_tfrb(config.out_path, encoder.dim, records)
    manifest_path = _write_manifest(config, encoder, n_tokens, len(records), skipped)
    return ExportResult(
        out_path=config.out_path,
        manifest_path=manifest_path,
        dim=encoder.dim,
        tokens_per_record=n_tokens,
        written=len(records),
        skipped=skipped,
    )


def _write_manifest(config, encoder, n_tokens, written, skipped) -> str:
    info = encoder.info()
    manifest = {
        "encoder": info.name,
        "dim": info.dim,
        "patch": info.patch,
        "preprocessing": info.preprocessing,
        "resolution": config.resolution,
        "tokens_per_record": n_tokens,
        "augment": config.augment,
        "augmentation": AugmentSpec().to_dict() if config.augment else None,
        "seed": config.seed,
        "sources": [
            {"directory": s.directory, "label": s.label, "tag": s.tag}
            for s in config.sources
        ],
        "written": written,
        "skipped": skipped,
    }
    path = Path(config.out_path + ".manifest.json")
    data = (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise
    return str(path)
