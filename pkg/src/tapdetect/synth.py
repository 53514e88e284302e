"""Synthetic planted-artifact token datasets.

These datasets give the benchmark a ground truth that real exports cannot:
class signal that lives, by construction, either only in a few patch tokens or
only in the cls token.

Every token of every record is drawn iid standard normal in D dimensions.
For generated records, a fixed unit direction ``u`` (drawn once per dataset)
is added with strength ``alpha``:

* ``patch-signal`` mode: to k randomly chosen patch rows; the cls row is never
  touched, so the cls marginal is identical across classes and a cls-only
  probe can do no better than chance,
* ``cls-signal`` mode: to the cls row only.

The detection statistic ``oracle_score`` (max over patch rows of the dot
product with u) upper-bounds what a patch-aware detector can exploit and is
used to calibrate expected separations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .featurestore import FeatureDataset, TokenFeatureRecord, atomic_write_bytes
from .linalg import ShapeError

MODES = ("patch-signal", "cls-signal")


@dataclass(frozen=True)
class SynthConfig:
    dim: int
    n_tokens: int          # per record, cls row included
    k: int                 # artifact-bearing patch rows per generated record
    alpha: float           # artifact strength along u
    n_real: int
    n_fake: int
    seed: int = 0
    mode: str = "patch-signal"
    tag: str = "synth"
    # train and test splits must plant along the same direction; give both
    # configs one direction_seed while varying seed for independent noise
    direction_seed: int | None = None

    def validate(self) -> None:
        if self.dim < 2 or self.n_tokens < 2:
            raise ValueError(f"dim and n_tokens must be >= 2, got {self.dim}, {self.n_tokens}")
        if not (1 <= self.k <= self.n_tokens - 1):
            raise ValueError(f"k must lie in [1, {self.n_tokens - 1}], got {self.k}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.n_real < 0 or self.n_fake < 0:
            raise ValueError("n_real and n_fake must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


def generate_planted_dataset(config: SynthConfig) -> tuple[FeatureDataset, np.ndarray]:
    """Returns (dataset, u) with u the dataset's unit artifact direction.

    Real records come first, then generated ones. Draw order is fixed, so the
    output is a deterministic function of the config.
    """
    config.validate()
    dseed = config.seed if config.direction_seed is None else config.direction_seed
    u = np.random.default_rng([dseed, 1]).standard_normal(config.dim)
    u /= np.linalg.norm(u)
    rng = np.random.default_rng([config.seed, 2])

    records: list[TokenFeatureRecord] = []
    for _ in range(config.n_real):
        tokens = rng.standard_normal((config.n_tokens, config.dim))
        records.append(
            TokenFeatureRecord(label=0, tag=config.tag, tokens=tokens.astype("<f4"))
        )
    for _ in range(config.n_fake):
        tokens = rng.standard_normal((config.n_tokens, config.dim))
        if config.mode == "patch-signal":
            rows = rng.choice(config.n_tokens - 1, size=config.k, replace=False) + 1
            tokens[rows] += config.alpha * u
        else:
            tokens[0] += config.alpha * u
        records.append(
            TokenFeatureRecord(label=1, tag=config.tag, tokens=tokens.astype("<f4"))
        )
    return FeatureDataset(dim=config.dim, records=records), u


def oracle_score(record: TokenFeatureRecord, u: np.ndarray) -> float:
    """Max over patch rows of <row, u>; high values flag planted artifacts."""
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (record.tokens.shape[1],):
        raise ShapeError(
            f"direction has shape {u.shape}, record dim is {record.tokens.shape[1]}"
        )
    patches = np.asarray(record.tokens[1:], dtype=np.float64)
    if patches.shape[0] == 0:
        raise ValueError("record has no patch rows to score")
    return float(np.max(patches @ u))


def oracle_sidecar_path(dataset_path: str | Path) -> Path:
    return Path(dataset_path).with_suffix(".oracle.json")


def write_oracle_sidecar(dataset_path: str | Path, config: SynthConfig, u: np.ndarray) -> Path:
    """Persist u and the generation settings next to the dataset file."""
    payload = {
        "artifact_direction": [float(x) for x in u],
        "alpha": config.alpha,
        "k": config.k,
        "mode": config.mode,
        "dim": config.dim,
        "n_tokens": config.n_tokens,
        "seed": config.seed,
        "tag": config.tag,
    }
    path = oracle_sidecar_path(dataset_path)
    atomic_write_bytes(path, (json.dumps(payload, sort_keys=True, indent=2) + "\n").encode())
    return path


def read_oracle_sidecar(path: str | Path) -> tuple[np.ndarray, dict]:
    payload = json.loads(Path(path).read_text())
    return np.asarray(payload["artifact_direction"], dtype=np.float64), payload
