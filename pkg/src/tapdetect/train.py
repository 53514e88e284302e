"""Training loop, binary cross-entropy loss, and benchmark metrics.

Metrics follow per-source-tag reporting: each tag gets its own confusion
counts and derived accuracy / F1 / F-Acc / R-Acc (recall on the generated and
real class respectively), plus an unweighted mean row across tags and a
micro-averaged overall row.

Degenerate-ratio convention, used consistently for F1, F-Acc, and R-Acc: a
ratio whose denominator is zero is reported as 1.0 (an empty class cannot be
misclassified). In particular a tag with no positives gets F1 = 0.0 whenever
any false positive exists and 1.0 only when the confusion is spotless.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .featurestore import Batch, FeatureDataset, atomic_write_bytes, batch_iter
from .linalg import NumericalError, ShapeError
from .optim import AdamWHyper, OptimizerState, adamw_step, init_state, lr_at
from .tap import (
    LinearProbeConfig,
    LinearProbeParams,
    TapConfig,
    TapParams,
    forward_logit,
    init_linear_probe,
    init_params,
    linear_backward,
    linear_forward,
    save_checkpoint,
    tap_backward,
    tap_forward,
)

_MASK64 = (1 << 64) - 1


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def bce_with_logit(logit: float, label: int) -> tuple[float, float]:
    """Stable sigmoid cross-entropy: loss = softplus(logit) - label * logit.

    Returns (loss, dloss/dlogit) with dlogit = sigmoid(logit) - label.
    """
    if not math.isfinite(logit):
        raise NumericalError(f"non-finite logit {logit!r}")
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label}")
    softplus = max(logit, 0.0) + math.log1p(math.exp(-abs(logit)))
    return softplus - label * logit, sigmoid(logit) - label


# -- metrics ---------------------------------------------------------------


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def add(self, label: int, predicted: int) -> None:
        if label == 1:
            if predicted == 1:
                self.tp += 1
            else:
                self.fn += 1
        else:
            if predicted == 1:
                self.fp += 1
            else:
                self.tn += 1


def _ratio(num: int, den: int) -> float:
    # empty class convention: nothing to get wrong counts as perfect
    return num / den if den > 0 else 1.0


@dataclass
class TagMetrics:
    counts: ConfusionCounts
    accuracy: float
    f1: float
    f_acc: float
    r_acc: float

    @property
    def n(self) -> int:
        return self.counts.total


def metrics_from_counts(c: ConfusionCounts) -> TagMetrics:
    return TagMetrics(
        counts=c,
        accuracy=_ratio(c.tp + c.tn, c.total),
        f1=_ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
        f_acc=_ratio(c.tp, c.tp + c.fn),
        r_acc=_ratio(c.tn, c.tn + c.fp),
    )


@dataclass
class MetricsReport:
    per_tag: dict[str, TagMetrics]
    overall: TagMetrics
    mean_accuracy: float
    mean_f1: float
    mean_f_acc: float
    mean_r_acc: float
    threshold: float

    def to_dict(self, name: str | None = None) -> dict:
        def tag_dict(m: TagMetrics) -> dict:
            return {
                "tp": m.counts.tp, "fp": m.counts.fp,
                "tn": m.counts.tn, "fn": m.counts.fn,
                "n": m.n,
                "acc": m.accuracy, "f1": m.f1,
                "f_acc": m.f_acc, "r_acc": m.r_acc,
            }

        out = {
            "threshold": self.threshold,
            "per_tag": {tag: tag_dict(m) for tag, m in self.per_tag.items()},
            "overall": tag_dict(self.overall),
            "mean": {
                "acc": self.mean_accuracy, "f1": self.mean_f1,
                "f_acc": self.mean_f_acc, "r_acc": self.mean_r_acc,
            },
        }
        if name is not None:
            out["name"] = name
        return out

    def to_csv(self) -> str:
        lines = ["tag,f1,acc,f_acc,r_acc,n"]
        for tag, m in self.per_tag.items():
            lines.append(f"{tag},{m.f1!r},{m.accuracy!r},{m.f_acc!r},{m.r_acc!r},{m.n}")
        lines.append(
            f"Mean,{self.mean_f1!r},{self.mean_accuracy!r},"
            f"{self.mean_f_acc!r},{self.mean_r_acc!r},{self.overall.n}"
        )
        return "\n".join(lines) + "\n"

    def to_markdown(self) -> str:
        rows = ["| tag | f1 | acc | f_acc | r_acc | n |", "|---|---|---|---|---|---|"]
        for tag, m in self.per_tag.items():
            rows.append(
                f"| {tag} | {m.f1:.4f} | {m.accuracy:.4f} "
                f"| {m.f_acc:.4f} | {m.r_acc:.4f} | {m.n} |"
            )
        rows.append(
            f"| Mean | {self.mean_f1:.4f} | {self.mean_accuracy:.4f} "
            f"| {self.mean_f_acc:.4f} | {self.mean_r_acc:.4f} | {self.overall.n} |"
        )
        return "\n".join(rows) + "\n"


def report_from_confusions(
    per_tag_counts: dict[str, ConfusionCounts], threshold: float = 0.5
) -> MetricsReport:
    per_tag = {tag: metrics_from_counts(c) for tag, c in per_tag_counts.items()}
    overall_counts = ConfusionCounts(
        tp=sum(c.tp for c in per_tag_counts.values()),
        fp=sum(c.fp for c in per_tag_counts.values()),
        tn=sum(c.tn for c in per_tag_counts.values()),
        fn=sum(c.fn for c in per_tag_counts.values()),
    )
    tags = list(per_tag.values())
    k = len(tags)
    return MetricsReport(
        per_tag=per_tag,
        overall=metrics_from_counts(overall_counts),
        mean_accuracy=sum(t.accuracy for t in tags) / k,
        mean_f1=sum(t.f1 for t in tags) / k,
        mean_f_acc=sum(t.f_acc for t in tags) / k,
        mean_r_acc=sum(t.r_acc for t in tags) / k,
        threshold=threshold,
    )


def evaluate(
    params: TapParams | LinearProbeParams,
    dataset: FeatureDataset,
    threshold: float = 0.5,
    workers: int = 1,
) -> MetricsReport:
    """Per-tag confusion and metrics; prediction is sigmoid(logit) > threshold.

    Records are independent, so with workers > 1 the forward passes fan out
    over a thread pool (params are shared read-only); counts are accumulated
    in record order either way, so the report does not depend on workers.
    """
    if len(dataset.records) == 0:
        raise ValueError("cannot evaluate on an empty dataset")

    def predict(rec) -> int:
        return 1 if sigmoid(forward_logit(params, rec)) > threshold else 0

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            predictions = list(pool.map(predict, dataset.records, chunksize=64))
    else:
        predictions = [predict(rec) for rec in dataset.records]

    counts: dict[str, ConfusionCounts] = {}
    for rec, predicted in zip(dataset.records, predictions):
        counts.setdefault(rec.tag, ConfusionCounts()).add(rec.label, predicted)
    return report_from_confusions(counts, threshold)


@dataclass
class PairedReport:
    """Side-by-side metrics for the attention-pooled head and the cls-only probe."""

    tap: MetricsReport
    linear: MetricsReport

    def to_markdown(self) -> str:
        rows = [
            "| tag | pooled acc | pooled f1 | cls-only acc | cls-only f1 |",
            "|---|---|---|---|---|",
        ]
        for tag in self.tap.per_tag:
            a = self.tap.per_tag[tag]
            b = self.linear.per_tag.get(tag)
            b_acc = f"{b.accuracy:.4f}" if b else "-"
            b_f1 = f"{b.f1:.4f}" if b else "-"
            rows.append(f"| {tag} | {a.accuracy:.4f} | {a.f1:.4f} | {b_acc} | {b_f1} |")
        rows.append(
            f"| Mean | {self.tap.mean_accuracy:.4f} | {self.tap.mean_f1:.4f} "
            f"| {self.linear.mean_accuracy:.4f} | {self.linear.mean_f1:.4f} |"
        )
        return "\n".join(rows) + "\n"


def compare_cls_only(
    params_tap: TapParams,
    params_linear: LinearProbeParams,
    dataset: FeatureDataset,
    threshold: float = 0.5,
) -> PairedReport:
    if params_tap.dim != params_linear.dim:
        raise ShapeError(
            f"head dims differ: {params_tap.dim} vs {params_linear.dim}"
        )
    return PairedReport(
        tap=evaluate(params_tap, dataset, threshold),
        linear=evaluate(params_linear, dataset, threshold),
    )


# -- training ---------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    iterations: int
    batch_size: int = 128
    seed: int = 0
    hyper: AdamWHyper = field(default_factory=AdamWHyper)
    schedule: str = "warmup-cosine"
    eval_every: int = 0  # 0 disables periodic validation
    checkpoint_path: str | None = None
    history_path: str | None = None

    def validate(self) -> None:
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        self.hyper.validate()


def batch_loss_and_grads(
    params: TapParams | LinearProbeParams, batch: Batch
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean per-record loss and the matching averaged gradients.

    Records are reduced in batch order so the sum is reproducible.
    """
    scale = 1.0 / len(batch)
    total_loss = 0.0
    acc: dict[str, np.ndarray] | None = None
    for rec in batch.records:
        if isinstance(params, TapParams):
            logit, cache = tap_forward(params, rec)
            loss, dlogit = bce_with_logit(logit, rec.label)
            grads = tap_backward(params, cache, dlogit * scale).tensors
        else:
            logit, cls_row = linear_forward(params, rec)
            loss, dlogit = bce_with_logit(logit, rec.label)
            grads = linear_backward(params, cls_row, dlogit * scale).tensors
        total_loss += loss
        if acc is None:
            acc = grads
        else:
            for name, g in grads.items():
                acc[name] += g
    assert acc is not None
    return total_loss * scale, acc


def train(
    config: TrainConfig,
    model_cfg: TapConfig | LinearProbeConfig,
    train_ds: FeatureDataset,
    val_ds: FeatureDataset | None = None,
) -> tuple[TapParams | LinearProbeParams, list[dict]]:
    """Run exactly config.iterations AdamW steps over shuffled batches.

    Batches come from repeated epochs of ``batch_iter`` with the per-epoch
    seed ``config.seed + epoch``. History holds one record per iteration
    (iter, loss, lr) plus periodic validation metrics; everything is a pure
    function of (seed, data, config).
    """
    config.validate()
    model_cfg.validate()
    if train_ds.dim != model_cfg.dim:
        raise ShapeError(
            f"train data dim {train_ds.dim} != model dim {model_cfg.dim}"
        )
    if val_ds is not None and val_ds.dim != model_cfg.dim:
        raise ShapeError(f"val data dim {val_ds.dim} != model dim {model_cfg.dim}")

    if isinstance(model_cfg, TapConfig):
        params: TapParams | LinearProbeParams = init_params(model_cfg)
    else:
        params = init_linear_probe(model_cfg)
    tensors = params.tensors()
    state: OptimizerState = init_state(tensors)

    history: list[dict] = []
    iteration = 0
    epoch = 0
    while iteration < config.iterations:
        epoch_seed = (config.seed + epoch) & _MASK64
        for batch in batch_iter(train_ds, config.batch_size, epoch_seed):
            if iteration >= config.iterations:
                break
            lr_t = lr_at(config.schedule, iteration, config.iterations, config.hyper.lr)
            try:
                loss, grads = batch_loss_and_grads(params, batch)
            except NumericalError as exc:
                raise NumericalError(f"at iteration {iteration}: {exc}") from exc
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite loss at iteration {iteration}")
            adamw_step(tensors, grads, state, config.hyper, lr_t)
            entry: dict = {"iter": iteration, "loss": loss, "lr": lr_t}
            if (
                val_ds is not None
                and config.eval_every > 0
                and (iteration + 1) % config.eval_every == 0
            ):
                entry["val"] = evaluate(params, val_ds).to_dict()["mean"]
            history.append(entry)
            iteration += 1
        epoch += 1

    if config.history_path is not None:
        lines = "".join(json.dumps(e, sort_keys=True) + "\n" for e in history)
        atomic_write_bytes(Path(config.history_path), lines.encode("utf-8"))
    if config.checkpoint_path is not None:
        save_checkpoint(params, model_cfg, config.checkpoint_path, opt_state=state)
    return params, history
