"""Command-line interface.

Subcommands: synth, train, eval, gradcheck, report, inspect. Every command
that produces artifacts also writes a ``<output>.manifest.json`` next to its
primary output, recording the command line, resolved configuration, seeds,
sha256 digests of the inputs, the tool version, and timestamps. Outputs
themselves carry no timestamps, so re-running with identical inputs
reproduces them byte for byte on one platform.

Exit codes: 0 ok, 2 usage, 3 I/O, 4 data/dimension error, 5 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .featurestore import (
    FeatureDataset,
    FeatureStoreError,
    read_feature_file,
    atomic_write_bytes,
    write_feature_file,
)
from .gradcheck import DEFAULT_TOLERANCE, gradcheck_tap
from .linalg import NumericalError, ShapeError
from .optim import AdamWHyper
from .synth import SynthConfig, generate_planted_dataset, write_oracle_sidecar
from .tap import (
    CheckpointError,
    LinearProbeConfig,
    TapConfig,
    load_checkpoint,
)
from .train import TrainConfig, evaluate, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DATA = 4
EXIT_NUMERIC = 5

THREADS_ENV = "TAPDETECT_THREADS"


def _workers() -> int:
    """Evaluation thread count; the only environment variable consulted."""
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ValueError(f"{THREADS_ENV} must be >= 1, got {n}")
    return n


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(
    anchor_output: Path,
    command: str,
    args: argparse.Namespace,
    inputs: list[Path],
    outputs: list[Path],
    started: float,
) -> None:
    resolved = {
        k: (str(v) if isinstance(v, Path) else v)
        for k, v in vars(args).items()
        if k != "func"
    }
    manifest = {
        "command": command,
        "argv": sys.argv,
        "resolved_config": resolved,
        "seeds": {k: v for k, v in resolved.items() if "seed" in k},
        "inputs": {str(p): _sha256(Path(p)) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "tool_version": __version__,
        "started_unix": started,
        "finished_unix": time.time(),
    }
    path = Path(str(anchor_output) + ".manifest.json")
    atomic_write_bytes(path, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())


def _cmd_synth(args: argparse.Namespace) -> int:
    started = time.time()
    cfg = SynthConfig(
        dim=args.d,
        n_tokens=args.n,
        k=args.k,
        alpha=args.alpha,
        n_real=args.n_real,
        n_fake=args.n_fake,
        seed=args.seed,
        mode=args.mode,
        tag=args.tag,
        direction_seed=args.direction_seed,
    )
    dataset, u = generate_planted_dataset(cfg)
    out = Path(args.out)
    write_feature_file(dataset, out)
    sidecar = write_oracle_sidecar(out, cfg, u)
    _write_manifest(out, "synth", args, inputs=[], outputs=[out, sidecar], started=started)
    print(f"wrote {len(dataset)} records (dim {dataset.dim}) to {out}")
    return EXIT_OK


def _load_datasets(paths: list[str]) -> FeatureDataset:
    merged: FeatureDataset | None = None
    for p in paths:
        ds = read_feature_file(p)
        if merged is None:
            merged = ds
        else:
            if ds.dim != merged.dim:
                raise ShapeError(
                    f"dataset {p} has dim {ds.dim}, expected {merged.dim}"
                )
            merged.records.extend(ds.records)
    assert merged is not None
    return merged


def _cmd_train(args: argparse.Namespace) -> int:
    started = time.time()
    train_ds = _load_datasets(args.train)
    val_ds = _load_datasets(args.val) if args.val else None

    if args.head == "tap":
        model_cfg: TapConfig | LinearProbeConfig = TapConfig(
            dim=train_ds.dim,
            heads=args.heads,
            mlp_hidden=args.mlp_hidden,
            proj_dim=args.proj_dim,
            seed=args.init_seed,
        )
    else:
        model_cfg = LinearProbeConfig(dim=train_ds.dim)

    out = Path(args.out)
    history_path = args.history or str(out) + ".history.jsonl"
    cfg = TrainConfig(
        iterations=args.iterations,
        batch_size=args.batch,
        seed=args.seed,
        hyper=AdamWHyper(
            lr=args.lr,
            weight_decay=args.wd,
            beta1=args.beta1,
            beta2=args.beta2,
            eps=args.eps,
        ),
        schedule=args.schedule,
        eval_every=args.eval_every,
        checkpoint_path=str(out),
        history_path=history_path,
    )
    _, history = train(cfg, model_cfg, train_ds, val_ds)
    inputs = [Path(p) for p in args.train] + [Path(p) for p in (args.val or [])]
    _write_manifest(out, "train", args, inputs=inputs,
                    outputs=[out, Path(history_path)], started=started)
    print(f"trained {args.head} head for {args.iterations} iterations; "
          f"final loss {history[-1]['loss']:.6f}; checkpoint {out}")
    return EXIT_OK


def _cmd_eval(args: argparse.Namespace) -> int:
    started = time.time()
    params, _ = load_checkpoint(args.ckpt)
    ds = _load_datasets(args.data)
    report = evaluate(params, ds, threshold=args.threshold, workers=_workers())
    name = args.name or Path(args.ckpt).stem
    print(report.to_markdown(), end="")
    if args.out:
        out = Path(args.out)
        payload = json.dumps(report.to_dict(name=name), indent=2, sort_keys=True) + "\n"
        atomic_write_bytes(out, payload.encode())
        csv_path = out.with_suffix(".csv")
        atomic_write_bytes(csv_path, report.to_csv().encode())
        inputs = [Path(args.ckpt)] + [Path(p) for p in args.data]
        _write_manifest(out, "eval", args, inputs=inputs,
                        outputs=[out, csv_path], started=started)
    return EXIT_OK


def _cmd_gradcheck(args: argparse.Namespace) -> int:
    cfg = TapConfig(
        dim=args.d,
        heads=args.heads,
        mlp_hidden=args.mlp_hidden,
        proj_dim=args.proj_dim,
        seed=args.seed,
    )
    worst = 0.0
    for r in range(args.repeats):
        result = gradcheck_tap(cfg, n_tokens=args.n, seed=args.seed + r, h=args.h)
        for name, err in sorted(result.per_tensor.items()):
            print(f"seed {args.seed + r}  {name:16s} rel err {err:.3e}")
        worst = max(worst, result.max_rel_err)
    print(f"max rel err {worst:.3e} (tolerance {args.tol:.1e})")
    if worst < args.tol:
        print("gradcheck PASS")
        return EXIT_OK
    print("gradcheck FAIL")
    return EXIT_NUMERIC


def _cmd_report(args: argparse.Namespace) -> int:
    started = time.time()
    evals = [json.loads(Path(p).read_text()) for p in args.inputs]
    tags: list[str] = []
    for e in evals:
        for tag in e["per_tag"]:
            if tag not in tags:
                tags.append(tag)

    header = ["method"]
    for tag in tags:
        header += [f"{tag}_f1", f"{tag}_acc"]
    header += ["mean_f1", "mean_acc"]
    rows = []
    for e in evals:
        row = [e.get("name", "?")]
        for tag in tags:
            cell = e["per_tag"].get(tag)
            row += [cell["f1"], cell["acc"]] if cell else ["", ""]
        row += [e["mean"]["f1"], e["mean"]["acc"]]
        rows.append(row)

    def fmt(x: object) -> str:
        return f"{x:.4f}" if isinstance(x, float) else str(x)

    md_lines = ["| " + " | ".join(header) + " |",
                "|" + "---|" * len(header)]
    for row in rows:
        md_lines.append("| " + " | ".join(fmt(x) for x in row) + " |")
    markdown = "\n".join(md_lines) + "\n"
    print(markdown, end="")

    if args.out:
        base = Path(args.out)
        csv_text = ",".join(header) + "\n"
        for row in rows:
            csv_text += ",".join(repr(x) if isinstance(x, float) else str(x) for x in row) + "\n"
        json_payload = {
            "tags": tags,
            "rows": [
                {"name": e.get("name", "?"), "per_tag": e["per_tag"], "mean": e["mean"]}
                for e in evals
            ],
        }
        out_csv = base.with_suffix(".csv")
        out_json = base.with_suffix(".json")
        out_md = base.with_suffix(".md")
        atomic_write_bytes(out_csv, csv_text.encode())
        atomic_write_bytes(out_json, (json.dumps(json_payload, indent=2, sort_keys=True) + "\n").encode())
        atomic_write_bytes(out_md, markdown.encode())
        _write_manifest(out_json, "report", args,
                        inputs=[Path(p) for p in args.inputs],
                        outputs=[out_csv, out_json, out_md], started=started)
    return EXIT_OK


def _cmd_inspect(args: argparse.Namespace) -> int:
    ds = read_feature_file(args.file)
    labels = [r.label for r in ds.records]
    print(f"file:     {args.file}")
    print(f"dim:      {ds.dim}")
    print(f"records:  {len(ds.records)}")
    if ds.records:
        ns = [r.n_tokens for r in ds.records]
        print(f"tokens:   min {min(ns)}, max {max(ns)}, mean {sum(ns) / len(ns):.1f}")
        print(f"labels:   real {labels.count(0)}, generated {labels.count(1)}")
        by_tag: dict[str, int] = {}
        for r in ds.records:
            by_tag[r.tag] = by_tag.get(r.tag, 0) + 1
        for tag, count in by_tag.items():
            print(f"tag:      {tag} x{count}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tapdetect",
        description="Train and evaluate attention-pooled detection heads on "
                    "token-feature files (TFRB).",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a planted-artifact TFRB dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--d", type=int, default=16)
    p.add_argument("--n", type=int, default=64, help="tokens per record, cls included")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--alpha", type=float, default=4.0)
    p.add_argument("--n-real", type=int, default=1000)
    p.add_argument("--n-fake", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--direction-seed", type=int, default=None,
                   help="seed for the planted direction (default: --seed); share it "
                        "across train/test splits")
    p.add_argument("--mode", choices=["patch-signal", "cls-signal"], default="patch-signal")
    p.add_argument("--tag", default="synth")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train a detection head on TFRB files")
    p.add_argument("--train", nargs="+", required=True, help="training TFRB file(s)")
    p.add_argument("--val", nargs="+", help="validation TFRB file(s)")
    p.add_argument("--head", choices=["tap", "linear"], default="tap")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--history", help="history JSONL path (default <out>.history.jsonl)")
    p.add_argument("--iterations", type=int, required=True)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--wd", type=float, default=1e-2)
    p.add_argument("--beta1", type=float, default=0.9)
    p.add_argument("--beta2", type=float, default=0.999)
    p.add_argument("--eps", type=float, default=1e-8)
    p.add_argument("--schedule", choices=["warmup-cosine", "constant"], default="warmup-cosine")
    p.add_argument("--seed", type=int, default=0, help="batch shuffling seed")
    p.add_argument("--init-seed", type=int, default=0, help="parameter init seed")
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--mlp-hidden", type=int, default=None)
    p.add_argument("--proj-dim", type=int, default=None)
    p.add_argument("--eval-every", type=int, default=0)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on TFRB files")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", help="write a JSON report (plus CSV) here")
    p.add_argument("--name", help="row label used by 'report' (default: checkpoint stem)")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference audit of the backward pass")
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--n", type=int, default=9)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--mlp-hidden", type=int, default=16)
    p.add_argument("--proj-dim", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=DEFAULT_TOLERANCE)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("report", help="merge eval JSON outputs into one benchmark table")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--out", help="basename for .csv/.json/.md outputs")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("inspect", help="print TFRB header and record statistics")
    p.add_argument("file")
    p.set_defaults(func=_cmd_inspect)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (FeatureStoreError, CheckpointError, ShapeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    raise SystemExit(main())
