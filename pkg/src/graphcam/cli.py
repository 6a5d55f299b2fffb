"""Command-line entry point: ``graphcam {synth,train,attribute,report}``.

Exit status: 0 success, 1 validation error, 2 runtime or numerical error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path
from xml.sax.saxutils import escape

from . import __version__
from .data import (
    SynthConfig,
    dataset_checksum,
    generate_synthetic,
    load_dataset,
    load_model,
    save_dataset,
    save_model,
)
from .errors import GraphCamError, InvalidStateError, MissingFileError, ValidationError
from .nn import DEFAULT_DROPOUT_LAYERS, ModelConfig
from .saliency import PopulationSaliency, population_saliency
from .train import FoldSplit, TrainConfig, replay_lr, run_cross_validation

log = logging.getLogger("graphcam")


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_json(path: Path, obj, indent=2):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=indent)
        fh.write("\n")


def _read_json(path: Path, what):
    if not path.is_file():
        raise MissingFileError(f"missing {what}: {path}", location=str(path))
    return json.loads(path.read_text(encoding="utf-8"))


def _model_path(results: Path, run, fold) -> Path:
    return results / "models" / f"run{run:02d}_fold{fold:02d}.json"


# --- synth ---------------------------------------------------------------------


def cmd_synth(args):
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ValidationError(f"output directory {out} is not empty (use --force to overwrite)")
    cfg = SynthConfig(args.subjects, args.nodes, args.salient, args.effect, args.noise, args.seed)
    ds = generate_synthetic(cfg)
    save_dataset(ds, out)
    n1 = int(ds.labels.sum())
    print(
        f"wrote {len(ds.subjects)} subjects ({len(ds.subjects) - n1}/{n1}), "
        f"{ds.num_nodes} nodes, salient nodes {ds.ground_truth_salient} -> {out}"
    )
    return 0


# --- train -----------------------------------------------------------------------


def _parse_channels(text):
    try:
        chans = tuple(int(c) for c in text.split(",") if c.strip())
    except ValueError:
        raise ValidationError(f"--channels must be comma-separated integers, got {text!r}") from None
    if not chans:
        raise ValidationError("--channels is empty")
    return chans


def _configs_from_args(args, dataset):
    channels = _parse_channels(args.channels)
    # a shorter stack keeps whichever default dropout positions it has
    drop = tuple(i for i in DEFAULT_DROPOUT_LAYERS if i < len(channels))
    model_cfg = ModelConfig(
        channels=channels,
        num_coeffs=args.k_coeffs,
        dropout_layers=drop,
        dropout_rate=args.dropout,
        num_classes=len(dataset.class_names),
        input_channels=dataset.feature_dim,
    )
    train_cfg = TrainConfig(
        learning_rate=args.lr,
        weight_decay=args.weight_decay,
        batch_size=args.batch,
        total_steps=args.steps,
        eval_every=args.eval_every,
        seed=args.seed,
    )
    return model_cfg, train_cfg


def cmd_train(args):
    data_dir = Path(args.data)
    started = _now()
    dataset = load_dataset(data_dir)
    model_cfg, train_cfg = _configs_from_args(args, dataset)
    workers = None
    if args.parallel is not None:
        workers = args.parallel or max(2, os.cpu_count() or 2)
    cv = run_cross_validation(dataset, model_cfg, train_cfg, args.runs, args.folds, workers=workers)

    out = Path(args.out)
    (out / "models").mkdir(parents=True, exist_ok=True)
    metrics = cv.summary()
    for r, run in enumerate(metrics["runs"]):
        run["folds"] = [
            {
                "fold": f,
                "test_accuracy": rep.test_accuracy,
                "val_accuracies": rep.val_accuracies,
                "lr_events": rep.lr_events,
                "final_lr": rep.final_lr,
                "final_loss": rep.final_loss,
            }
            for f, rep in enumerate(cv.fold_reports[r])
        ]
    _write_json(out / "metrics.json", metrics)
    folds = {
        "runs": [
            {"run": r, "seed": cv.run_seeds[r], "folds": [asdict(s) for s in cv.splits[r]]}
            for r in range(args.runs)
        ]
    }
    _write_json(out / "folds.json", folds, indent=None)
    for r in range(args.runs):
        for f in range(args.folds):
            save_model(cv.models[r][f], _model_path(out, r, f))
    manifest = {
        "tool": "graphcam",
        "tool_version": __version__,
        "base_seed": args.seed,
        "dataset": {"path": str(data_dir.resolve()), "sha256": dataset_checksum(data_dir)},
        "model_config": model_cfg.to_dict(),
        "train_config": asdict(train_cfg),
        "n_runs": args.runs,
        "n_folds": args.folds,
        "parallel": workers,
        "started": started,
        "finished": _now(),
    }
    _write_json(out / "run_manifest.json", manifest)
    for run in metrics["runs"]:
        print(f"run {run['run'] + 1}: {100 * run['mean']:.2f}% +/- {100 * run['std']:.2f}")
    print(f"grand mean: {100 * metrics['grand_mean']:.2f}%")
    return 0


# --- attribute ---------------------------------------------------------------------


def load_run_artifacts(results: Path):
    """``[(models, splits), ...]`` per run, from a ``train`` output directory."""
    folds = _read_json(results / "folds.json", "fold assignments")
    artifacts = []
    for run in folds["runs"]:
        r = run["run"]
        splits = [FoldSplit(**s) for s in run["folds"]]
        models = []
        for f in range(len(splits)):
            path = _model_path(results, r, f)
            if not path.is_file():
                raise InvalidStateError(f"missing model for run {r}, fold {f}: {path}")
            models.append(load_model(path))
        artifacts.append((models, splits))
    return artifacts


def write_saliency_csv(path: Path, sal: PopulationSaliency):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cols = [f"mean_activation_class{c}_scaled" for c in range(sal.mean_activation.shape[0])]
        w.writerow(["node_index", *cols, "topk_count"])
        for v in range(sal.topk_counts.size):
            w.writerow([v, *(repr(float(x)) for x in sal.mean_activation[:, v]), int(sal.topk_counts[v])])


def read_saliency_csv(path: Path):
    if not path.is_file():
        raise MissingFileError(f"missing saliency table {path}", location=str(path))
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    return rows


def saliency_svg(sal: PopulationSaliency, title="") -> str:
    """Bar chart of top-k counts with per-class scaled mean-activation markers."""
    d = sal.topk_counts.size
    bar_w, gap, left, top, height = 24, 6, 50, 30, 220
    width = left + d * (bar_w + gap) + 20
    total_h = top + height + 50
    colors = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd"]
    cmax = max(int(sal.topk_counts.max()), 1)
    y0 = top + height
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{total_h}" '
        f'viewBox="0 0 {width} {total_h}">',
        f'<title>{escape(title or f"top-{sal.k} counts and scaled mean activations")}</title>',
        f'<line x1="{left}" y1="{y0}" x2="{width - 10}" y2="{y0}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{y0}" stroke="black"/>',
        f'<text x="{left - 6}" y="{top + 4}" font-size="10" text-anchor="end">{cmax}</text>',
        f'<text x="{left - 6}" y="{y0}" font-size="10" text-anchor="end">0</text>',
    ]
    for v in range(d):
        x = left + gap + v * (bar_w + gap)
        h = height * int(sal.topk_counts[v]) / cmax
        parts.append(
            f'<rect class="bar" data-node="{v}" x="{x}" y="{y0 - h:.3f}" width="{bar_w}" '
            f'height="{h:.3f}" fill="#bbbbbb"/>'
        )
        parts.append(
            f'<text x="{x + bar_w / 2}" y="{y0 + 14}" font-size="9" text-anchor="middle">{v}</text>'
        )
    for c in range(sal.mean_activation.shape[0]):
        color = colors[c % len(colors)]
        for v in range(d):
            cx = left + gap + v * (bar_w + gap) + bar_w / 2
            cy = y0 - height * float(sal.mean_activation[c, v])
            parts.append(
                f'<circle class="activation class{c}" cx="{cx}" cy="{cy:.3f}" r="3.5" fill="{color}"/>'
            )
        parts.append(
            f'<text x="{left + 10 + 80 * c}" y="{total_h - 10}" font-size="10" fill="{color}">'
            f"class {c}</text>"
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _write_cams(path: Path, cams, d):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "subject_id", "label", "predicted", "class", "top_nodes", *(f"node_{v}" for v in range(d))])
        for cam in cams:
            top = " ".join(str(i) for i in cam.top_nodes)
            for c in range(cam.scores.shape[0]):
                w.writerow(
                    [cam.run, cam.subject_id, cam.label, cam.predicted, c, top, *(repr(float(x)) for x in cam.scores[c])]
                )


def cmd_attribute(args):
    results = Path(args.results)
    manifest = _read_json(results / "run_manifest.json", "run manifest")
    data_dir = Path(args.data) if args.data else Path(manifest["dataset"]["path"])
    if dataset_checksum(data_dir) != manifest["dataset"]["sha256"]:
        raise ValidationError(f"dataset {data_dir} does not match the one used for training")
    dataset = load_dataset(data_dir)
    artifacts = load_run_artifacts(results)
    sal, cams = population_saliency(artifacts, dataset, args.top_k, keep_subject_cams=True)
    out = Path(args.out) if args.out else results
    out.mkdir(parents=True, exist_ok=True)
    write_saliency_csv(out / "saliency.csv", sal)
    (out / "saliency.svg").write_text(saliency_svg(sal), encoding="utf-8")
    if args.per_subject:
        _write_cams(out / "cams.csv", cams, dataset.num_nodes)
    ranked = sal.ranking()[: max(args.top_k, 5)]
    print("top nodes: " + ", ".join(f"{v} ({int(sal.topk_counts[v])})" for v in ranked))
    return 0


# --- report ------------------------------------------------------------------------


def format_report(metrics, saliency_rows) -> str:
    buf = io.StringIO()
    buf.write(f"{'Run':<6}{'Acc(%)':>10}{'Std(%)':>10}\n")
    for run in metrics["runs"]:
        buf.write(f"{run['run'] + 1:<6}{100 * run['mean']:>10.2f}{100 * run['std']:>10.2f}\n")
    buf.write(f"{'Avr':<6}{100 * metrics['grand_mean']:>10.2f}{100 * metrics['mean_run_std']:>10.2f}\n")
    ranked = sorted(saliency_rows, key=lambda r: (-int(r["topk_count"]), int(r["node_index"])))
    buf.write("\nMost important nodes (descending top-k count):\n")
    for pos, row in enumerate(ranked, 1):
        buf.write(f"{pos:>4}. node {int(row['node_index']):>4}  count {int(row['topk_count'])}\n")
    return buf.getvalue()


def cmd_report(args):
    results = Path(args.results)
    metrics = _read_json(results / "metrics.json", "metrics")
    sal_dir = Path(args.saliency) if args.saliency else results
    rows = read_saliency_csv(sal_dir / "saliency.csv")
    lr0 = _read_json(results / "run_manifest.json", "run manifest")["train_config"]["learning_rate"]
    for run in metrics["runs"]:
        for fold in run.get("folds", []):
            if replay_lr(lr0, fold["lr_events"]) != fold["final_lr"]:
                raise InvalidStateError(f"run {run['run']} fold {fold['fold']}: lr log does not replay")
    sys.stdout.write(format_report(metrics, rows))
    return 0


# --- argument parsing ----------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="graphcam", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a planted-saliency synthetic dataset")
    s.add_argument("--subjects", type=int, default=500)
    s.add_argument("--nodes", type=int, default=20)
    s.add_argument("--salient", type=int, default=3)
    s.add_argument("--effect", type=float, default=0.8)
    s.add_argument("--noise", type=float, default=0.5)
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="repeated stratified cross-validation")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=42)
    t.add_argument("--runs", type=int, default=10)
    t.add_argument("--folds", type=int, default=10)
    t.add_argument("--steps", type=int, default=500)
    t.add_argument("--batch", type=int, default=200)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--k-coeffs", type=int, default=9)
    t.add_argument("--channels", default="32,32,64,64,128")
    t.add_argument("--dropout", type=float, default=0.5)
    t.add_argument("--weight-decay", type=float, default=5e-4)
    t.add_argument("--eval-every", type=int, default=10)
    t.add_argument(
        "--parallel", type=int, nargs="?", const=0, default=None, metavar="WORKERS",
        help="train folds in a process pool (default: all CPUs, at least 2)",
    )
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("attribute", help="population-level saliency from trained folds")
    a.add_argument("--results", required=True)
    a.add_argument("--data", help="dataset directory (default: the one recorded at train time)")
    a.add_argument("--out", help="output directory (default: --results)")
    a.add_argument("--seed", type=int, default=42, help="unused; attribution is deterministic")
    a.add_argument("--top-k", type=int, default=3)
    a.add_argument("--per-subject", action="store_true", help="also write per-subject CAMs (cams.csv)")
    a.set_defaults(func=cmd_attribute)

    r = sub.add_parser("report", help="print the accuracy table and node ranking")
    r.add_argument("--results", required=True)
    r.add_argument("--saliency", help="directory holding saliency.csv (default: --results)")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except GraphCamError as exc:
        print(f"graphcam {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError) as exc:
        print(f"graphcam {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
