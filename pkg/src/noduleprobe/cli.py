"""Command-line entry point.

    noduleprobe <command> [--config FILE] [--set section.key=value ...] [options]

Commands: preprocess, synth-data, train-stage1, train-stage2, evaluate, sweep,
export-embeddings, report. Every command except ``report`` writes into a run
directory ``<root>/<command>-<hash>`` holding the resolved ``config.ini`` and a
``fingerprint.json``. The root comes from ``--output-root``, ``[output] root``,
the ``NODULEPROBE_OUTPUT`` environment variable, or ``./runs``.

Exit codes: 0 success, 2 invalid configuration, 1 runtime failure (details in
``error.json`` inside the run directory).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import platform
import sys
import traceback
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config
from .data import (NoduleDataset, generate_synthetic_dataset, mask_annotations, preprocess, read_dataset,
                   read_split, split_nodules, write_dataset, write_mask)
from .distill import train_stage1
from .evaluation import (REPORTED, MetricsReport, annotation_sweep, evaluate, export_embeddings, fingerprint,
                         read_sweep_csv, write_sweep_csv)
from .model import EncoderConfig, freeze, init_parameters, load_into, read_checkpoint
from .predict import load_probe, save_probe, train_end_to_end, train_stage2

logger = logging.getLogger("noduleprobe")
OUTPUT_ENV = "NODULEPROBE_OUTPUT"


def source_digest() -> str:
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def output_root(args, cfg: ExperimentConfig) -> Path:
    return Path(args.output_root or cfg.output.root or os.environ.get(OUTPUT_ENV) or "runs")


def make_run_dir(args, cfg: ExperimentConfig, extra: dict) -> Path:
    ident = fingerprint({"config": cfg.to_ini(), "seed": cfg.output.seed, "command": args.command, **extra})[:12]
    run_dir = output_root(args, cfg) / f"{args.command}-{ident}"
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.write(run_dir / "config.ini")
    (run_dir / "fingerprint.json").write_text(json.dumps({
        "run_id": run_dir.name,
        "command": args.command,
        "arguments": extra,
        "package_version": __version__,
        "source_digest": source_digest(),
        "python": platform.python_version(),
        "torch": torch.__version__,
        "numpy": np.__version__,
    }, indent=2, sort_keys=True))
    return run_dir


def _dataset(cfg: ExperimentConfig):
    if not cfg.data.dir:
        raise ConfigError("data.dir is not set")
    root = Path(cfg.data.dir)
    ds = read_dataset(root)
    if (root / "splits.json").exists():
        split = read_split(root)
    else:
        split = split_nodules(ds.unique_nodules(), cfg.data.split_seed, cfg.data.train_fraction,
                              ds.nodule_labels() if cfg.data.stratified else None)
    return ds, split


def _load_encoder(path):
    path = Path(path)
    if path.is_dir():
        path = path / "checkpoint.pth"
    obj = read_checkpoint(path)
    enc_cfg = EncoderConfig(**obj["config"]["encoder"])
    encoder = init_parameters(enc_cfg, None)
    load_into(encoder, obj, prefix="encoder.")
    return freeze(encoder)


def _write_split(ds: NoduleDataset, cfg: ExperimentConfig):
    return split_nodules(ds.unique_nodules(), cfg.data.split_seed, cfg.data.train_fraction,
                         ds.nodule_labels() if cfg.data.stratified else None)


# ---------------------------------------------------------------------------
# commands


def cmd_synth_data(args, cfg, run_dir):
    nodules = generate_synthetic_dataset(cfg.data.synthetic_n, cfg.data.synthetic_seed, noise=cfg.data.synthetic_noise)
    ds = NoduleDataset.from_nodules(nodules)
    ds.meta = {"source": "synthetic", "seed": cfg.data.synthetic_seed}
    target = Path(args.out or cfg.data.dir or run_dir / "dataset")
    write_dataset(ds, target, _write_split(ds, cfg))
    return {"dataset": str(target), "n_images": len(ds)}


def cmd_preprocess(args, cfg, run_dir):
    ds = preprocess(args.raw, window=tuple(cfg.data.window), max_thickness_mm=cfg.data.max_thickness_mm)
    target = Path(args.out or cfg.data.dir or run_dir / "dataset")
    write_dataset(ds, target, _write_split(ds, cfg))
    return {"dataset": str(target), "n_images": len(ds)}


def cmd_train_stage1(args, cfg, run_dir):
    ds, split = _dataset(cfg)
    train = ds.subset(split.train_nodule_ids)
    _, log = train_stage1(train, cfg.views, cfg.encoder, cfg.head, cfg.schedule, cfg.temperature,
                          seed=cfg.output.seed, out_dir=run_dir, max_steps=args.max_steps)
    return {"checkpoint": str(run_dir / "checkpoint.pth"), "steps": len(log),
            "initial_loss": log[0]["loss"], "final_loss": log[-1]["loss"]}


def cmd_train_stage2(args, cfg, run_dir):
    ds, split = _dataset(cfg)
    encoder = _load_encoder(args.stage1)
    mask = mask_annotations(split, args.fraction, cfg.output.seed)
    write_mask(mask, run_dir)
    probe, log = train_stage2(encoder, ds, mask, cfg.probe, seed=cfg.output.seed,
                              log_path=run_dir / "metrics.jsonl")
    save_probe(run_dir / "probe.pth", probe, {"fraction": args.fraction})
    return {"probe": str(run_dir / "probe.pth"), "final_loss": log[-1]["loss"]}


def cmd_evaluate(args, cfg, run_dir):
    ds, split = _dataset(cfg)
    encoder = _load_encoder(args.stage1)
    probe = load_probe(args.probe) if args.probe else None
    if args.mode == "trained" and probe is None:
        raise ConfigError("--mode trained needs --probe")
    k = args.k if args.k is not None else (cfg.eval.k[0] if cfg.eval.k else None)
    mask = mask_annotations(split, args.fraction, cfg.output.seed) if args.fraction < 1 else None
    report = evaluate(encoder, ds, split, args.mode, k=k, probe=probe, mask=mask,
                      source=cfg.eval.knn_source if args.mode == "knn" else None,
                      weighted=cfg.eval.weighted_knn, config_fingerprint=cfg.digest())
    report.write(run_dir / "metrics.json")
    return {"metrics": str(run_dir / "metrics.json"), "malignancy_accuracy": report.malignancy_accuracy}


def cmd_sweep(args, cfg, run_dir):
    ds, split = _dataset(cfg)
    encoder = _load_encoder(args.stage1)
    fractions = tuple(float(f) for f in args.fractions.split(",")) if args.fractions else cfg.eval.fractions
    seeds = tuple(int(s) for s in args.seeds.split(",")) if args.seeds else cfg.eval.seeds
    baseline = None
    if args.baseline:
        def baseline(dataset, mask, seed):
            return train_end_to_end(dataset, mask, seed=seed, epochs=args.baseline_epochs)
    tasks = ("malignancy",) if args.tasks == "malignancy" else ("malignancy", *REPORTED)
    rows = annotation_sweep(encoder, ds, split, fractions, seeds, cfg.probe, baseline, tasks)
    write_sweep_csv(rows, run_dir / "sweep.csv")
    return {"sweep": str(run_dir / "sweep.csv"), "rows": len(rows)}


def cmd_export_embeddings(args, cfg, run_dir):
    ds, split = _dataset(cfg)
    encoder = _load_encoder(args.stage1)
    table = export_embeddings(encoder, ds, split, run_dir / "embeddings.tsv", source=args.source,
                              project=not args.no_tsne, seed=cfg.output.seed)
    return {"embeddings": str(run_dir / "embeddings.tsv"), "rows": len(table.nodule_ids)}


def cmd_report(args):
    """Summarise run directories into a table plus plot-ready CSVs."""
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table, dist_rows, series, missing = [], [], [], []
    for run in args.runs:
        run = Path(run)
        found = False
        if (run / "metrics.json").exists():
            rep = MetricsReport.read(run / "metrics.json")
            label = f"{run.name} ({rep.mode}{'' if rep.k is None else f', k={rep.k}'}, {rep.annotation_fraction:g})"
            table.append((label, rep))
            dist_rows.append([label, *rep.count_distribution])
            found = True
        if (run / "sweep.csv").exists():
            series += [{"run": run.name, **r} for r in read_sweep_csv(run / "sweep.csv")]
            found = True
        if not found:
            missing.append(str(run))
            logger.warning("skipping %s: no metrics.json or sweep.csv", run)

    lines = []
    if table:
        head = ["run", *REPORTED, "malignancy"]
        lines.append("| " + " | ".join(head) + " |")
        lines.append("|" + "---|" * len(head))
        for label, rep in table:
            vals = [f"{rep.attribute_accuracy[a]:.2f}" for a in REPORTED] + [f"{rep.malignancy_accuracy:.2f}"]
            lines.append("| " + " | ".join([label, *vals]) + " |")
    if series:
        lines.append("")
        lines.append("Annotation sweep (x axis: fraction, log scale):")
        agg = {}
        for r in series:
            agg.setdefault((r["run"], r["strategy"], r["task"], r["fraction"]), []).append(r["accuracy"])
        for (run, strategy, task, fraction), accs in sorted(agg.items()):
            lines.append(f"  {run} {strategy} {task} fraction={fraction:g}: "
                         f"{np.mean(accs):.2f} (n={len(accs)})")
    if missing:
        lines.append("")
        lines.append("Skipped (no reports): " + ", ".join(missing))
    (out / "summary.md").write_text("\n".join(lines) + "\n")
    with open(out / "count_distribution.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", *[f"p_{j}" for j in range(9)]])
        w.writerows(dist_rows)
    with open(out / "sweep_series.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "strategy", "task", "fraction", "log10_fraction", "mean_accuracy", "n_seeds"])
        agg = {}
        for r in series:
            agg.setdefault((r["run"], r["strategy"], r["task"], r["fraction"]), []).append(r["accuracy"])
        for (run, strategy, task, fraction), accs in sorted(agg.items()):
            w.writerow([run, strategy, task, fraction, np.log10(fraction), np.mean(accs), len(accs)])
    print("\n".join(lines))
    return {"summary": str(out / "summary.md"), "skipped": missing}


COMMANDS = {
    "preprocess": cmd_preprocess,
    "synth-data": cmd_synth_data,
    "train-stage1": cmd_train_stage1,
    "train-stage2": cmd_train_stage2,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "export-embeddings": cmd_export_embeddings,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="noduleprobe", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI experiment config")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config value (repeatable)")
        p.add_argument("--output-root", help=f"run directory root (default ${OUTPUT_ENV} or ./runs)")
        return p

    p = common(sub.add_parser("preprocess", help="raw annotations + volumes -> patch dataset"))
    p.add_argument("--raw", required=True, help="directory with annotations.csv and volumes/")
    p.add_argument("--out", help="dataset directory (default data.dir)")
    p = common(sub.add_parser("synth-data", help="write a synthetic nodule dataset"))
    p.add_argument("--out", help="dataset directory (default data.dir)")
    p = common(sub.add_parser("train-stage1", help="self-distillation pretraining"))
    p.add_argument("--max-steps", type=int, default=None)
    for name, helptext in (("train-stage2", "fit attribute and malignancy probes"),
                           ("evaluate", "k-NN or probe evaluation"),
                           ("sweep", "annotation-reduction sweep"),
                           ("export-embeddings", "test-set features + t-SNE as TSV")):
        p = common(sub.add_parser(name, help=helptext))
        p.add_argument("--stage1", required=True, help="stage-1 checkpoint or run directory")
        if name == "train-stage2":
            p.add_argument("--fraction", type=float, default=1.0)
        if name == "evaluate":
            p.add_argument("--mode", choices=("knn", "trained"), default="knn")
            p.add_argument("--k", type=int)
            p.add_argument("--probe", help="probe checkpoint for --mode trained")
            p.add_argument("--fraction", type=float, default=1.0, help="annotated fraction for k-NN votes")
        if name == "sweep":
            p.add_argument("--fractions", help="comma-separated, e.g. 0.01,0.1,1.0")
            p.add_argument("--seeds", help="comma-separated mask seeds")
            p.add_argument("--tasks", choices=("malignancy", "all"), default="malignancy")
            p.add_argument("--baseline", action="store_true", help="add end-to-end baseline rows")
            p.add_argument("--baseline-epochs", type=int, default=30)
        if name == "export-embeddings":
            p.add_argument("--source", choices=("final_token", "concat_last_4"), default="final_token")
            p.add_argument("--no-tsne", action="store_true")
    p = sub.add_parser("report", help="summarise run directories")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", default="report")
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "report":
        print(json.dumps(cmd_report(args)))
        return 0
    try:
        cfg = load_config(args.config, args.set)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    extra = {k: v for k, v in vars(args).items() if k not in ("config", "set", "output_root", "command")}
    run_dir = make_run_dir(args, cfg, extra)
    try:
        result = COMMANDS[args.command](args, cfg, run_dir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every failure maps to exit code 1
        dump = run_dir / "error.json"
        dump.write_text(json.dumps({"error": repr(exc), "traceback": traceback.format_exc()}, indent=2))
        print(f"error: {exc} (details: {dump})", file=sys.stderr)
        return 1
    result["run_dir"] = str(run_dir)
    (run_dir / "result.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    print(json.dumps(result))
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
