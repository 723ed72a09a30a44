"""Experiment runner front end.

Subcommands: generate, train, analyze, ablate. The output root comes from
--out, the CURRIDET_OUT environment variable, or ./curridet_out, and has
the layout:

    <root>/dataset/{train,val,test}/   images.npy labels.txt manifest.json
    <root>/runs/<name>/fold<f>_seed<s>/  history.jsonl split.json
                                         ckpt_epoch_*.txt teacher_final.txt
                                         summary.json
    <root>/runs/<name>/summary.txt       aggregate table

Exit codes: 0 success, 2 config error, 3 IO error, 4 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import detector as det
from .config import (
    ConfigError,
    ExperimentConfig,
    build_experiment,
    extract_ablation_cells,
    parse_flat,
    serialize_flat,
)
from .datagen import Scene, generate_dataset, load_dataset, save_dataset
from .engine import (
    detect_cycle_regime,
    evaluate_detector,
    read_history,
    run_training,
    write_history,
    _predictions_for,
)
from .geometry import iou
from .metrics import (
    DEFAULT_THRESHOLD_GRID,
    PRPoint,
    best_threshold,
    f_beta,
    fit_arctan_schedule,
    match_at_iou,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_RUNTIME = 4

ENV_OUT = "CURRIDET_OUT"


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _root(args) -> str:
    return args.out or os.environ.get(ENV_OUT) or "./curridet_out"


def _dataset_dir(root: str) -> str:
    return os.path.join(root, "dataset")


# ---------------------------------------------------------------- generate


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    root = _root(args)
    base_seed = int(cfg["dataset.seed"])
    sizes = {
        "train": cfg["dataset.n_train"],
        "val": cfg["dataset.n_val"],
        "test": cfg["dataset.n_test"],
    }
    for i, (name, size) in enumerate(sizes.items()):
        dcfg = cfg.dataset_config(size)
        scenes = generate_dataset(dcfg, base_seed + i, id_prefix=name[0])
        save_dataset(os.path.join(_dataset_dir(root), name), scenes, dcfg, base_seed + i)
    print(f"dataset written to {_dataset_dir(root)}")
    return EXIT_OK


# ------------------------------------------------------------------- train


def _load_config(args) -> ExperimentConfig:
    if not args.config:
        raise CliError("--config is required", EXIT_CONFIG)
    if not os.path.exists(args.config):
        raise CliError(f"config not found: {args.config}", EXIT_IO)
    with open(args.config) as fh:
        text = fh.read()
    try:
        return build_experiment(parse_flat(text))
    except ConfigError as e:
        raise CliError(f"invalid config: {e}", EXIT_CONFIG)


def _load_splits(root: str) -> Dict[str, List[Scene]]:
    out = {}
    for name in ("train", "val", "test"):
        d = os.path.join(_dataset_dir(root), name)
        if not os.path.exists(os.path.join(d, "manifest.json")):
            raise CliError(
                f"dataset split {name!r} missing at {d}; run `generate` first",
                EXIT_IO,
            )
        out[name], _ = load_dataset(d)
    return out


def _run_dir(root: str, name: str, fold: int, seed: int) -> str:
    return os.path.join(root, "runs", name, f"fold{fold}_seed{seed}")


def _train_task(payload) -> Tuple[int, int, dict]:
    """One (fold, seed) training run; separate-process safe."""
    flat, fold, seed, root = payload
    cfg = build_experiment(flat)
    data = _load_splits(root)
    run_cfg = cfg.run_config(fold_seed=fold, seed=seed)
    arts = run_training(run_cfg, data["train"], data["val"])
    rdir = _run_dir(root, str(cfg["run.name"]), fold, seed)
    os.makedirs(rdir, exist_ok=True)
    write_history(os.path.join(rdir, "history.jsonl"), arts.history)
    with open(os.path.join(rdir, "split.json"), "w") as fh:
        json.dump(
            {
                "labelled": list(arts.split.labelled),
                "unlabelled": list(arts.split.unlabelled),
                "labelled_ratio": arts.split.labelled_ratio,
                "fold_seed": arts.split.fold_seed,
            },
            fh,
            sort_keys=True,
        )
        fh.write("\n")
    for epoch, params in arts.checkpoints.items():
        det.save_params(os.path.join(rdir, f"ckpt_epoch_{epoch:05d}.txt"), params)
    det.save_params(os.path.join(rdir, "teacher_final.txt"), arts.state.teacher)
    rec = evaluate_detector(arts.state.teacher, data["test"])
    regime = detect_cycle_regime(arts.history)
    summary = {
        "fold": fold,
        "seed": seed,
        "map": rec.map,
        "ap50": rec.ap50,
        "ap75": rec.ap75,
        "regime": regime,
    }
    with open(os.path.join(rdir, "summary.json"), "w") as fh:
        json.dump(summary, fh, sort_keys=True)
        fh.write("\n")
    return fold, seed, summary


def _mean_std(vals: Sequence[float]) -> str:
    m = statistics.mean(vals)
    s = statistics.stdev(vals) if len(vals) > 1 else 0.0
    return f"{m:.4f} +/- {s:.4f}"


def cmd_train(args) -> int:
    cfg = _load_config(args)
    root = _root(args)
    _load_splits(root)  # fail early if the dataset is missing
    folds = args.folds if args.folds is not None else int(cfg["split.folds"])
    seeds = (
        tuple(int(s) for s in args.seeds.split(",")) if args.seeds else cfg.seeds
    )
    tasks = [
        (dict(cfg.flat), fold, seed, root) for fold in range(folds) for seed in seeds
    ]
    if args.jobs and args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            results = list(ex.map(_train_task, tasks))
    else:
        results = [_train_task(t) for t in tasks]

    label = "supervised baseline" if cfg.is_supervised_baseline() else "semi-supervised"
    lines = [f"run {cfg['run.name']} ({label})"]
    for fold, seed, s in results:
        lines.append(
            f"  fold {fold} seed {seed}: mAP {s['map']:.4f} AP50 {s['ap50']:.4f} "
            f"AP75 {s['ap75']:.4f} regime {s['regime']}"
        )
    for key in ("map", "ap50", "ap75"):
        lines.append(f"  {key}: {_mean_std([s[key] for _, _, s in results])}")
    text = "\n".join(lines) + "\n"
    summary_path = os.path.join(root, "runs", str(cfg["run.name"]), "summary.txt")
    os.makedirs(os.path.dirname(summary_path), exist_ok=True)
    with open(summary_path, "w") as fh:
        fh.write(text)
    print(text, end="")
    return EXIT_OK


# ----------------------------------------------------------------- analyze


def _micro_pr(preds_per_scene, gts, thr) -> PRPoint:
    tp = fp = n_gt = 0
    for preds, gt in zip(preds_per_scene, gts):
        m = match_at_iou(preds, gt, thr)
        tp += m.n_tp
        fp += m.n_fp
        n_gt += m.n_gt
    p = tp / (tp + fp) if (tp + fp) else 1.0
    r = tp / n_gt if n_gt else 1.0
    return PRPoint(p, r)


def cmd_analyze(args) -> int:
    if not args.run_dir or not os.path.isdir(args.run_dir):
        raise CliError(f"run directory not found: {args.run_dir}", EXIT_IO)
    root = _root(args)
    ckpts = sorted(
        f for f in os.listdir(args.run_dir) if f.startswith("ckpt_epoch_")
    )
    if not ckpts:
        raise CliError("no checkpoints in run directory", EXIT_IO)
    with open(os.path.join(args.run_dir, "split.json")) as fh:
        split = json.load(fh)
    train_scenes, _ = load_dataset(os.path.join(_dataset_dir(root), "train"))
    pool = [train_scenes[i] for i in split["unlabelled"]]
    gts = [s.labels for s in pool]
    total_epochs = None
    hist_path = os.path.join(args.run_dir, "history.jsonl")
    if os.path.exists(hist_path):
        total_epochs = len(read_history(hist_path))

    out_dir = os.path.join(args.run_dir, "analysis")
    os.makedirs(out_dir, exist_ok=True)
    scatter = ["epoch,zeta,gt_iou"]
    prec_rows = ["epoch,precision_iou50,precision_iou75"]
    grid = DEFAULT_THRESHOLD_GRID
    pr_acc = {s: [] for s in grid}  # per threshold: list of (p50, p75, r50, r75)
    best_rows = ["epoch,epoch_frac,best_sigma,f_beta"]
    fit_points = []
    for name in ckpts:
        epoch = int(name[len("ckpt_epoch_") : -len(".txt")])
        params = det.load_params(os.path.join(args.run_dir, name))
        preds_per_scene, _ = _predictions_for(params, pool, floor=0.0)
        for preds, gt in zip(preds_per_scene, gts):
            for p in preds:
                same = [b for b, c in zip(gt.boxes, gt.classes) if c == p.class_id]
                gt_iou = max((iou(p.box, b) for b in same), default=0.0)
                scatter.append(f"{epoch},{p.score!r},{gt_iou!r}")
        pr50 = _micro_pr(preds_per_scene, gts, 0.5)
        pr75 = _micro_pr(preds_per_scene, gts, 0.75)
        prec_rows.append(f"{epoch},{pr50.precision!r},{pr75.precision!r}")
        for s in grid:
            kept = [[p for p in preds if p.score >= s] for preds in preds_per_scene]
            a = _micro_pr(kept, gts, 0.5)
            b = _micro_pr(kept, gts, 0.75)
            pr_acc[s].append((a.precision, b.precision, a.recall, b.recall))
        sigma, fb = best_threshold(preds_per_scene, gts, beta=0.5, grid=grid)
        frac = epoch / total_epochs if total_epochs else 0.0
        best_rows.append(f"{epoch},{frac!r},{sigma!r},{fb!r}")
        fit_points.append((frac, sigma))

    pr_rows = [
        "sigma,precision_iou50,precision_iou75,recall_iou50,recall_iou75"
    ]
    for s in grid:
        cols = np.array(pr_acc[s]).mean(axis=0)
        pr_rows.append(f"{s!r}," + ",".join(repr(float(c)) for c in cols))

    _write_lines(os.path.join(out_dir, "scatter_iou_vs_zeta.csv"), scatter)
    _write_lines(os.path.join(out_dir, "precision_vs_epoch.csv"), prec_rows)
    _write_lines(os.path.join(out_dir, "pr_vs_threshold.csv"), pr_rows)
    _write_lines(os.path.join(out_dir, "best_threshold.csv"), best_rows)
    if len(fit_points) >= 3:
        a, b, k = fit_arctan_schedule(fit_points)
        with open(os.path.join(out_dir, "arctan_fit.json"), "w") as fh:
            json.dump(
                {"v_start": a, "v_end": b, "steepness": k}, fh, sort_keys=True
            )
            fh.write("\n")
    print(f"analysis written to {out_dir}")
    return EXIT_OK


def _write_lines(path: str, lines: List[str]) -> None:
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# ------------------------------------------------------------------ ablate


def cmd_ablate(args) -> int:
    if not args.config or not os.path.exists(args.config):
        raise CliError("ablation grid config required", EXIT_IO)
    with open(args.config) as fh:
        flat = parse_flat(fh.read())
    axis, cells = extract_ablation_cells(flat)
    if not cells:
        raise CliError("ablation grid has no cells", EXIT_CONFIG)
    root = _root(args)
    _load_splits(root)
    seeds = (
        tuple(int(s) for s in args.seeds.split(","))
        if args.seeds
        else None
    )
    rows = [f"axis: {axis}", "cell\tmedian_mAP\tmedian_AP50\tregimes"]
    for name in sorted(cells):
        merged = dict(flat)
        merged.update(cells[name])
        merged["run.name"] = f"ablate_{axis}_{name}"
        try:
            cfg = build_experiment(merged)
        except ConfigError as e:
            rows.append(f"{name}\tSKIPPED: {e}")
            print(f"cell {name} skipped: {e}", file=sys.stderr)
            continue
        cell_seeds = seeds if seeds is not None else cfg.seeds
        tasks = [(dict(cfg.flat), 0, s, root) for s in cell_seeds]
        if args.jobs and args.jobs > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as ex:
                results = list(ex.map(_train_task, tasks))
        else:
            results = [_train_task(t) for t in tasks]
        maps = sorted(s["map"] for _, _, s in results)
        ap50s = sorted(s["ap50"] for _, _, s in results)
        regimes = ",".join(s["regime"] for _, _, s in results)
        rows.append(
            f"{name}\t{statistics.median(maps):.4f}\t"
            f"{statistics.median(ap50s):.4f}\t{regimes}"
        )
    table = "\n".join(rows) + "\n"
    out_path = os.path.join(root, "runs", f"ablate_{axis}.txt")
    os.makedirs(os.path.dirname(out_path), exist_ok=True)
    with open(out_path, "w") as fh:
        fh.write(table)
    print(table, end="")
    return EXIT_OK


# -------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="curridet",
        description="dynamic-curriculum semi-supervised detection experiments",
    )
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn in (
        ("generate", cmd_generate),
        ("train", cmd_train),
        ("analyze", cmd_analyze),
        ("ablate", cmd_ablate),
    ):
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="experiment config file")
        sp.add_argument("--out", help=f"output root (default ${ENV_OUT} or ./curridet_out)")
        sp.add_argument("--seeds", help="comma-separated seed list override")
        sp.add_argument("--folds", type=int, help="number of data folds")
        sp.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
        if name == "analyze":
            sp.add_argument("run_dir", help="run directory with checkpoints")
        sp.set_defaults(fn=fn)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO
    except Exception as e:  # noqa: BLE001 - map anything else to runtime failure
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
