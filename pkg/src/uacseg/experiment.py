"""Evaluation, single training runs and ablation grids."""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import io
from .config import ExperimentConfig, apply_overrides
from .data import DomainPairDataset, generate_dataset, load_dataset
from .losses import MetricsWriter
from .model import SegModelSpec, model_forward
from .segcore import argmax_labels, confusion, miou
from .trainer import TrainState, load_checkpoint, new_train_state, save_checkpoint, train_step

log = logging.getLogger(__name__)


class ResumeError(RuntimeError):
    """Checkpoint does not belong to the requested configuration."""


def predict_labels(params, spec: SegModelSpec, images, batch_size: int = 32) -> np.ndarray:
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            x = torch.from_numpy(np.ascontiguousarray(images[i : i + batch_size]))
            out.append(argmax_labels(model_forward(params, spec, x).numpy()))
    return np.concatenate(out)


def evaluate(params, spec: SegModelSpec, images, labels) -> tuple[np.ndarray, float]:
    """Per-class IoU and mIoU accumulated over every image of a labelled split."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise ValueError("cannot evaluate on an empty split")
    if len(images) != len(labels):
        raise ValueError(f"{len(images)} images but {len(labels)} label maps")
    pred = predict_labels(params, spec, images)
    cm = confusion(pred, labels, spec.num_classes)
    return miou(cm)


def ensure_dataset(cfg: ExperimentConfig) -> DomainPairDataset:
    root = Path(cfg.data.root) if cfg.data.root else None
    if root is None:
        raise FileNotFoundError("config has no data.root")
    if not (root / "dataset.json").exists():
        log.info("generating dataset in %s", root)
        generate_dataset(root, cfg.data.scene, cfg.data.source_style, cfg.data.target_style, cfg.data.counts)
    return load_dataset(root)


def _file_digest(*paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()


def _truncate_csv(path: Path, max_step: int) -> None:
    """Keep header and rows whose ``step`` is below ``max_step``."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    kept = [rows[0]] + [r for r in rows[1:] if int(r[0]) < max_step]
    with open(path, "w", newline="") as f:
        csv.writer(f).writerows(kept)


EVAL_COLUMNS = ["step", "miou", "teacher_miou"]


def run_experiment(
    cfg: ExperimentConfig,
    out_dir,
    dataset: DomainPairDataset | None = None,
    resume=None,
) -> Path:
    """Train for ``t_max`` steps, evaluating every ``eval_every`` steps.

    Writes ``metrics.csv`` (per-step losses), ``eval.csv`` (mIoU-vs-step),
    ``checkpoints/{best,final}``, ``config.yaml`` and ``summary.json``.
    """
    from .config import dump_config

    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = dataset if dataset is not None else ensure_dataset(cfg)
    spec = cfg.model_spec()
    mcfg = cfg.method_config()
    seed = cfg.train.seed
    digest = cfg.training_digest()
    dump_config(cfg, out / "config.yaml")

    src_images, src_labels = data.source.images, data.source.labels
    tgt_images = data.target_train.images
    eval_images, eval_labels = data.target_eval.images, data.target_eval.labels
    bs = cfg.train.batch_size
    if len(src_images) < bs or len(tgt_images) < bs:
        raise ValueError(f"batch_size {bs} exceeds the number of source or target images")

    metrics_path = out / "metrics.csv"
    eval_path = out / "eval.csv"
    best = {"miou": -1.0, "step": -1}
    if resume is not None:
        state, manifest = load_checkpoint(resume, mcfg)
        if manifest.get("config_digest") != digest:
            raise ResumeError(f"checkpoint {resume} was written by a different configuration")
        data_rng = np.random.default_rng()
        data_rng.bit_generator.state = manifest["data_rng_state"]
        best = manifest.get("best", best)
        _truncate_csv(metrics_path, state.step)
        _truncate_csv(eval_path, state.step + 1)
        metrics = MetricsWriter(metrics_path, append=True)
        eval_fh = open(eval_path, "a", newline="")
        eval_w = csv.writer(eval_fh)
    else:
        state = new_train_state(spec, mcfg, seed=int(np.random.SeedSequence([seed, 2]).generate_state(1)[0]))
        data_rng = np.random.default_rng([seed, 1])
        metrics = MetricsWriter(metrics_path)
        eval_fh = open(eval_path, "w", newline="")
        eval_w = csv.writer(eval_fh)
        eval_w.writerow(EVAL_COLUMNS + [f"iou_{n}" for n in data.class_names])

    def manifest_extra(ev=None):
        return {
            "config_digest": digest,
            "data_rng_state": data_rng.bit_generator.state,
            "best": best,
            "metrics": ev or {},
        }

    def do_eval(step: int) -> dict:
        per_class, m = evaluate(state.student, spec, eval_images, eval_labels)
        _, tm = evaluate(state.teacher, spec, eval_images, eval_labels)
        eval_w.writerow([step, repr(m), repr(tm), *["" if np.isnan(v) else repr(float(v)) for v in per_class]])
        eval_fh.flush()
        if m > best["miou"]:
            best.update(miou=m, step=step)
            save_checkpoint(out / "checkpoints/best", state, manifest_extra({"miou": m, "teacher_miou": tm}))
        return {"miou": m, "teacher_miou": tm, "per_class_iou": [None if np.isnan(v) else float(v) for v in per_class]}

    t0 = time.perf_counter()
    last = None
    try:
        if state.step == 0:
            last = do_eval(0)
        while state.step < state.t_max:
            si = data_rng.choice(len(src_images), size=bs, replace=False)
            ti = data_rng.choice(len(tgt_images), size=bs, replace=False)
            state, report = train_step(state, (src_images[si], src_labels[si]), tgt_images[ti], mcfg, spec)
            metrics.write(report)
            if state.step % cfg.train.eval_every == 0 or state.step == state.t_max:
                last = do_eval(state.step)
                log.info("%s step %d mIoU %.4f (teacher %.4f)", cfg.name, state.step, last["miou"], last["teacher_miou"])
            if cfg.train.checkpoint_every and state.step % cfg.train.checkpoint_every == 0:
                save_checkpoint(out / f"checkpoints/step_{state.step:06d}", state, manifest_extra())
    finally:
        metrics.close()
        eval_fh.close()

    save_checkpoint(out / "checkpoints/final", state, manifest_extra(last))
    summary = {
        "name": cfg.name,
        "label": cfg.method_label,
        "seed": seed,
        "config_digest": digest,
        "t_max": state.t_max,
        "final_miou": last["miou"],
        "final_teacher_miou": last["teacher_miou"],
        "final_per_class_iou": last["per_class_iou"],
        "best_miou": best["miou"],
        "best_step": best["step"],
        "metrics_digest": _file_digest(metrics_path, eval_path),
    }
    summary["summary_digest"] = hashlib.sha256(json.dumps(summary, sort_keys=True).encode()).hexdigest()
    summary["wall_time_s"] = round(time.perf_counter() - t0, 3)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return out


def read_eval_curve(run_dir) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with open(Path(run_dir) / "eval.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    steps = np.array([int(r["step"]) for r in rows])
    return steps, np.array([float(r["miou"]) for r in rows]), np.array([float(r["teacher_miou"]) for r in rows])


def _cell_name(cell: dict) -> str:
    return "__".join(f"{k}={v}" for k, v in cell.items()) or "base"


def _run_cell(args):
    cfg, out = args
    try:
        run_dir = run_experiment(cfg, out)
        return json.loads((run_dir / "summary.json").read_text())
    except Exception as e:  # a failed run becomes a missing cell
        log.exception("run %s failed", out)
        return {"error": f"{type(e).__name__}: {e}"}


def ablation_suite(
    base_cfg: ExperimentConfig,
    grid: dict,
    seeds=(1, 2, 3),
    out_dir="ablation",
    workers: int = 1,
    metric: str = "final_miou",
) -> list[dict]:
    """Cartesian sweep over ``grid`` (dot-path key -> values) for every seed.

    All cells share ``base_cfg``'s dataset and the same seeds.  Writes
    ``ablation.csv`` with mean / min / max / std of ``metric`` per cell.
    """
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ValueError("ablation grid must name at least one key with at least one value")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ensure_dataset(base_cfg)
    keys = list(grid)
    cells = [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]

    jobs = []
    for cell in cells:
        for s in seeds:
            cfg = apply_overrides(base_cfg, {**cell, "train.seed": s})
            cfg.name = f"{_cell_name(cell)}/seed{s}"
            jobs.append((cell, s, cfg, out / _cell_name(cell) / f"seed{s}"))
    args = [(cfg, path) for _, _, cfg, path in jobs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_run_cell, args))
    else:
        results = [_run_cell(a) for a in args]

    rows = []
    for cell in cells:
        res = [(s, r) for (c, s, _, _), r in zip(jobs, results) if c == cell]
        vals = [r[metric] for _, r in res if "error" not in r]
        missing = [s for s, r in res if "error" in r]
        label = next((r["label"] for _, r in res if "label" in r), "")
        row = {**{k: cell[k] for k in keys}, "label": label, "n": len(vals),
               "mean": float(np.mean(vals)) if vals else float("nan"),
               "min": float(np.min(vals)) if vals else float("nan"),
               "max": float(np.max(vals)) if vals else float("nan"),
               "std": float(np.std(vals)) if vals else float("nan"),
               "per_seed": {s: r.get(metric) for s, r in res},
               "missing": missing}
        rows.append(row)

    with open(out / "ablation.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([*keys, "label", "n", f"{metric}_mean", "min", "max", "std", *[f"seed{s}" for s in seeds], "missing"])
        for r in rows:
            w.writerow([*[r[k] for k in keys], r["label"], r["n"], r["mean"], r["min"], r["max"], r["std"],
                        *["" if r["per_seed"].get(s) is None else r["per_seed"][s] for s in seeds],
                        " ".join(map(str, r["missing"]))])
    (out / "ablation.json").write_text(json.dumps(rows, indent=2, default=str))
    return rows
