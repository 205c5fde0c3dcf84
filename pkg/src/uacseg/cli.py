"""Command line entry point: ``uacseg generate-data | train | evaluate | ablate | plot``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, apply_overrides, load_config

log = logging.getLogger("uacseg")

OUTPUT_ROOT_ENV = "UACSEG_OUTPUT_ROOT"

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_DATA, EXIT_RESUME = 0, 1, 2, 3, 4


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config, args.override) if args.config else apply_overrides(ExperimentConfig(), args.override or [])
    if getattr(args, "seed", None) is not None:
        cfg = apply_overrides(cfg, {"train.seed": args.seed})
    if cfg.data.root is None:
        cfg = apply_overrides(cfg, {"data.root": str(output_root() / "data")})
    return cfg


def cmd_generate_data(args) -> int:
    from .data import generate_dataset

    cfg = _config(args)
    root = Path(args.out) if args.out else Path(cfg.data.root)
    d = cfg.data
    generate_dataset(root, d.scene, d.source_style, d.target_style, d.counts)
    print(root)
    return EXIT_OK


def cmd_train(args) -> int:
    from .experiment import run_experiment

    cfg = _config(args)
    out = Path(args.out) if args.out else output_root() / cfg.name / f"seed{cfg.train.seed}"
    if args.resume and not args.out:
        # resuming from <run>/checkpoints/<name> continues in <run>
        out = Path(args.resume).resolve().parent.parent
    run = run_experiment(cfg, out, resume=args.resume)
    summary = json.loads((run / "summary.json").read_text())
    print(f"{summary['label']} seed {summary['seed']}: final mIoU {summary['final_miou']:.4f}, "
          f"best {summary['best_miou']:.4f} at step {summary['best_step']} -> {run}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from . import io
    from . import uncertainty as unc
    from .data import load_dataset
    from .experiment import predict_labels
    from .model import load_snapshot, model_forward
    from .segcore import confusion, miou

    import torch

    ckpt = Path(args.checkpoint)
    if not args.config and (ckpt.parent.parent / "config.yaml").exists():
        args.config = str(ckpt.parent.parent / "config.yaml")
    cfg = _config(args)
    spec = cfg.model_spec()
    which = "teacher" if args.teacher else "student"
    params = load_snapshot(ckpt / f"{which}.bin")
    data = load_dataset(cfg.data.root)
    images, labels = data.target_eval.images, data.target_eval.labels

    pred = predict_labels(params, spec, images)
    cm = confusion(pred, labels, spec.num_classes)
    per_class, m = miou(cm)
    out = Path(args.out) if args.out else ckpt / f"eval_{which}"
    out.mkdir(parents=True, exist_ok=True)
    io.write_confusion_csv(out / "confusion.csv", cm, data.class_names)
    io.write_iou_csv(out / "iou.csv", per_class, m, data.class_names)
    report = {"checkpoint": str(ckpt), "model": which, "miou": m,
              "per_class_iou": {n: (None if np.isnan(v) else float(v)) for n, v in zip(data.class_names, per_class)}}
    (out / "eval.json").write_text(json.dumps(report, indent=2))

    if args.save_maps:
        mcfg = cfg.method_config()
        manifest = json.loads((ckpt / "manifest.json").read_text())
        step = min(int(manifest.get("step", mcfg.t_max)), mcfg.t_max)
        rng = np.random.default_rng(cfg.train.seed)
        ln_c = float(np.log(spec.num_classes))
        maps = out / "maps"
        maps.mkdir(exist_ok=True)

        def fn(x):
            with torch.no_grad():
                return model_forward(params, spec, torch.from_numpy(np.ascontiguousarray(x))).numpy()

        for i, img in enumerate(images[: args.save_maps]):
            mean, _ = unc.stochastic_ensemble(fn, img, mcfg.uncertainty, rng)
            h = unc.predictive_entropy(mean)
            R = unc.dynamic_threshold(step, mcfg.threshold, unc.z_sup(h, mcfg.threshold.z_sup_mode, spec.num_classes))
            io.save_labels(maps / f"{i:06d}_pred.png", pred[i])
            io.save_entropy(maps / f"{i:06d}_entropy.png", h, vmax=ln_c)
            io.save_mask(maps / f"{i:06d}_confident.png", unc.uncertainty_mask(h, R))
    print(f"{which} mIoU {m:.4f} -> {out}")
    return EXIT_OK


def _parse_grid(items) -> dict:
    import yaml

    grid = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"grid entry {item!r} is not key=v1,v2,...")
        k, v = item.split("=", 1)
        grid[k.strip()] = [yaml.safe_load(x) for x in v.split(",")]
    return grid


def cmd_ablate(args) -> int:
    from .experiment import ablation_suite

    cfg = _config(args)
    grid = _parse_grid(args.grid) or {"method": ["source_only", "mean_teacher", "uncertainty", "classdrop", "full"]}
    seeds = [int(s) for s in args.seeds.split(",")]
    out = Path(args.out) if args.out else output_root() / f"{cfg.name}_ablation"
    rows = ablation_suite(cfg, grid, seeds=seeds, out_dir=out, workers=args.workers, metric=args.metric)
    for r in rows:
        cell = ", ".join(f"{k}={r[k]}" for k in grid)
        print(f"{cell}: {args.metric} mean {r['mean']:.4f} [{r['min']:.4f}, {r['max']:.4f}] n={r['n']}")
    return EXIT_OK


def cmd_plot(args) -> int:
    from .plot import plot_curves

    labels = args.labels.split(",") if args.labels else None
    path = plot_curves(args.runs, args.out, labels=labels, teacher=args.teacher, title=args.title)
    print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uacseg", description="Uncertainty-aware Mean-Teacher segmentation workbench")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="YAML config file")
        sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="dot-path override, repeatable (method=<preset> selects a method)")
        if seed:
            sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help=f"output directory (default under ${OUTPUT_ROOT_ENV} or ./runs)")

    sp = sub.add_parser("generate-data", help="render the synthetic source/target dataset")
    common(sp, seed=False)
    sp.set_defaults(fn=cmd_generate_data)

    sp = sub.add_parser("train", help="train one configuration")
    common(sp)
    sp.add_argument("--resume", help="checkpoint directory to continue from")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("evaluate", help="score a checkpoint on the target-eval split")
    sp.add_argument("checkpoint")
    common(sp, seed=False)
    sp.add_argument("--teacher", action="store_true", help="evaluate the teacher instead of the student")
    sp.add_argument("--save-maps", type=int, default=0, metavar="N",
                    help="also write prediction, entropy and confidence maps for the first N images")
    sp.set_defaults(fn=cmd_evaluate, seed=None)

    sp = sub.add_parser("ablate", help="sweep a grid of overrides over several seeds")
    common(sp, seed=False)
    sp.add_argument("--grid", action="append", metavar="KEY=V1,V2", help="grid axis, repeatable")
    sp.add_argument("--seeds", default="1,2,3")
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--metric", default="final_miou", choices=["final_miou", "best_miou"])
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("plot", help="plot mIoU vs step for run directories")
    sp.add_argument("runs", nargs="+")
    sp.add_argument("--out", required=True)
    sp.add_argument("--labels")
    sp.add_argument("--teacher", action="store_true")
    sp.add_argument("--title")
    sp.set_defaults(fn=cmd_plot)
    return p


def main(argv=None) -> int:
    from .data import LabelAccessError
    from .experiment import ResumeError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ResumeError as e:
        print(f"resume error: {e}", file=sys.stderr)
        return EXIT_RESUME
    except (FileNotFoundError, LabelAccessError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # noqa: BLE001
        log.debug("unhandled error", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
