"""Command-line surface: dataset generation, training, label expansion,
evaluation, and per-structure prediction with overlays."""

from __future__ import annotations

import argparse
import csv
import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from .backbone import preprocess
from .config import load_config
from .errors import (ConfigError, DataError, DuplicateStructure, InvalidInput,
                     NumericalError, ShapeError, StructsegError, UnknownStructure,
                     UsageError)
from .overlay import write_overlays
from .trainer import (cache_volume, evaluate, expand_labels, load_checkpoint,
                      predict_volume, save_checkpoint, train)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_NUMERICAL = 5


def _git_hash() -> str:
    try:
        return subprocess.run(
            ["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5
        ).stdout.strip() or "unknown"
    except Exception:
        return "unknown"


def _write_json(path: Path, payload: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))


def _write_run_manifest(out_dir: Path, args: argparse.Namespace, t0: float):
    _write_json(
        out_dir / "run_manifest.json",
        {
            "args": {k: v for k, v in vars(args).items() if k != "func"},
            "seed": getattr(args, "seed", None) or getattr(args, "seeds", None),
            "git_hash": _git_hash(),
            "wall_time_s": time.time() - t0,
        },
    )


def _write_history_csv(path: Path, history):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["epoch", "train_loss", "val_miou"])
        writer.writeheader()
        writer.writerows(history)


def _parse_seeds(text: str):
    try:
        return [int(s) for s in text.split(",") if s != ""]
    except ValueError as exc:
        raise UsageError(f"bad --seeds value {text!r}") from exc


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(args):
    t0 = time.time()
    if args.classes < 1 or args.classes > 8:
        raise UsageError("--classes must be in [1, 8]")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"output dir {out} is not empty (use --force)")
    data_mod.generate_dataset(
        out, num_train=args.volumes, num_test=args.test_volumes,
        num_classes=args.classes, shape=tuple(args.shape), seed=args.seed,
    )
    _write_run_manifest(out, args, t0)
    print(f"wrote {args.volumes} train + {args.test_volumes} test volumes to {out}")


def cmd_train(args):
    t0 = time.time()
    cfg = load_config(args.config)
    dataset = data_mod.load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = _parse_seeds(args.seeds)
    if not seeds:
        raise UsageError("need at least one seed")
    test_mious = []
    for seed in seeds:
        run_cfg = load_config(args.config, overrides={"train.seed": seed})
        result = train(run_cfg, dataset)
        ckpt_path = out / f"checkpoint_seed{seed}.pt"
        save_checkpoint(result.checkpoint, ckpt_path)
        _write_history_csv(out / f"history_seed{seed}.csv", result.history)
        model, _, _ = load_checkpoint(result.checkpoint)
        report = evaluate(model, run_cfg, dataset, "test")
        report.update(
            {
                "dataset": str(args.data),
                "seed": seed,
                "split": "test",
                "epochs_run": result.epochs_run,
            }
        )
        _write_json(out / f"metrics_seed{seed}.json", report)
        test_mious.append(report["miou"])
        print(f"seed {seed}: best val mIoU {result.best_val_miou:.4f}, "
              f"test mIoU {report['miou']:.4f} ({result.epochs_run} epochs)")
    _write_json(
        out / "aggregate.json",
        {
            "model_kind": cfg.model.kind,
            "seeds": seeds,
            "test_miou_mean": float(np.mean(test_mious)),
            "test_miou_std": float(np.std(test_mious)),
            "per_seed_test_miou": test_mious,
        },
    )
    _write_run_manifest(out, args, t0)


def cmd_expand(args):
    t0 = time.time()
    cfg = load_config(args.config)
    dataset = data_mod.load_dataset(args.data)
    new_names = [n for n in args.new_classes.split(",") if n]
    if not new_names:
        raise UsageError("--new-classes must list at least one name")
    out = Path(args.out)
    result = expand_labels(args.checkpoint, new_names, cfg, dataset)
    save_checkpoint(result.checkpoint, out / "checkpoint_stage2.pt")
    _write_history_csv(out / "history_stage2.csv", result.history)
    _write_json(out / "expansion_report.json", result.report)
    _write_run_manifest(out, args, t0)
    print(json.dumps(result.report["per_class_iou"], indent=2, sort_keys=True))


def cmd_eval(args):
    t0 = time.time()
    model, cfg, ckpt = load_checkpoint(args.checkpoint)
    dataset = data_mod.load_dataset(args.data)
    report = evaluate(model, cfg, dataset, args.split)
    report.update(
        {
            "dataset": str(args.data),
            "seed": cfg.train.seed,
            "split": args.split,
            "epochs_run": len(ckpt.get("history", [])),
        }
    )
    if args.out:
        out = Path(args.out)
        _write_json(out / "metrics.json", report)
        _write_run_manifest(out, args, t0)
    print(json.dumps({"miou": report["miou"], "per_class_iou": report["per_class_iou"]},
                     indent=2, sort_keys=True))


def cmd_predict(args):
    t0 = time.time()
    model, cfg, _ = load_checkpoint(args.checkpoint)
    intensities = np.asarray(data_mod._load_array(Path(args.volume)), dtype=np.float64)
    if intensities.ndim != 3:
        raise DataError(f"expected a 3D volume, got shape {intensities.shape}")
    names = [n for n in args.structures.split(",") if n]
    for name in names:
        if name not in model.structure_names:
            raise UnknownStructure(name, model.structure_names)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    dz, h, w = intensities.shape
    masks = {n: [] for n in names}
    labelmap = []
    for k in range(dz):
        prepared = preprocess(
            data_mod.ImageSlice(pixels=intensities[k]),
            cfg.data.target_size, model.backbone.patch_size,
        )
        feats = model.features(prepared)
        per_class = []
        for name in names:
            logit = model.logits(prepared, name, features=feats)
            per_class.append(torch.sigmoid(logit).detach())
        probs = torch.stack(per_class)  # (K, S, S)
        best_p, best_i = probs.max(dim=0)
        lab = torch.where(best_p > 0.5, best_i + 1, torch.zeros_like(best_i)).numpy()
        lab = data_mod.resize_labels(lab, (h, w))
        labelmap.append(lab)
        for i, name in enumerate(names):
            m = (probs[i] > 0.5).to(torch.int64).numpy()
            masks[name].append(data_mod.resize_labels(m, (h, w)))

    labelmap = np.stack(labelmap)
    np.savez_compressed(out / "labelmap.npz", data=labelmap.astype(np.int16))
    for name in names:
        np.savez_compressed(out / f"mask_{name}.npz",
                            data=np.stack(masks[name]).astype(np.uint8))
    write_overlays(out / "overlays", intensities, labelmap)
    _write_run_manifest(out, args, t0)
    print(f"wrote {len(names)} masks + labelmap + {dz} overlays to {out}")


# ---------------------------------------------------------------------------
# parser / entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="structseg",
                                description="Structure-token-conditioned UNet segmentation")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--volumes", type=int, default=40)
    g.add_argument("--test-volumes", type=int, default=10)
    g.add_argument("--classes", type=int, default=3)
    g.add_argument("--shape", type=int, nargs=3, default=[12, 96, 96])
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model (one checkpoint per seed)")
    t.add_argument("--config", default=None)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seeds", default="0")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("expand", help="add structure tokens and fine-tune")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--new-classes", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--config", default=None)
    e.set_defaults(func=cmd_expand)

    v = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--split", default="test")
    v.add_argument("--out", default=None)
    v.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="predict masks for one volume")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--volume", required=True)
    r.add_argument("--structures", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_predict)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.func(args)
        return EXIT_OK
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, InvalidInput, ShapeError, UnknownStructure,
            DuplicateStructure) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except StructsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
