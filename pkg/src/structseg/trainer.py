"""Training protocol: AdamW optimization with exhaustive per-class sampling,
plateau early stopping, best-checkpoint tracking, seeded reproducibility, and
two-stage label-space expansion."""

from __future__ import annotations

import copy
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import build_backbone, preprocess
from .baselines import BaselineModel, HybridUNet, LinearHeadModel
from .config import ExperimentConfig, rebuild_config
from .data import Dataset, LabeledVolume, make_split, resize_labels, slice_volume
from .errors import ConfigError, DuplicateStructure, NumericalError
from .model import ConditionedSegNet, SegmentationModel
from .objectives import combined_loss, dice_loss_per_sample, volume_miou
from .pixel_decoder import UNetConfig

CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# model assembly
# ---------------------------------------------------------------------------


def build_model(cfg: ExperimentConfig, class_names: Sequence[str]):
    """Assemble a model of cfg.model.kind over a frozen backbone.

    Trainable-weight initialization is drawn from the torch global RNG; seed
    it (torch.manual_seed) before calling for reproducible builds.
    """
    bb = cfg.backbone
    backbone = build_backbone(bb.kind, seed=bb.seed, patch_size=bb.patch,
                              depth=bb.depth, dim=bb.dim)
    grid = cfg.data.target_size // backbone.patch_size
    kind = cfg.model.kind
    if kind == "vitc_unet":
        net = ConditionedSegNet(
            dim=backbone.dim,
            grid_shape=(grid, grid),
            unet_cfg=cfg.unet,
            names=class_names,
            num_blocks=cfg.decoder.num_blocks,
            num_heads=cfg.decoder.num_heads,
            mlp_ratio=cfg.decoder.mlp_ratio,
            seed=cfg.train.seed,
        )
        return SegmentationModel(backbone, net)
    if kind == "linear":
        net = LinearHeadModel(backbone.dim, num_classes=len(class_names))
        return BaselineModel(backbone, net, class_names)
    if kind == "hybrid":
        unet_cfg = UNetConfig(**{**cfg.unet.__dict__})
        net = HybridUNet(unet_cfg, backbone.dim, num_classes=len(class_names))
        return BaselineModel(backbone, net, class_names)
    raise ConfigError(f"unknown model kind {cfg.model.kind!r}")


# ---------------------------------------------------------------------------
# slice/feature caching (the backbone is frozen, so features are computed once)
# ---------------------------------------------------------------------------


@dataclass
class VolumeCache:
    volume_id: str
    images: torch.Tensor  # (Dz, 3, S, S)
    grids: torch.Tensor  # (Dz, Gh, Gw, D)
    labels: np.ndarray  # (Dz, S, S) resized to target
    labels_native: np.ndarray  # (Dz, H, W) original resolution
    native_shape: Tuple[int, int]


def cache_volume(model, vol: LabeledVolume, target_size: int) -> VolumeCache:
    images, grids, labels = [], [], []
    for slc, lab in slice_volume(vol):
        prepared = preprocess(slc, target_size, model.backbone.patch_size)
        images.append(prepared.channels)
        grids.append(model.features(prepared).grid)
        labels.append(resize_labels(lab, (target_size, target_size)))
    return VolumeCache(
        volume_id=vol.volume_id,
        images=torch.stack(images),
        grids=torch.stack(grids),
        labels=np.stack(labels),
        labels_native=vol.labels,
        native_shape=vol.labels.shape[1:],
    )


def cache_volumes(model, dataset: Dataset, ids: Sequence[str], target_size: int) -> List[VolumeCache]:
    return [cache_volume(model, dataset.load(vid), target_size) for vid in ids]


# ---------------------------------------------------------------------------
# loss steps
# ---------------------------------------------------------------------------


def training_step(model, images: torch.Tensor, grids: torch.Tensor,
                  labels: torch.Tensor, class_ids: Sequence[int],
                  names: Sequence[str], cfg: ExperimentConfig,
                  optimizer: torch.optim.Optimizer) -> float:
    """One optimizer step on a batch of slices.

    For the conditioned model every defined class is sampled for every image
    (present or not): the batch expands to (image, class) pairs with binary
    targets. Baselines take one multi-class step.
    """
    loss = batch_loss(model, images, grids, labels, class_ids, names, cfg)
    if not torch.isfinite(loss):
        raise NumericalError(
            f"non-finite training loss {loss.item()!r}; "
            f"batch stats: images mean {images.mean().item():.4g}, "
            f"labels max {int(labels.max())}"
        )
    optimizer.zero_grad()
    loss.backward()
    if cfg.train.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.net.parameters(), cfg.train.grad_clip)
    optimizer.step()
    return float(loss.detach())


def batch_loss(model, images, grids, labels, class_ids, names, cfg: ExperimentConfig):
    b = images.shape[0]
    k = len(class_ids)
    if isinstance(model, SegmentationModel):
        rep_images = images.repeat_interleave(k, dim=0)
        rep_grids = grids.repeat_interleave(k, dim=0)
        rep_names = [n for _ in range(b) for n in names]
        targets = torch.stack(
            [(labels == cid).to(images.dtype) for cid in class_ids], dim=1
        ).reshape(b * k, *labels.shape[1:])
        logits = model.net.forward_batch(rep_images, rep_grids, rep_names)
        return combined_loss(logits[:, 0], targets, cfg.loss)
    # baselines: (K+1)-way cross-entropy + soft Dice over softmax channels
    logits = model.net.forward_batch(images, grids)
    target = torch.zeros(labels.shape, dtype=torch.int64)
    for pos, cid in enumerate(class_ids, start=1):
        target[labels == cid] = pos
    ce = F.cross_entropy(logits, target)
    probs = torch.softmax(logits, dim=1)
    onehot = F.one_hot(target, num_classes=k + 1).permute(0, 3, 1, 2).to(probs.dtype)
    dice = dice_loss_per_sample(
        probs.reshape(b * (k + 1), *labels.shape[1:]),
        onehot.reshape(b * (k + 1), *labels.shape[1:]),
        cfg.loss.dice_smooth,
    )
    return ce + dice


# ---------------------------------------------------------------------------
# early stopping
# ---------------------------------------------------------------------------


def early_stop(history: Sequence[float], patience: int = 10,
               min_rel: float = 0.01) -> bool:
    """Stop when the best metric in the trailing `patience` epochs fails to
    improve on the earlier best by a relative min_rel."""
    if not len(history):
        raise ValueError("history must be nonempty")
    if len(history) <= patience:
        return False
    window = history[-patience:]
    prior = history[:-patience]
    return max(window) < (1.0 + min_rel) * max(prior)


# ---------------------------------------------------------------------------
# validation / evaluation
# ---------------------------------------------------------------------------


@torch.no_grad()
def predict_volume(model, cache: VolumeCache, class_ids: Sequence[int],
                   names: Sequence[str]) -> np.ndarray:
    """Slice-wise inference reassembled to the native label resolution, with
    positional class ids mapped back to dataset label values."""
    dz = cache.images.shape[0]
    if isinstance(model, SegmentationModel):
        k = len(names)
        rep_images = cache.images.repeat_interleave(k, dim=0)
        rep_grids = cache.grids.repeat_interleave(k, dim=0)
        rep_names = [n for _ in range(dz) for n in names]
        logits = model.net.forward_batch(rep_images, rep_grids, rep_names)
        probs = torch.sigmoid(logits[:, 0]).reshape(dz, k, *cache.images.shape[-2:])
        best_p, best_i = probs.max(dim=1)
        pred = torch.where(best_p > 0.5, best_i + 1, torch.zeros_like(best_i)).numpy()
    else:
        logits = model.net.forward_batch(cache.images, cache.grids)
        pred = logits.argmax(dim=1).numpy()
    remap = np.zeros(len(class_ids) + 1, dtype=np.int64)
    remap[1:] = np.asarray(class_ids)
    pred = remap[pred]
    slices = [resize_labels(pred[i], cache.native_shape) for i in range(dz)]
    return np.stack(slices, axis=0)


def evaluate_volumes(model, caches: Sequence[VolumeCache], class_ids: Sequence[int],
                     names: Sequence[str]) -> Dict:
    """Per-volume foreground mIoU (restricted to `class_ids`), averaged."""
    ids = list(class_ids)
    per_class = []
    mious = []
    for cache in caches:
        pred = predict_volume(model, cache, ids, names)
        gt = cache.labels_native
        # remap to positional labels so excluded classes count as background
        pos_pred = np.zeros_like(pred)
        pos_gt = np.zeros_like(gt)
        for pos, cid in enumerate(ids, start=1):
            pos_pred[pred == cid] = pos
            pos_gt[gt == cid] = pos
        ious, miou = volume_miou(pos_pred, pos_gt, len(ids))
        per_class.append(ious)
        mious.append(miou)
    per_class_mean = np.mean(per_class, axis=0)
    return {
        "per_class_iou": {n: float(v) for n, v in zip(names, per_class_mean)},
        "miou": float(np.mean(mious)),
        "per_volume_miou": [float(m) for m in mious],
    }


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def make_checkpoint(model, cfg: ExperimentConfig, class_names: Sequence[str],
                    history: List[dict]) -> dict:
    ckpt = {
        "version": CHECKPOINT_VERSION,
        "model_kind": cfg.model.kind,
        "state_dict": copy.deepcopy(model.net.state_dict()),
        "class_names": list(class_names),
        "model_class_names": list(model.structure_names),
        "config": cfg.to_dict(),
        "history": copy.deepcopy(history),
        "rng": {
            "torch": torch.get_rng_state(),
        },
    }
    return ckpt


def save_checkpoint(ckpt: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(ckpt, path)
    return path


def load_checkpoint(path_or_dict):
    ckpt = path_or_dict
    if not isinstance(ckpt, dict):
        ckpt = torch.load(path_or_dict, weights_only=False)
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {ckpt.get('version')}")
    cfg = rebuild_config(ckpt["config"])
    torch.manual_seed(cfg.train.seed)
    model = build_model(cfg, ckpt["model_class_names"])
    model.net.load_state_dict(ckpt["state_dict"])
    model.net.eval()
    return model, cfg, ckpt


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: dict
    history: List[dict]
    best_val_miou: float
    epochs_run: int
    wall_time_s: float


def _class_ids(dataset_names: Sequence[str], subset: Sequence[str]) -> List[int]:
    return [dataset_names.index(n) + 1 for n in subset]


def train(cfg: ExperimentConfig, dataset: Dataset,
          class_subset: Optional[Sequence[str]] = None,
          initial_model=None, prior_history: Optional[List[dict]] = None) -> TrainResult:
    """Run the full protocol on a dataset's train split.

    class_subset restricts both sampling and validation to a subset of the
    dataset's classes (used by stage-1 of label expansion). initial_model
    resumes from existing weights (stage-2).
    """
    t0 = time.time()
    names = list(class_subset) if class_subset is not None else list(dataset.class_names)
    class_ids = _class_ids(dataset.class_names, names)

    torch.manual_seed(cfg.train.seed)
    model = initial_model if initial_model is not None else build_model(cfg, names)
    model.net.train()

    split = make_split(dataset.ids("train"), cfg.train.seed)
    train_caches = cache_volumes(model, dataset, split.train_ids, cfg.data.target_size)
    val_caches = cache_volumes(model, dataset, split.val_ids, cfg.data.target_size)

    # flatten train slices into one pool
    images = torch.cat([c.images for c in train_caches])
    grids = torch.cat([c.grids for c in train_caches])
    labels = torch.from_numpy(np.concatenate([c.labels for c in train_caches]))
    n_slices = images.shape[0]

    optimizer = torch.optim.AdamW(model.net.parameters(), lr=cfg.train.lr,
                                  weight_decay=cfg.train.weight_decay)
    # Linear warmup then cosine decay toward a small floor: warmup tames the
    # chaotic first iterations of the attention blocks, the decay damps
    # late-stage oscillation of the per-class IoUs.
    total_iters = max(1, cfg.train.max_epochs * cfg.train.iters_per_epoch)
    warmup = max(0, cfg.train.warmup_iters)

    def _lr_factor(step: int) -> float:
        ramp = min(1.0, (step + 1) / warmup) if warmup else 1.0
        decay = 0.05 + 0.95 * 0.5 * (1.0 + math.cos(math.pi * step / total_iters))
        return ramp * decay

    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, _lr_factor)
    rng = np.random.default_rng(cfg.train.seed)

    history: List[dict] = list(prior_history or [])
    epoch_offset = history[-1]["epoch"] if history else 0
    val_curve: List[float] = []
    best_state = None
    best_miou = -1.0

    for epoch in range(1, cfg.train.max_epochs + 1):
        model.net.train()
        losses = []
        for _ in range(cfg.train.iters_per_epoch):
            idx = rng.integers(0, n_slices, size=min(cfg.train.batch_size, n_slices))
            idx_t = torch.from_numpy(idx)
            loss = training_step(
                model, images[idx_t], grids[idx_t], labels[idx_t],
                class_ids, names, cfg, optimizer,
            )
            scheduler.step()
            losses.append(loss)
        model.net.eval()
        val = evaluate_volumes(model, val_caches, class_ids, names)
        val_curve.append(val["miou"])
        history.append(
            {
                "epoch": epoch_offset + epoch,
                "train_loss": float(np.mean(losses)),
                "val_miou": val["miou"],
            }
        )
        if val["miou"] > best_miou:
            best_miou = val["miou"]
            best_state = copy.deepcopy(model.net.state_dict())
        if early_stop(val_curve, cfg.train.patience, cfg.train.min_rel_improvement):
            break

    if best_state is not None:
        model.net.load_state_dict(best_state)
    model.net.eval()
    ckpt = make_checkpoint(model, cfg, dataset.class_names, history)
    ckpt["best_val_miou"] = best_miou
    return TrainResult(
        checkpoint=ckpt,
        history=history,
        best_val_miou=best_miou,
        epochs_run=len(val_curve),
        wall_time_s=time.time() - t0,
    )


def evaluate(model, cfg: ExperimentConfig, dataset: Dataset, split: str = "test",
             class_subset: Optional[Sequence[str]] = None) -> Dict:
    names = list(class_subset) if class_subset is not None else list(model.structure_names)
    class_ids = _class_ids(dataset.class_names, names)
    caches = cache_volumes(model, dataset, dataset.ids(split), cfg.data.target_size)
    model.net.eval()
    return evaluate_volumes(model, caches, class_ids, names)


# ---------------------------------------------------------------------------
# label-space expansion
# ---------------------------------------------------------------------------


@dataclass
class ExpansionResult:
    checkpoint: dict
    history: List[dict]
    stage2_epochs: int
    stage2_wall_time_s: float
    report: Dict


def expand_labels(stage1_ckpt, new_class_names: Sequence[str],
                  stage2_cfg: ExperimentConfig, dataset_full: Dataset) -> ExpansionResult:
    """Resume a stage-1 checkpoint with fresh tokens for the new classes and
    fine-tune on the full label set."""
    model, cfg1, ckpt = load_checkpoint(stage1_ckpt)
    if not isinstance(model, SegmentationModel):
        raise ConfigError("label expansion requires the token-conditioned model")
    old_names = model.structure_names
    for name in new_class_names:
        if name in model.net.table:
            raise DuplicateStructure(f"structure {name!r} already in the table")
    for name in new_class_names:
        model.net.table.add(name)

    all_names = model.structure_names
    result = train(stage2_cfg, dataset_full, class_subset=all_names,
                   initial_model=model, prior_history=ckpt.get("history"))
    test_report = evaluate(model, stage2_cfg, dataset_full, "test")
    old_ious = [test_report["per_class_iou"][n] for n in old_names]
    new_ious = [test_report["per_class_iou"][n] for n in new_class_names]
    report = {
        "per_class_iou": test_report["per_class_iou"],
        "miou": test_report["miou"],
        "stage1_classes": {"names": old_names, "miou": float(np.mean(old_ious))},
        "new_classes": {"names": list(new_class_names), "miou": float(np.mean(new_ious))},
        "stage2_epochs": result.epochs_run,
        "stage2_wall_time_s": result.wall_time_s,
    }
    return ExpansionResult(
        checkpoint=result.checkpoint,
        history=result.history,
        stage2_epochs=result.epochs_run,
        stage2_wall_time_s=result.wall_time_s,
        report=report,
    )
