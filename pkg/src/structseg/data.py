"""Synthetic volumetric phantoms, slice extraction, 3D reassembly, splits,
and on-disk dataset layout shared by synthetic and real volumes."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import ImageSlice
from .errors import DataError, InvalidInput, ShapeError

DEFAULT_CLASS_NAMES = ["sphere", "box", "tube", "shell"]
CLASS_PRESENCE_PROB = 0.95
MANIFEST_NAME = "manifest.json"


@dataclass
class LabeledVolume:
    intensities: np.ndarray  # (Dz, H, W) float
    labels: np.ndarray  # (Dz, H, W) int
    class_names: List[str]
    volume_id: str

    def __post_init__(self):
        if self.intensities.shape != self.labels.shape:
            raise ShapeError("intensity/label shape mismatch")
        if self.labels.min() < 0 or self.labels.max() > len(self.class_names):
            raise InvalidInput("labels out of range for class_names")


@dataclass
class DatasetSplit:
    train_ids: List[str]
    val_ids: List[str]
    seed: int


def generate_synthetic_volume(seed: int, num_classes: int = 3,
                              shape: Tuple[int, int, int] = (12, 96, 96)) -> LabeledVolume:
    """Deterministic phantom volume with one geometric structure per class.

    Structures (sphere, box, tube, thin shell) get class-correlated intensity
    distributions; the tube and shell classes are deliberately thin to stress
    sparse targets. Additive noise and a smooth multiplicative bias field are
    applied on top.
    """
    if not 1 <= num_classes <= 8:
        raise InvalidInput("num_classes must be in [1, 8]")
    rng = np.random.default_rng(seed)
    dz, h, w = shape
    labels = np.zeros(shape, dtype=np.int64)
    intens = rng.normal(0.15, 0.02, size=shape)

    zz, yy, xx = np.meshgrid(np.arange(dz), np.arange(h), np.arange(w), indexing="ij")
    class_means = [0.45, 0.65, 0.85, 0.30, 0.55, 0.75, 0.95, 0.40]

    for c in range(1, num_classes + 1):
        kind = (c - 1) % 4
        present = rng.random() < CLASS_PRESENCE_PROB
        # draw shape parameters regardless of presence to keep the stream stable
        cz = rng.uniform(0.3, 0.7) * dz
        cy = rng.uniform(0.25, 0.75) * h
        cx = rng.uniform(0.25, 0.75) * w
        if kind == 0:  # sphere
            r = rng.uniform(0.10, 0.16) * min(h, w)
            mask = ((zz - cz) * (h / dz)) ** 2 + (yy - cy) ** 2 + (xx - cx) ** 2 <= r**2
        elif kind == 1:  # box
            sy = rng.uniform(0.08, 0.14) * h
            sx = rng.uniform(0.08, 0.14) * w
            sz = rng.uniform(0.25, 0.45) * dz
            mask = (np.abs(zz - cz) <= sz) & (np.abs(yy - cy) <= sy) & (np.abs(xx - cx) <= sx)
        elif kind == 2:  # thin tube along the slicing axis
            r = rng.uniform(0.03, 0.045) * min(h, w)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r**2
        else:  # thin spherical shell
            r = rng.uniform(0.14, 0.2) * min(h, w)
            d = np.sqrt(((zz - cz) * (h / dz)) ** 2 + (yy - cy) ** 2 + (xx - cx) ** 2)
            mask = np.abs(d - r) <= max(1.5, 0.015 * min(h, w))
        if not present:
            continue
        labels[mask] = c
        intens[mask] = rng.normal(class_means[c - 1], 0.02, size=int(mask.sum()))

    intens += rng.normal(0.0, 0.03, size=shape)
    # smooth multiplicative bias field from a coarse grid
    coarse = rng.normal(1.0, 0.08, size=(2, 3, 3))
    bias = F.interpolate(
        torch.from_numpy(coarse)[None, None], size=shape, mode="trilinear", align_corners=True
    )[0, 0].numpy()
    intens *= bias
    return LabeledVolume(
        intensities=intens.astype(np.float64),
        labels=labels,
        class_names=DEFAULT_CLASS_NAMES[:num_classes]
        + [f"class{c}" for c in range(5, num_classes + 1)],
        volume_id=f"synthetic_{seed:05d}",
    )


def slice_volume(vol: LabeledVolume) -> List[Tuple[ImageSlice, np.ndarray]]:
    """Split a volume along axis 0 into (intensity slice, label slice) pairs."""
    if vol.intensities.shape[0] == 0:
        raise ShapeError("volume has no slices")
    return [
        (ImageSlice(pixels=vol.intensities[k]), vol.labels[k])
        for k in range(vol.intensities.shape[0])
    ]


def resize_labels(labels: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor resize of an integer label slice."""
    if labels.shape == tuple(size):
        return labels
    t = torch.from_numpy(np.ascontiguousarray(labels)).to(torch.float32)[None, None]
    out = F.interpolate(t, size=size, mode="nearest")
    return out[0, 0].to(torch.int64).numpy()


def reassemble_volume(slices: Sequence[np.ndarray], expected_depth: int,
                      slice_shape: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """Stack per-slice predictions back into a 3D volume.

    Predictions are nearest-neighbor resized back to the source slice
    resolution when `slice_shape` differs from the prediction shape.
    """
    if len(slices) != expected_depth:
        raise ShapeError(f"expected {expected_depth} slices, got {len(slices)}")
    shapes = {s.shape for s in slices}
    if len(shapes) != 1:
        raise ShapeError(f"non-uniform slice shapes: {shapes}")
    arrs = [np.asarray(s) for s in slices]
    if slice_shape is not None and arrs[0].shape != tuple(slice_shape):
        arrs = [resize_labels(a, slice_shape) for a in arrs]
    return np.stack(arrs, axis=0)


def make_split(ids: Sequence[str], seed: int, train_frac: float = 0.8) -> DatasetSplit:
    """Seeded shuffle, 80/20 partition."""
    ids = list(ids)
    if len(ids) < 2:
        raise InvalidInput("need at least 2 ids to split")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ids))
    n_train = int(round(train_frac * len(ids)))
    n_train = min(max(n_train, 1), len(ids) - 1)
    train = [ids[i] for i in perm[:n_train]]
    val = [ids[i] for i in perm[n_train:]]
    return DatasetSplit(train_ids=train, val_ids=val, seed=seed)


# ---------------------------------------------------------------------------
# On-disk layout: one directory, per-volume image/label files + manifest.json
# {"class_names": [...], "volumes": [{volume_id, split, image_path, label_path}]}
# ---------------------------------------------------------------------------


def _save_array(path: Path, arr: np.ndarray):
    np.savez_compressed(path, data=arr)


def _load_array(path: Path) -> np.ndarray:
    p = str(path)
    if p.endswith(".npz"):
        with np.load(path) as f:
            return f["data"]
    if p.endswith(".nii") or p.endswith(".nii.gz"):
        try:
            import nibabel as nib
        except ImportError as exc:
            raise DataError("reading NIfTI volumes requires nibabel") from exc
        return np.asanyarray(nib.load(p).dataobj)
    raise DataError(f"unsupported volume format: {path}")


def write_dataset(out_dir, volumes: Sequence[LabeledVolume],
                  splits: Sequence[str]) -> Path:
    """Write volumes and a manifest; `splits[i]` tags volume i (train/test)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    class_names = None
    for vol, split in zip(volumes, splits):
        if class_names is None:
            class_names = vol.class_names
        img = out / f"{vol.volume_id}_img.npz"
        lab = out / f"{vol.volume_id}_lab.npz"
        _save_array(img, vol.intensities.astype(np.float32))
        _save_array(lab, vol.labels.astype(np.int16))
        entries.append(
            {
                "volume_id": vol.volume_id,
                "split": split,
                "image_path": img.name,
                "label_path": lab.name,
            }
        )
    manifest = {"class_names": class_names or [], "volumes": entries}
    path = out / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


@dataclass
class Dataset:
    root: Path
    class_names: List[str]
    entries: List[dict]

    def ids(self, split: Optional[str] = None) -> List[str]:
        return [
            e["volume_id"] for e in self.entries if split is None or e["split"] == split
        ]

    def load(self, volume_id: str) -> LabeledVolume:
        for e in self.entries:
            if e["volume_id"] == volume_id:
                return LabeledVolume(
                    intensities=np.asarray(_load_array(self.root / e["image_path"]), dtype=np.float64),
                    labels=np.asarray(_load_array(self.root / e["label_path"]), dtype=np.int64),
                    class_names=self.class_names,
                    volume_id=volume_id,
                )
        raise DataError(f"volume {volume_id!r} not in manifest")


def load_dataset(root) -> Dataset:
    root = Path(root)
    path = root / MANIFEST_NAME
    if not path.exists():
        raise DataError(f"no {MANIFEST_NAME} in {root}")
    manifest = json.loads(path.read_text())
    return Dataset(root=root, class_names=list(manifest["class_names"]),
                   entries=list(manifest["volumes"]))


def generate_dataset(out_dir, num_train: int = 40, num_test: int = 10,
                     num_classes: int = 3, shape=(12, 96, 96), seed: int = 0) -> Dataset:
    """Generate a synthetic dataset directory (train/val pool + held-out test)."""
    volumes, splits = [], []
    for i in range(num_train + num_test):
        vol = generate_synthetic_volume(seed * 100003 + i, num_classes, tuple(shape))
        vol.volume_id = f"vol_{i:04d}"
        volumes.append(vol)
        splits.append("train" if i < num_train else "test")
    write_dataset(out_dir, volumes, splits)
    return load_dataset(out_dir)
