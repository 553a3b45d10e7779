"""PNG overlay rendering for qualitative inspection of predictions."""

from __future__ import annotations

from pathlib import Path
from typing import List

import numpy as np
from PIL import Image

# fixed class-indexed palette so figures are reproducible across runs
PALETTE = [
    (230, 60, 60),
    (60, 160, 230),
    (80, 200, 100),
    (240, 190, 50),
    (180, 90, 220),
    (250, 130, 40),
    (90, 220, 210),
    (240, 110, 170),
]

ALPHA = 0.45


def render_overlay(intensity: np.ndarray, labels: np.ndarray) -> Image.Image:
    """Blend a label map onto a grayscale slice."""
    x = intensity.astype(np.float64)
    lo, hi = x.min(), x.max()
    gray = np.zeros_like(x) if hi == lo else (x - lo) / (hi - lo)
    rgb = np.repeat((gray * 255)[..., None], 3, axis=-1)
    for c in np.unique(labels):
        if c == 0:
            continue
        color = np.array(PALETTE[(int(c) - 1) % len(PALETTE)], dtype=np.float64)
        mask = labels == c
        rgb[mask] = (1 - ALPHA) * rgb[mask] + ALPHA * color
    return Image.fromarray(rgb.round().clip(0, 255).astype(np.uint8))


def write_overlays(out_dir, intensities: np.ndarray, labels: np.ndarray,
                   prefix: str = "slice") -> List[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for k in range(intensities.shape[0]):
        p = out / f"{prefix}{k:03d}.png"
        render_overlay(intensities[k], labels[k]).save(p)
        paths.append(p)
    return paths
