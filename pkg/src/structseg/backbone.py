"""Frozen feature extraction: slice preprocessing and patch-grid encoders.

The encoder is pluggable: the synthetic seeded backbone is the default and the
only one usable without external weights. Real DINOv2-S / SAM2-S adapters load
lazily and share the same interface.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, InvalidInput, ShapeError

STANDARDIZE_EPS = 1e-6


@dataclass
class ImageSlice:
    """A single 2D intensity slice, optionally carrying physical spacing."""

    pixels: np.ndarray
    spacing: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise ShapeError(f"expected 2D pixels, got shape {self.pixels.shape}")


@dataclass
class PreparedImage:
    """Normalized 3-channel image whose sides are multiples of the patch size."""

    channels: torch.Tensor  # (3, H', W')

    @property
    def size(self) -> Tuple[int, int]:
        return int(self.channels.shape[1]), int(self.channels.shape[2])


@dataclass
class FeatureGrid:
    """Patch-grid embedding produced by a frozen encoder."""

    grid: torch.Tensor  # (Gh, Gw, D)
    patch_size: int
    backbone_id: str

    @property
    def dim(self) -> int:
        return int(self.grid.shape[-1])


def preprocess(slc: ImageSlice, target_size: int, patch_size: int = 16) -> PreparedImage:
    """Standardize a slice and resize it to a square ViT-compatible input.

    Per-slice standardization (x - mean) / (std + eps), bilinear resize to
    target_size, then replication to three channels.
    """
    px = slc.pixels
    if not np.all(np.isfinite(px)):
        raise InvalidInput("slice contains non-finite values")
    if target_size <= 0 or target_size % patch_size != 0:
        raise ConfigError(
            f"target_size {target_size} must be a positive multiple of patch_size {patch_size}"
        )
    x = torch.from_numpy(px).to(torch.float32)
    x = (x - x.mean()) / (x.std(unbiased=False) + STANDARDIZE_EPS)
    x = x[None, None]  # (1,1,H,W)
    if x.shape[-2:] != (target_size, target_size):
        x = F.interpolate(x, size=(target_size, target_size), mode="bilinear", align_corners=False)
    return PreparedImage(channels=x[0].expand(3, -1, -1).contiguous())


class SyntheticBackbone(torch.nn.Module):
    """Frozen seeded stand-in for a pre-trained ViT encoder.

    Patchify -> fixed linear projection -> `depth` attention-style token mixing
    layers with residuals. All weights are drawn once from `seed` and never
    receive gradients.
    """

    def __init__(self, seed: int = 0, patch_size: int = 16, depth: int = 2, dim: int = 384):
        super().__init__()
        if depth < 1:
            raise ConfigError("depth must be >= 1")
        if dim < 8:
            raise ConfigError("dim must be >= 8")
        self.seed = seed
        self.patch_size = patch_size
        self.depth = depth
        self.dim = dim
        self.backbone_id = f"synthetic(seed={seed},patch={patch_size},depth={depth},dim={dim})"

        g = torch.Generator().manual_seed(seed)

        def rand(*shape, scale):
            return torch.nn.Parameter(torch.randn(*shape, generator=g) * scale, requires_grad=False)

        in_dim = 3 * patch_size * patch_size
        self.proj_w = rand(in_dim, dim, scale=in_dim**-0.5)
        self.proj_b = rand(dim, scale=0.02)
        s = dim**-0.5
        self.wq = torch.nn.ParameterList([rand(dim, dim, scale=s) for _ in range(depth)])
        self.wk = torch.nn.ParameterList([rand(dim, dim, scale=s) for _ in range(depth)])
        self.wv = torch.nn.ParameterList([rand(dim, dim, scale=s) for _ in range(depth)])
        self.mlp1 = torch.nn.ParameterList([rand(dim, dim, scale=s) for _ in range(depth)])
        self.mlp2 = torch.nn.ParameterList([rand(dim, dim, scale=s) for _ in range(depth)])

    @torch.no_grad()
    def forward(self, channels: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) -> (B, Gh, Gw, D). H and W must be patch multiples."""
        b, c, h, w = channels.shape
        p = self.patch_size
        if h % p or w % p:
            raise ShapeError(f"input {h}x{w} not a multiple of patch size {p}")
        gh, gw = h // p, w // p
        x = channels.unfold(2, p, p).unfold(3, p, p)  # (B,3,Gh,Gw,p,p)
        x = x.permute(0, 2, 3, 1, 4, 5).reshape(b, gh * gw, c * p * p)
        x = x @ self.proj_w + self.proj_b
        scale = self.dim**-0.5
        for i in range(self.depth):
            q, k, v = x @ self.wq[i], x @ self.wk[i], x @ self.wv[i]
            attn = torch.softmax(q @ k.transpose(-2, -1) * scale, dim=-1)
            x = x + attn @ v
            x = x + torch.tanh(x @ self.mlp1[i]) @ self.mlp2[i]
        return x.reshape(b, gh, gw, self.dim)

    def extract_features(self, image: PreparedImage) -> FeatureGrid:
        grid = self.forward(image.channels[None])[0]
        return FeatureGrid(grid=grid, patch_size=self.patch_size, backbone_id=self.backbone_id)


class _HubBackbone(torch.nn.Module):
    """Adapter for real pre-trained encoders; requires downloaded weights."""

    HUB = {
        "dinov2_s": ("facebookresearch/dinov2", "dinov2_vits14", 14, 384),
        "sam2_s": ("facebookresearch/sam2", "sam2_hiera_small", 16, 384),
    }

    def __init__(self, kind: str):
        super().__init__()
        repo, name, patch, dim = self.HUB[kind]
        self.patch_size = patch
        self.dim = dim
        self.backbone_id = kind
        try:
            self.model = torch.hub.load(repo, name)
        except Exception as exc:  # pragma: no cover - needs network/weights
            raise ConfigError(
                f"backbone {kind!r} requires downloadable pre-trained weights: {exc}"
            ) from exc
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)

    @torch.no_grad()
    def forward(self, channels: torch.Tensor) -> torch.Tensor:  # pragma: no cover
        b, _, h, w = channels.shape
        gh, gw = h // self.patch_size, w // self.patch_size
        out = self.model.forward_features(channels)["x_norm_patchtokens"]
        return out.reshape(b, gh, gw, self.dim)

    def extract_features(self, image: PreparedImage) -> FeatureGrid:  # pragma: no cover
        grid = self.forward(image.channels[None])[0]
        return FeatureGrid(grid=grid, patch_size=self.patch_size, backbone_id=self.backbone_id)


def build_backbone(kind: str = "synthetic", *, seed: int = 0, patch_size: int = 16,
                   depth: int = 2, dim: int = 384) -> torch.nn.Module:
    if kind == "synthetic":
        return SyntheticBackbone(seed=seed, patch_size=patch_size, depth=depth, dim=dim)
    if kind in _HubBackbone.HUB:
        return _HubBackbone(kind)
    raise ConfigError(f"unknown backbone kind {kind!r}")
