"""Comparison pixel decoders: a linear per-patch head and a bottleneck-fusion
ViT-UNet hybrid. Both use fixed (K+1)-channel outputs that include background,
in contrast to the single-channel conditioned decoder."""

from __future__ import annotations

from typing import List, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import FeatureGrid, PreparedImage
from .pixel_decoder import UNetConfig, _conv_block


class LinearHeadModel(nn.Module):
    """Per-patch linear map D -> K+1, upsampled to image size."""

    def __init__(self, feature_dim: int, num_classes: int):
        super().__init__()
        self.num_classes = num_classes
        self.head = nn.Linear(feature_dim, num_classes + 1)

    def forward_batch(self, images: torch.Tensor, grids: torch.Tensor) -> torch.Tensor:
        """grids (B, Gh, Gw, D) -> logits (B, K+1, H, W); images give the size."""
        logits = self.head(grids).permute(0, 3, 1, 2)
        return F.interpolate(logits, size=images.shape[-2:], mode="bilinear",
                             align_corners=False)

    def probabilities(self, images, grids) -> torch.Tensor:
        return torch.softmax(self.forward_batch(images, grids), dim=1)


class HybridUNet(nn.Module):
    """Same UNet body, but frozen ViT features enter once at the bottleneck
    (resized + linearly projected + concatenated); no structure tokens."""

    def __init__(self, cfg: UNetConfig, feature_dim: int, num_classes: int):
        super().__init__()
        self.cfg = cfg
        self.num_classes = num_classes
        L = cfg.levels
        self.encoders = nn.ModuleList()
        self.downs = nn.ModuleList()
        for lvl in range(L):
            cin = cfg.in_channels if lvl == 0 else cfg.channels_at(lvl)
            self.encoders.append(_conv_block(cin, cfg.channels_at(lvl)))
            if lvl < L - 1:
                self.downs.append(
                    nn.Conv2d(cfg.channels_at(lvl), cfg.channels_at(lvl + 1), 3, stride=2, padding=1)
                )
        bott = cfg.channels_at(L - 1)
        self.vit_proj = nn.Conv2d(feature_dim, bott, 1)
        self.bottleneck_merge = nn.Conv2d(bott * 2, bott, 1)
        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for lvl in range(L - 1):
            self.ups.append(
                nn.ConvTranspose2d(cfg.channels_at(lvl + 1), cfg.channels_at(lvl), 2, stride=2)
            )
            self.decoders.append(_conv_block(cfg.channels_at(lvl) * 2, cfg.channels_at(lvl)))
        self.head = nn.Conv2d(cfg.channels_at(0), num_classes + 1, 1)

    @property
    def bottleneck_concat_width(self) -> int:
        return self.cfg.channels_at(self.cfg.levels - 1) * 2

    def forward_batch(self, images: torch.Tensor, grids: torch.Tensor) -> torch.Tensor:
        """images (B, C, H, W), grids (B, Gh, Gw, D) -> logits (B, K+1, H, W)."""
        L = self.cfg.levels
        skips: List[torch.Tensor] = []
        x = images
        for lvl in range(L):
            x = self.encoders[lvl](x)
            if lvl < L - 1:
                skips.append(x)
                x = self.downs[lvl](x)
        vit = grids.permute(0, 3, 1, 2)
        vit = F.interpolate(vit, size=x.shape[-2:], mode="bilinear", align_corners=False)
        x = self.bottleneck_merge(torch.cat([x, self.vit_proj(vit)], dim=1))
        for lvl in reversed(range(L - 1)):
            up = self.ups[lvl](x)
            x = self.decoders[lvl](torch.cat([up, skips[lvl]], dim=1))
        return self.head(x)


class BaselineModel:
    """Frozen backbone paired with one of the baseline heads."""

    def __init__(self, backbone, net, structure_names: Sequence[str]):
        self.backbone = backbone
        self.net = net
        self._names = list(structure_names)

    @property
    def structure_names(self) -> List[str]:
        return list(self._names)

    def features(self, image: PreparedImage) -> FeatureGrid:
        return self.backbone.extract_features(image)

    @torch.no_grad()
    def predict_labelmap(self, image: PreparedImage, token_names=None,
                         features: FeatureGrid = None) -> torch.Tensor:
        if features is None:
            features = self.features(image)
        logits = self.net.forward_batch(image.channels[None], features.grid[None])
        return logits[0].argmax(dim=0).to(torch.int64)
