"""Assembled promptable segmenter: frozen backbone + trainable conditioning
decoder + conditioned UNet + structure token table.

The backbone lives outside the trainable network so its parameters can never
reach an optimizer; the trainable parts form one nn.Module for checkpointing.
"""

from __future__ import annotations

from typing import Dict, List, Sequence

import torch
import torch.nn as nn

from .backbone import FeatureGrid, PreparedImage
from .conditioning import ConditionedTrajectory, ConditioningDecoder, StructureTokenTable
from .errors import UnknownStructure
from .pixel_decoder import ConditionedUNet, UNetConfig, predict_mask


class ConditionedSegNet(nn.Module):
    """All trainable parameters of the structure-conditioned model."""

    def __init__(self, dim: int, grid_shape, unet_cfg: UNetConfig, names: Sequence[str] = (),
                 num_blocks: int = 4, num_heads: int = 8, mlp_ratio: int = 4,
                 input_dim=None, seed: int = 0):
        super().__init__()
        if unet_cfg.levels - 1 != num_blocks:
            raise ValueError("trajectory length must equal UNet levels - 1")
        self.table = StructureTokenTable(dim, grid_shape, names, seed=seed)
        self.decoder = ConditioningDecoder(dim, num_blocks, num_heads, mlp_ratio, input_dim)
        self.unet = ConditionedUNet(unet_cfg, state_dim=dim)

    def forward_batch(self, images: torch.Tensor, grids: torch.Tensor,
                      names: Sequence[str]) -> torch.Tensor:
        """images (B, C, H, W), grids (B, Gh, Gw, Din), one token name per
        sample -> logits (B, 1, H, W)."""
        tokens = torch.stack([self.table.vector(n) for n in names])
        pos = self.table.positional_grid(grids.shape[1:3])
        states, _ = self.decoder.condition_batch(grids, tokens, pos)
        return self.unet(images, states)


class SegmentationModel:
    """Frozen backbone paired with the trainable conditioned network."""

    def __init__(self, backbone, net: ConditionedSegNet):
        self.backbone = backbone
        self.net = net

    @property
    def structure_names(self) -> List[str]:
        return self.net.table.names

    def features(self, image: PreparedImage) -> FeatureGrid:
        return self.backbone.extract_features(image)

    def logits(self, image: PreparedImage, token_name: str,
               features: FeatureGrid = None) -> torch.Tensor:
        """(H, W) logit map for one structure on one slice."""
        if features is None:
            features = self.features(image)
        out = self.net.forward_batch(
            image.channels[None], features.grid[None], [token_name]
        )
        return out[0, 0]

    def condition(self, features: FeatureGrid, token_name: str) -> ConditionedTrajectory:
        return self.net.decoder.condition(features, self.net.table, token_name)

    @torch.no_grad()
    def predict_labelmap(self, image: PreparedImage, token_names: Sequence[str],
                         features: FeatureGrid = None) -> torch.Tensor:
        """Integer label map: 0 where every class probability <= 0.5, else the
        argmax class id (1-based position in token_names)."""
        h, w = image.size
        if not token_names:
            return torch.zeros(h, w, dtype=torch.int64)
        for n in token_names:
            if n not in self.net.table:
                raise UnknownStructure(n, self.net.table.names)
        if features is None:
            features = self.features(image)
        k = len(token_names)
        images = image.channels[None].expand(k, -1, -1, -1)
        grids = features.grid[None].expand(k, -1, -1, -1)
        logits = self.net.forward_batch(images, grids, list(token_names))
        probs = torch.sigmoid(logits[:, 0])  # (K, H, W)
        best_p, best_i = probs.max(dim=0)
        labels = torch.where(best_p > 0.5, best_i + 1, torch.zeros_like(best_i))
        return labels.to(torch.int64)

    @torch.no_grad()
    def predict_mask(self, image: PreparedImage, token_name: str,
                     threshold: float = 0.5) -> torch.Tensor:
        return predict_mask(self.logits(image, token_name), threshold)
