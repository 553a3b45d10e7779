"""Conditioned 2D UNet pixel decoder with single-channel output.

Encoder/decoder follow nnU-Net-style 2D defaults (two conv-norm-lrelu per
level, strided downsampling, channel doubling with a cap). Trajectory state n
is resized, projected to a small fusion width, and concatenated onto the n-th
shallowest skip connection. The output head has one channel regardless of how
many structures are registered.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .conditioning import ConditionedTrajectory
from .errors import ConfigError, ShapeError

LEAKY_SLOPE = 0.01


@dataclass
class UNetConfig:
    levels: int = 5
    base_channels: int = 16
    fusion_channels: int = 32
    max_channels: int = 256
    in_channels: int = 3
    out_channels: int = 1

    def channels_at(self, level: int) -> int:
        return min(self.base_channels * (2 ** level), self.max_channels)


def _conv_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.InstanceNorm2d(cout, affine=True),
        nn.LeakyReLU(LEAKY_SLOPE),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.InstanceNorm2d(cout, affine=True),
        nn.LeakyReLU(LEAKY_SLOPE),
    )


class StateFusion(nn.Module):
    """Resize a conditioned state to a skip's resolution, project D->F, concat."""

    def __init__(self, state_dim: int, fusion_channels: int):
        super().__init__()
        self.proj = nn.Conv2d(state_dim, fusion_channels, 1)

    def forward(self, state: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        """state (B, Gh, Gw, D), skip (B, Cs, Hs, Ws) -> (B, Cs+F, Hs, Ws)."""
        s = state.permute(0, 3, 1, 2)
        s = F.interpolate(s, size=skip.shape[-2:], mode="bilinear", align_corners=False)
        return torch.cat([skip, self.proj(s)], dim=1)


class ConditionedUNet(nn.Module):
    """UNet whose decoder levels each consume one conditioned trajectory state."""

    def __init__(self, cfg: UNetConfig, state_dim: int):
        super().__init__()
        self.cfg = cfg
        L = cfg.levels
        self.encoders = nn.ModuleList()
        self.downs = nn.ModuleList()
        for lvl in range(L):
            # the strided down conv already moves to the next level's width
            cin = cfg.in_channels if lvl == 0 else cfg.channels_at(lvl)
            self.encoders.append(_conv_block(cin, cfg.channels_at(lvl)))
            if lvl < L - 1:
                self.downs.append(
                    nn.Conv2d(cfg.channels_at(lvl), cfg.channels_at(lvl + 1), 3, stride=2, padding=1)
                )
        # decoder level lvl upsamples from lvl+1 and consumes skip lvl (+fusion)
        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        self.fusions = nn.ModuleList()
        for lvl in range(L - 1):
            self.ups.append(
                nn.ConvTranspose2d(cfg.channels_at(lvl + 1), cfg.channels_at(lvl), 2, stride=2)
            )
            self.fusions.append(StateFusion(state_dim, cfg.fusion_channels))
            cin = cfg.channels_at(lvl) * 2 + cfg.fusion_channels
            self.decoders.append(_conv_block(cin, cfg.channels_at(lvl)))
        self.head = nn.Conv2d(cfg.channels_at(0), cfg.out_channels, 1)

    def forward(self, image: torch.Tensor, states: Sequence[torch.Tensor]) -> torch.Tensor:
        """image (B, C, H, W), states[n] (B, Gh, Gw, D) with state 0 fused at
        the shallowest skip -> logits (B, out_channels, H, W)."""
        L = self.cfg.levels
        if len(states) != L - 1:
            raise ConfigError(f"expected {L - 1} trajectory states, got {len(states)}")
        skips: List[torch.Tensor] = []
        x = image
        for lvl in range(L):
            x = self.encoders[lvl](x)
            if lvl < L - 1:
                skips.append(x)
                x = self.downs[lvl](x)
        for lvl in reversed(range(L - 1)):
            up = self.ups[lvl](x)
            fused_skip = self.fusions[lvl](states[lvl], skips[lvl])
            x = self.decoders[lvl](torch.cat([up, fused_skip], dim=1))
        return self.head(x)


def segment(image, traj: ConditionedTrajectory, unet: ConditionedUNet) -> torch.Tensor:
    """Single-slice forward: returns an (H, W, 1) logit map."""
    states = [s[None] for s in traj.states]
    logits = unet(image.channels[None], states)
    return logits[0].permute(1, 2, 0)


def predict_mask(logits: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    """Sigmoid + strict-greater threshold; exact ties go to background."""
    if not torch.isfinite(logits).all():
        raise ShapeError("non-finite logits")
    return (torch.sigmoid(logits) > threshold).to(torch.uint8)
