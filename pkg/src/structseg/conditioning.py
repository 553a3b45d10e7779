"""Structure tokens and the two-way attention conditioning decoder.

One learnable token per target class conditions the frozen feature grid: the
grid is projected by an MLP, fused with the spatially replicated token, and
refined through N two-way attention blocks. Each block's image state becomes
one entry of the conditioned trajectory consumed by the pixel decoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import FeatureGrid
from .errors import DuplicateStructure, InvalidInput, NumericalError, ShapeError, UnknownStructure

TOKEN_INIT_STD = 0.02
KOLEO_EPS = 1e-12


class StructureTokenTable(nn.Module):
    """Ordered registry of named learnable class vectors plus a shared
    learnable positional grid. Background has no entry."""

    def __init__(self, dim: int, grid_shape=(14, 14), names: Sequence[str] = (), seed: int = 0):
        super().__init__()
        self.dim = dim
        self._names: List[str] = []
        self._vectors = nn.ParameterDict()
        self._init_gen = torch.Generator().manual_seed(seed ^ 0x5EED)
        gh, gw = grid_shape
        self.positional = nn.Parameter(
            torch.randn(gh, gw, dim, generator=self._init_gen) * TOKEN_INIT_STD
        )
        for name in names:
            self.add(name)

    @property
    def names(self) -> List[str]:
        return list(self._names)

    def __len__(self) -> int:
        return len(self._names)

    def __contains__(self, name: str) -> bool:
        return name in self._vectors

    def add(self, name: str) -> int:
        """Register a fresh token; never touches existing vectors or weights."""
        if name in self._vectors:
            raise DuplicateStructure(f"structure {name!r} already registered")
        vec = torch.randn(self.dim, generator=self._init_gen) * TOKEN_INIT_STD
        self._vectors[name] = nn.Parameter(vec.to(self.positional.dtype))
        self._names.append(name)
        return len(self._names) - 1

    def vector(self, name: str) -> nn.Parameter:
        if name not in self._vectors:
            raise UnknownStructure(name, self._names)
        return self._vectors[name]

    def positional_grid(self, shape) -> torch.Tensor:
        """Positional embedding at the requested grid shape, bilinearly
        interpolated when it differs from the stored one."""
        gh, gw = shape
        pos = self.positional
        if pos.shape[0] == gh and pos.shape[1] == gw:
            return pos
        p = pos.permute(2, 0, 1)[None]
        p = F.interpolate(p, size=(gh, gw), mode="bilinear", align_corners=False)
        return p[0].permute(1, 2, 0)

    def state_payload(self):
        """(name, vector) pairs plus positional grid, for checkpointing."""
        return {
            "names": list(self._names),
            "vectors": {n: self._vectors[n].detach().clone() for n in self._names},
            "positional": self.positional.detach().clone(),
        }

    def load_payload(self, payload):
        self._names = []
        self._vectors = nn.ParameterDict()
        for name in payload["names"]:
            self._vectors[name] = nn.Parameter(payload["vectors"][name].clone())
            self._names.append(name)
        self.positional = nn.Parameter(payload["positional"].clone())


def replicate_token(token: torch.Tensor, shape, dim: Optional[int] = None) -> torch.Tensor:
    """Tile a class vector over a (Gh, Gw) grid."""
    d = dim if dim is not None else token.shape[-1]
    if token.shape[-1] != d:
        raise ShapeError(f"token length {token.shape[-1]} != decoder width {d}")
    gh, gw = shape
    return token.reshape(*token.shape[:-1], 1, 1, d).expand(*token.shape[:-1], gh, gw, d)


class _CrossAttention(nn.Module):
    """Multi-head cross-attention; positional terms are added to queries and
    keys by the caller, never to values."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads:
            raise ShapeError(f"dim {dim} not divisible by heads {num_heads}")
        self.num_heads = num_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, q, k, v):
        b, lq, d = q.shape
        lk = k.shape[1]
        h = self.num_heads
        hd = d // h
        q = self.q_proj(q).reshape(b, lq, h, hd).transpose(1, 2)
        k = self.k_proj(k).reshape(b, lk, h, hd).transpose(1, 2)
        v = self.v_proj(v).reshape(b, lk, h, hd).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(hd), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, lq, d)
        return self.out_proj(out)


class TwoWayBlock(nn.Module):
    """Token and image features mutually attend with residuals + layer norm.

    Sublayers: token->image cross-attention, token MLP, image->token
    cross-attention. Token self-attention is omitted since exactly one token
    is conditioned per pass.
    """

    def __init__(self, dim: int, num_heads: int = 8, mlp_ratio: int = 4):
        super().__init__()
        self.attn_token_to_image = _CrossAttention(dim, num_heads)
        self.norm_token_attn = nn.LayerNorm(dim)
        self.token_mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim)
        )
        self.norm_token_mlp = nn.LayerNorm(dim)
        self.attn_image_to_token = _CrossAttention(dim, num_heads)
        self.norm_image = nn.LayerNorm(dim)

    def forward(self, state: torch.Tensor, token_state: torch.Tensor, pos: torch.Tensor):
        """state (B, L, D), token_state (B, 1, D), pos (B, L, D)."""
        tok = token_state + self.attn_token_to_image(
            q=token_state, k=state + pos, v=state
        )
        tok = self.norm_token_attn(tok)
        tok = self.norm_token_mlp(tok + self.token_mlp(tok))
        img = state + self.attn_image_to_token(q=state + pos, k=tok, v=tok)
        img = self.norm_image(img)
        if not (torch.isfinite(img).all() and torch.isfinite(tok).all()):
            raise NumericalError("non-finite intermediate in two-way block")
        return img, tok


@dataclass
class ConditionedTrajectory:
    """Ordered image/token states emitted by the two-way blocks for one token."""

    states: List[torch.Tensor]  # each (Gh, Gw, D)
    token_states: List[torch.Tensor]  # each (D,)
    token_name: str

    def __len__(self) -> int:
        return len(self.states)


class ConditioningDecoder(nn.Module):
    """MLP projection followed by N two-way attention blocks."""

    def __init__(self, dim: int, num_blocks: int = 4, num_heads: int = 8,
                 mlp_ratio: int = 4, input_dim: Optional[int] = None):
        super().__init__()
        self.dim = dim
        self.num_blocks = num_blocks
        self.input_proj = None
        if input_dim is not None and input_dim != dim:
            self.input_proj = nn.Linear(input_dim, dim)
        self.project_mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim)
        )
        self.blocks = nn.ModuleList(
            TwoWayBlock(dim, num_heads, mlp_ratio) for _ in range(num_blocks)
        )

    def project(self, grid: torch.Tensor) -> torch.Tensor:
        """(..., Gh, Gw, Din) -> (..., Gh, Gw, D) segmentation latent."""
        if self.input_proj is None and grid.shape[-1] != self.dim:
            raise ShapeError(
                f"feature width {grid.shape[-1]} != decoder width {self.dim} and no input projection configured"
            )
        if self.input_proj is not None:
            grid = self.input_proj(grid)
        return self.project_mlp(grid)

    def condition_batch(self, grids: torch.Tensor, tokens: torch.Tensor,
                        pos: torch.Tensor):
        """Batched conditioning core.

        grids (B, Gh, Gw, Din), tokens (B, D), pos (Gh, Gw, D) ->
        (list of N states (B, Gh, Gw, D), list of N token states (B, D)).
        """
        b, gh, gw, _ = grids.shape
        proj = self.project(grids)
        fused = proj + replicate_token(tokens[:, None, :], (gh, gw), self.dim).squeeze(1)
        state = fused.reshape(b, gh * gw, self.dim)
        tok = tokens[:, None, :]
        pos_flat = pos.reshape(1, gh * gw, self.dim).expand(b, -1, -1)
        states, token_states = [], []
        for block in self.blocks:
            state, tok = block(state, tok, pos_flat)
            states.append(state.reshape(b, gh, gw, self.dim))
            token_states.append(tok[:, 0, :])
        return states, token_states

    def condition(self, features: FeatureGrid, table: StructureTokenTable,
                  token_name: str) -> ConditionedTrajectory:
        """Condition one feature grid on one named structure token."""
        vec = table.vector(token_name)
        gh, gw = features.grid.shape[:2]
        pos = table.positional_grid((gh, gw))
        states, token_states = self.condition_batch(
            features.grid[None], vec[None], pos
        )
        return ConditionedTrajectory(
            states=[s[0] for s in states],
            token_states=[t[0] for t in token_states],
            token_name=token_name,
        )


def koleo(embeddings, eps: float = KOLEO_EPS) -> float:
    """Negative mean log nearest-neighbor distance.

    Diverges (here: saturates at -log(eps)) as two embeddings collide, making
    it an injectivity diagnostic for a set of latent vectors.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise InvalidInput("koleo needs at least two vectors of equal length")
    d2 = np.sum((x[:, None, :] - x[None, :, :]) ** 2, axis=-1)
    np.fill_diagonal(d2, np.inf)
    nn_dist = np.sqrt(d2.min(axis=1))
    return float(-np.mean(np.log(np.maximum(nn_dist, eps))))
