"""Sinusoidal positional encodings for image grids and anchor boxes."""

from __future__ import annotations

import math

import torch
from torch import nn

from detkit.models.common import MLP

__all__ = [
    "BadDimError",
    "sinusoidal_position_embedding",
    "coordinate_sinusoid",
    "AnchorQueryEmbedding",
]


class BadDimError(ValueError):
    """The requested embedding width does not split across axes/phases."""


def _interleave_sin_cos(angles: torch.Tensor) -> torch.Tensor:
    # angles (..., F) with frequency pairs -> sin on even channels, cos on odd
    return torch.stack((angles[..., 0::2].sin(), angles[..., 1::2].cos()), dim=-1).flatten(-2)


def sinusoidal_position_embedding(
    padding_mask: torch.Tensor, dim: int, temperature: float = 10000.0
) -> torch.Tensor:
    """Per-pixel sinusoidal embedding over the unpadded region of a grid.

    Coordinates are zero-based cumulative positions within the valid (not
    padded) region, normalized by the largest coordinate and scaled by 2*pi,
    so the origin lands exactly on the zero-angle pattern (sin channels 0,
    cos channels 1). Fully padded grids produce finite all-zero coordinates.

    Args:
        padding_mask: (H, W) or (B, H, W) boolean, True marks padding.
        dim: embedding width, divisible by 4 (split across y/x and sin/cos).
        temperature: frequency spacing base.

    Returns:
        (H, W, dim) or (B, H, W, dim) float embedding.
    """
    if dim % 4 != 0:
        raise BadDimError(f"embedding dim must be divisible by 4; got {dim}")
    squeeze = padding_mask.ndim == 2
    if squeeze:
        padding_mask = padding_mask.unsqueeze(0)
    not_mask = (~padding_mask).float()
    y = (not_mask.cumsum(dim=1) - 1).clamp(min=0)
    x = (not_mask.cumsum(dim=2) - 1).clamp(min=0)
    eps = 1e-6
    scale = 2 * math.pi
    # padding sits bottom/right, so the last row/column holds the max coordinate
    y = y / (y[:, -1:, :] + eps) * scale
    x = x / (x[:, :, -1:] + eps) * scale

    num_feats = dim // 2
    dim_t = temperature ** (
        2 * (torch.arange(num_feats, dtype=torch.float32, device=padding_mask.device) // 2) / num_feats
    )
    emb_y = _interleave_sin_cos(y[..., None] / dim_t)
    emb_x = _interleave_sin_cos(x[..., None] / dim_t)
    out = torch.cat([emb_y, emb_x], dim=-1)
    return out.squeeze(0) if squeeze else out


def coordinate_sinusoid(
    coords: torch.Tensor, num_feats: int, temperature: float = 10000.0
) -> torch.Tensor:
    """Sinusoidal embedding of arbitrary normalized coordinates.

    Each of the K trailing coordinates is scaled by 2*pi and expanded into
    ``num_feats`` interleaved sin/cos channels; the outputs concatenate to
    (..., K * num_feats). Zero coordinates give the fixed (0, 1, 0, 1, ...)
    pattern.
    """
    if num_feats % 2 != 0:
        raise BadDimError(f"num_feats must be even; got {num_feats}")
    dim_t = temperature ** (
        2 * (torch.arange(num_feats, dtype=coords.dtype, device=coords.device) // 2) / num_feats
    )
    angles = coords[..., None] * (2 * math.pi) / dim_t  # (..., K, num_feats)
    return _interleave_sin_cos(angles).flatten(-2)


class AnchorQueryEmbedding(nn.Module):
    """Positional query embedding from an anchor box.

    The four (cx, cy, w, h) coordinates are sinusoid-embedded at dim/2
    channels each, concatenated to 2*dim, and projected back to dim with a
    two-layer MLP. Deterministic given parameters.
    """

    def __init__(self, dim: int, temperature: float = 10000.0):
        super().__init__()
        if dim % 2 != 0:
            raise BadDimError(f"anchor embedding dim must be even; got {dim}")
        self.dim = dim
        self.temperature = temperature
        self.proj = MLP(2 * dim, dim, dim, 2)

    def forward(self, anchors: torch.Tensor) -> torch.Tensor:
        # anchors (..., 4) in [0, 1]
        sinusoid = coordinate_sinusoid(anchors, self.dim // 2, self.temperature)
        return self.proj(sinusoid)
