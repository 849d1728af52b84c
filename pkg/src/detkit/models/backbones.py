"""Backbone slot: feature pyramids from images.

Any module mapping ``(images (B,3,H,W), padding_mask (B,H,W)) ->
FeaturePyramid`` and exposing ``stage_units()`` / ``freeze_stages(n)`` /
``out_channels`` satisfies the slot. Two reference families ship here: a
residual CNN with a stem and four strided stages, and a patchify transformer.
"""

from __future__ import annotations

import dataclasses

import torch
import torch.nn.functional as F
from torch import nn

from detkit.models.attention import MultiheadAttention
from detkit.models.position import sinusoidal_position_embedding

__all__ = [
    "FeaturePyramid",
    "ResidualBackbone",
    "PatchifyBackbone",
    "ChannelProjector",
    "TooManyStagesError",
    "downsample_mask",
]


class TooManyStagesError(ValueError):
    """freeze request exceeds the backbone's stage count."""


@dataclasses.dataclass
class FeaturePyramid:
    """Multi-scale features: per level a (B, C, H_l, W_l) map with its stride
    and a (B, H_l, W_l) boolean padding mask (True = padded)."""

    levels: list[tuple[torch.Tensor, int]]
    padding_masks: list[torch.Tensor]

    def __post_init__(self):
        strides = [s for _, s in self.levels]
        if any(b >= a for a, b in zip(strides[1:], strides[:-1])):
            raise ValueError(f"strides must increase strictly; got {strides}")
        if len(self.padding_masks) != len(self.levels):
            raise ValueError("one padding mask per level required")

    @property
    def channels(self) -> list[int]:
        return [f.shape[1] for f, _ in self.levels]


def downsample_mask(padding_mask: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Resize a boolean padding mask to a feature resolution (True = padded)."""
    return F.interpolate(padding_mask[:, None].float(), size=size, mode="nearest")[:, 0] > 0.5


class _FrozenStagesMixin(nn.Module):
    """Shared freezing behaviour: frozen units stop gradients and stay in
    inference-statistics mode for their normalization layers."""

    _frozen: int = 0

    def stage_units(self) -> list[tuple[str, nn.Module]]:
        raise NotImplementedError

    def freeze_stages(self, n: int) -> None:
        units = self.stage_units()
        if n > len(units):
            raise TooManyStagesError(f"{n} stages requested; backbone has {len(units)}")
        self._frozen = n
        for index, (_, unit) in enumerate(units):
            unit.requires_grad_(index >= n)
        self._apply_frozen_mode()

    def frozen_parameter_names(self, prefix: str = "") -> set[str]:
        names = set()
        for name, unit in self.stage_units()[: self._frozen]:
            for pname, _ in unit.named_parameters():
                names.add(f"{prefix}{name}.{pname}")
        return names

    def _apply_frozen_mode(self):
        for _, unit in self.stage_units()[: self._frozen]:
            unit.eval()

    def train(self, mode: bool = True):
        super().train(mode)
        self._apply_frozen_mode()
        return self


class _BasicBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return torch.relu(out + self.shortcut(x))


class ResidualBackbone(_FrozenStagesMixin):
    """A small residual CNN: stem (stride 2) plus four residual stages
    (strides 4/8/16/32). ``out_stages`` picks which stages feed the pyramid.
    Stage units are ordered [stem, stage1..stage4] so freezing n=1 freezes
    the stem only and n=2 adds the first residual stage.
    """

    def __init__(
        self,
        stem_channels: int = 16,
        stage_channels: tuple[int, ...] = (16, 32, 64, 128),
        stage_blocks: tuple[int, ...] = (1, 1, 1, 1),
        out_stages: tuple[int, ...] = (2, 3, 4),
    ):
        super().__init__()
        if len(stage_channels) != len(stage_blocks):
            raise ValueError("stage_channels and stage_blocks lengths differ")
        if any(s < 1 or s > len(stage_channels) for s in out_stages):
            raise ValueError(f"out_stages must reference stages 1..{len(stage_channels)}")
        self.out_stages = tuple(sorted(out_stages))
        self.stem = nn.Sequential(
            nn.Conv2d(3, stem_channels, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(stem_channels),
            nn.ReLU(inplace=True),
        )
        stages = []
        in_channels = stem_channels
        for channels, blocks in zip(stage_channels, stage_blocks):
            layers = [_BasicBlock(in_channels, channels, stride=2)]
            layers += [_BasicBlock(channels, channels) for _ in range(blocks - 1)]
            stages.append(nn.Sequential(*layers))
            in_channels = channels
        self.stages = nn.ModuleList(stages)
        self.stage_channels = tuple(stage_channels)

    @property
    def out_channels(self) -> list[int]:
        return [self.stage_channels[s - 1] for s in self.out_stages]

    @property
    def out_strides(self) -> list[int]:
        return [2 ** (s + 1) for s in self.out_stages]

    def stage_units(self) -> list[tuple[str, nn.Module]]:
        return [("stem", self.stem)] + [(f"stage{i + 1}", s) for i, s in enumerate(self.stages)]

    def forward(self, images: torch.Tensor, padding_mask: torch.Tensor) -> FeaturePyramid:
        x = self.stem(images)
        levels, masks = [], []
        for index, stage in enumerate(self.stages, start=1):
            x = stage(x)
            if index in self.out_stages:
                stride = 2 ** (index + 1)
                levels.append((x, stride))
                masks.append(downsample_mask(padding_mask, x.shape[-2:]))
        return FeaturePyramid(levels=levels, padding_masks=masks)


class _TransformerBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiheadAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, tokens, key_padding_mask):
        x = self.norm1(tokens)
        tokens = tokens + self.attn(x, x, x, key_padding_mask=key_padding_mask)
        return tokens + self.mlp(self.norm2(tokens))


class PatchifyBackbone(_FrozenStagesMixin):
    """A patchify transformer backbone: one strided conv embeds non-overlapping
    patches, then pre-norm transformer blocks mix them globally. Emits a
    single pyramid level at the patch stride. Stage units are
    [stem, stage1..stageN] with one unit per block.
    """

    def __init__(self, dim: int = 64, patch_size: int = 8, depth: int = 2, num_heads: int = 4, mlp_ratio: float = 2.0):
        super().__init__()
        self.dim = dim
        self.patch_size = patch_size
        self.stem = nn.Sequential(nn.Conv2d(3, dim, patch_size, stride=patch_size))
        self.blocks = nn.ModuleList(_TransformerBlock(dim, num_heads, mlp_ratio) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)

    @property
    def out_channels(self) -> list[int]:
        return [self.dim]

    @property
    def out_strides(self) -> list[int]:
        return [self.patch_size]

    def stage_units(self) -> list[tuple[str, nn.Module]]:
        return [("stem", self.stem)] + [(f"stage{i + 1}", b) for i, b in enumerate(self.blocks)]

    def forward(self, images: torch.Tensor, padding_mask: torch.Tensor) -> FeaturePyramid:
        feat = self.stem(images)  # (B, D, H/p, W/p)
        b, d, h, w = feat.shape
        mask = downsample_mask(padding_mask, (h, w))
        pos = sinusoidal_position_embedding(mask, d).flatten(1, 2)  # (B, hw, D)
        tokens = feat.flatten(2).transpose(1, 2) + pos
        flat_mask = mask.flatten(1)
        for block in self.blocks:
            tokens = block(tokens, flat_mask)
        tokens = self.norm(tokens)
        out = tokens.transpose(1, 2).reshape(b, d, h, w)
        return FeaturePyramid(levels=[(out, self.patch_size)], padding_masks=[mask])


def _norm_groups(channels: int) -> int:
    for groups in (32, 16, 8, 4, 2):
        if channels % groups == 0:
            return groups
    return 1


class ChannelProjector(nn.Module):
    """Projects pyramid levels to one embedding width and optionally extends
    the pyramid with extra strided levels from the last input map."""

    def __init__(self, in_channels: list[int], out_dim: int, num_extra_levels: int = 0):
        super().__init__()
        groups = _norm_groups(out_dim)
        self.projections = nn.ModuleList(
            nn.Sequential(nn.Conv2d(c, out_dim, 1), nn.GroupNorm(groups, out_dim)) for c in in_channels
        )
        extras = []
        source = in_channels[-1]
        for _ in range(num_extra_levels):
            extras.append(
                nn.Sequential(nn.Conv2d(source, out_dim, 3, stride=2, padding=1), nn.GroupNorm(groups, out_dim))
            )
            source = out_dim
        self.extras = nn.ModuleList(extras)
        self.out_dim = out_dim

    def forward(self, pyramid: FeaturePyramid) -> FeaturePyramid:
        levels, masks = [], []
        for proj, (feat, stride), mask in zip(self.projections, pyramid.levels, pyramid.padding_masks):
            levels.append((proj(feat), stride))
            masks.append(mask)
        feat, stride = pyramid.levels[-1]
        for extra in self.extras:
            feat = extra(feat)
            stride *= 2
            levels.append((feat, stride))
            masks.append(downsample_mask(pyramid.padding_masks[-1], feat.shape[-2:]))
        return FeaturePyramid(levels=levels, padding_masks=masks)
