"""Training configuration and the milestone learning-rate schedule."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass


@dataclass
class TrainConfig:
    """Everything the trainer needs to know, ablation knobs included.

    Learning rates are split by component: the backbone, the deformable
    sampling offsets / reference-point heads, and the remaining
    encoder-decoder parameters each get their own rate. ``base_lr`` is the
    reference rate the others are usually expressed against; it is logged
    but the optimizer only consumes the three component rates.
    """

    max_iter: int = 90_000
    lr_milestones: tuple[int, ...] = (80_000,)
    lr_gamma: float = 0.1
    base_lr: float = 1e-4
    backbone_lr: float = 1e-5
    offsets_refpoints_lr: float = 1e-5
    encdec_lr: float = 1e-4
    batch_size: int = 16
    freeze_stages: int = 1
    ema_decay: float | None = None
    clip_norm: float | None = 0.1
    amp: bool = False
    grad_checkpoint: bool = False
    seed: int = 42
    warmup_iters: int = 1000
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    log_every: int = 50

    def __post_init__(self):
        self.lr_milestones = tuple(self.lr_milestones)
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be positive; got {self.max_iter}")
        if any(b <= a for a, b in zip(self.lr_milestones, self.lr_milestones[1:])):
            raise ValueError(f"lr_milestones must be strictly increasing; got {self.lr_milestones}")
        if any(m < 0 or m >= self.max_iter for m in self.lr_milestones):
            raise ValueError(f"lr_milestones must lie in [0, max_iter); got {self.lr_milestones}")
        for name in ("base_lr", "backbone_lr", "offsets_refpoints_lr", "encdec_lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0; got {getattr(self, name)}")
        if self.ema_decay is not None and not (0.0 <= self.ema_decay < 1.0):
            raise ValueError(f"ema_decay must be in [0, 1) or None; got {self.ema_decay}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError(f"clip_norm must be > 0 or None; got {self.clip_norm}")
        if self.freeze_stages < 0:
            raise ValueError(f"freeze_stages must be >= 0; got {self.freeze_stages}")
        if self.warmup_iters < 0:
            raise ValueError(f"warmup_iters must be >= 0; got {self.warmup_iters}")

    def component_lrs(self) -> dict[str, float]:
        return {
            "backbone": self.backbone_lr,
            "offsets_refpoints": self.offsets_refpoints_lr,
            "encdec": self.encdec_lr,
        }

    def to_dict(self) -> dict:
        # JSON-canonical: tuples become lists so a dump/load round trip
        # compares equal.
        return {k: list(v) if isinstance(v, tuple) else v
                for k, v in dataclasses.asdict(self).items()}


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """Multiplicative factor applied to every group's base rate.

    Steps down by ``lr_gamma`` at each milestone that has been reached;
    a linear warmup over the first ``warmup_iters`` iterations multiplies
    on top, ramping from 1/W at iteration 0 to 1.0 at iteration W-1.
    """
    if not 0 <= iteration < cfg.max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {cfg.max_iter})")
    factor = cfg.lr_gamma ** sum(1 for m in cfg.lr_milestones if m <= iteration)
    if cfg.warmup_iters > 0 and iteration < cfg.warmup_iters:
        factor *= (iteration + 1) / cfg.warmup_iters
    return factor
