"""Single-process training loop: schedule, clipping, EMA, logging, resume."""

from __future__ import annotations

import json
import logging
import random
import resource
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .checkpoint import TrainState
from .groups import build_optimizer, freeze_backbone_stages
from .schedule import TrainConfig, lr_at

logger = logging.getLogger(__name__)


class NonFiniteLoss(RuntimeError):
    """Total loss became NaN/inf; carries the per-component values."""

    def __init__(self, iteration: int, components: dict[str, float]):
        self.iteration = iteration
        self.components = components
        dump = ", ".join(f"{k}={v:.4g}" for k, v in components.items())
        super().__init__(f"non-finite loss at iteration {iteration}: {dump}")


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


class EmaTracker:
    """Exponential moving average of model parameters.

    update() applies shadow = decay * shadow + (1 - decay) * param, so
    decay 0 copies the live weights and decay 1 never moves.
    """

    def __init__(self, model: nn.Module, decay: float):
        self.decay = decay
        self.shadow = {
            name: param.detach().clone() for name, param in model.named_parameters()
        }

    @torch.no_grad()
    def update(self, model: nn.Module) -> None:
        for name, param in model.named_parameters():
            self.shadow[name].mul_(self.decay).add_(param.detach(), alpha=1.0 - self.decay)

    def state_dict(self) -> dict[str, torch.Tensor]:
        return dict(self.shadow)

    def load_state_dict(self, state: dict[str, torch.Tensor]) -> None:
        for name, tensor in state.items():
            self.shadow[name].copy_(tensor)

    def model_state(self, model: nn.Module) -> dict[str, torch.Tensor]:
        """Full eval-ready state dict: live buffers, averaged parameters."""
        merged = {k: v.detach().clone() for k, v in model.state_dict().items()}
        for name, tensor in self.shadow.items():
            merged[name] = tensor.clone()
        return merged


@dataclass
class LogRecord:
    iteration: int
    lr: float
    losses: dict[str, float]
    imgs_per_sec: float
    peak_memory_mb: float | None

    def as_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _peak_memory_mb() -> float | None:
    try:
        return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0
    except (ValueError, OSError):
        return None


def round_robin(batches: Sequence) -> Callable[[int], object]:
    """Batch source cycling through a fixed list; pure in the iteration."""
    if not batches:
        raise ValueError("need at least one batch")

    def source(iteration: int):
        return batches[iteration % len(batches)]

    return source


class Trainer:
    """Drives train_step from the current iteration to cfg.max_iter.

    ``batch_source`` maps an iteration index to a collated batch, which
    keeps the data order a pure function of the config seed and makes
    resume exact without serializing loader state.
    """

    def __init__(
        self,
        model: nn.Module,
        criterion: nn.Module,
        cfg: TrainConfig,
        batch_source: Callable[[int], object],
        out_dir: str | Path | None = None,
    ):
        self.model = model
        self.criterion = criterion
        self.cfg = cfg
        self.batch_source = batch_source
        self.out_dir = Path(out_dir) if out_dir is not None else None
        freeze_backbone_stages(model, cfg.freeze_stages)
        if cfg.amp and not torch.cuda.is_available():
            logger.info("amp requested but no accelerator present; running full precision")
        if cfg.grad_checkpoint:
            if hasattr(model, "encoder") and hasattr(model.encoder, "grad_checkpoint"):
                model.encoder.grad_checkpoint = True
            else:
                logger.info("grad_checkpoint requested but the encoder does not support it")
        self.optimizer = build_optimizer(model, cfg)
        self.ema = EmaTracker(model, cfg.ema_decay) if cfg.ema_decay is not None else None
        self.iteration = 0
        self.best_metric: float | None = None
        self.records: list[LogRecord] = []
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)

    # -- schedule ---------------------------------------------------------

    def _apply_lr(self) -> float:
        factor = lr_at(self.iteration, self.cfg)
        for group in self.optimizer.param_groups:
            group["lr"] = group["base_lr"] * factor
        return factor

    @property
    def current_lr(self) -> float:
        """Reference rate: the encoder-decoder group after scheduling."""
        for group in self.optimizer.param_groups:
            if group.get("component") == "encdec":
                return group["lr"]
        return self.optimizer.param_groups[0]["lr"]

    # -- stepping ---------------------------------------------------------

    def train_step(self, batch) -> dict[str, float]:
        self.model.train()
        self._apply_lr()
        self.optimizer.zero_grad(set_to_none=True)
        output = self.model(batch.images, batch.padding_mask, targets=batch.targets)
        losses = self.criterion(output, batch.targets)
        report = {key: float(value.detach()) for key, value in losses.items()}
        if not torch.isfinite(losses["total"]):
            raise NonFiniteLoss(self.iteration, report)
        losses["total"].backward()
        if self.cfg.clip_norm is not None:
            nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.clip_norm)
        self.optimizer.step()
        if self.ema is not None:
            self.ema.update(self.model)
        self.iteration += 1
        return report

    def train(self, until: int | None = None) -> list[LogRecord]:
        target = self.cfg.max_iter if until is None else min(until, self.cfg.max_iter)
        window_start = time.perf_counter()
        window_images = 0
        while self.iteration < target:
            batch = self.batch_source(self.iteration)
            report = self.train_step(batch)
            window_images += batch.images.shape[0]
            if self.iteration % self.cfg.log_every == 0 or self.iteration == target:
                elapsed = max(time.perf_counter() - window_start, 1e-9)
                record = LogRecord(
                    iteration=self.iteration,
                    lr=self.current_lr,
                    losses=report,
                    imgs_per_sec=window_images / elapsed,
                    peak_memory_mb=_peak_memory_mb(),
                )
                self.records.append(record)
                self._write_record(record)
                window_start = time.perf_counter()
                window_images = 0
        return self.records

    def _write_record(self, record: LogRecord) -> None:
        logger.info("iter %d lr %.3g loss %.4f", record.iteration, record.lr,
                    record.losses.get("total", float("nan")))
        if self.out_dir is not None:
            with open(self.out_dir / "train_log.jsonl", "a") as handle:
                handle.write(record.as_json() + "\n")

    # -- persistence ------------------------------------------------------

    def state(self) -> TrainState:
        return TrainState(
            iteration=self.iteration,
            model={k: v.detach().clone() for k, v in self.model.state_dict().items()},
            optimizer=self.optimizer.state_dict(),
            rng={"torch": torch.get_rng_state()},
            ema=self.ema.state_dict() if self.ema is not None else None,
            best_metric=self.best_metric,
            config=self.cfg.to_dict(),
        )

    def load_state(self, state: TrainState) -> None:
        self.model.load_state_dict(state.model)
        self.optimizer.load_state_dict(state.optimizer)
        if self.ema is not None and state.ema is not None:
            self.ema.load_state_dict(state.ema)
        if "torch" in state.rng:
            torch.set_rng_state(state.rng["torch"].to(torch.uint8))
        self.iteration = state.iteration
        self.best_metric = state.best_metric
