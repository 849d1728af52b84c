"""Per-component optimizer parameter groups and backbone freezing."""

from __future__ import annotations

import torch
from torch import nn

from ..models.detector import parameter_components
from .schedule import TrainConfig

COMPONENTS = ("backbone", "offsets_refpoints", "encdec")


class UntaggedParameter(RuntimeError):
    """A trainable parameter has no learning-rate component tag."""


def build_param_groups(
    model: nn.Module,
    cfg: TrainConfig,
    components: dict[str, str] | None = None,
) -> list[dict]:
    """Partition trainable parameters into three lr groups.

    ``components`` maps parameter name to component tag; by default it is
    derived from the model structure. Every trainable parameter must be
    tagged, and the groups are disjoint by construction (each parameter
    lands in exactly one bucket).
    """
    if components is None:
        components = parameter_components(model)
    lrs = cfg.component_lrs()
    buckets: dict[str, list] = {name: [] for name in COMPONENTS}
    names: dict[str, list[str]] = {name: [] for name in COMPONENTS}
    for name, param in model.named_parameters():
        if not param.requires_grad:
            continue
        tag = components.get(name)
        if tag is None or tag not in buckets:
            raise UntaggedParameter(f"parameter {name!r} has no component tag")
        buckets[tag].append(param)
        names[tag].append(name)
    return [
        {"component": tag, "lr": lrs[tag], "params": buckets[tag], "param_names": names[tag]}
        for tag in COMPONENTS
    ]


def _decay_exempt(param: torch.Tensor) -> bool:
    # Normalization weights and all biases are 1-d; embeddings and matrices
    # keep weight decay.
    return param.ndim <= 1


def build_optimizer(model: nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    """AdamW over the component groups, decay-exempting norms and biases.

    Each of the three lr groups is split into a decayed and an exempt
    sub-group; every group records its ``base_lr`` so the trainer can apply
    the schedule factor in place.
    """
    optimizer_groups = []
    for group in build_param_groups(model, cfg):
        decayed = [p for p in group["params"] if not _decay_exempt(p)]
        exempt = [p for p in group["params"] if _decay_exempt(p)]
        for params, decay in ((decayed, cfg.weight_decay), (exempt, 0.0)):
            if params:
                optimizer_groups.append({
                    "params": params,
                    "lr": group["lr"],
                    "base_lr": group["lr"],
                    "weight_decay": decay,
                    "component": group["component"],
                })
    return torch.optim.AdamW(optimizer_groups, betas=cfg.betas)


def freeze_backbone_stages(model: nn.Module, n: int) -> nn.Module:
    """Freeze the first ``n`` backbone stage units (stem counts as one).

    Frozen units stop receiving gradients and their normalization layers
    run with inference statistics even in train mode; the param-group
    builder then skips them automatically.
    """
    backbone = model.backbone if hasattr(model, "backbone") else model
    backbone.freeze_stages(n)
    return model
