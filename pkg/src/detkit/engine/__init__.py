from .checkpoint import (
    CorruptCheckpoint,
    TrainState,
    load_checkpoint,
    read_container,
    save_checkpoint,
    write_container,
)
from .groups import (
    COMPONENTS,
    UntaggedParameter,
    build_optimizer,
    build_param_groups,
    freeze_backbone_stages,
)
from .schedule import TrainConfig, lr_at
from .trainer import (
    EmaTracker,
    LogRecord,
    NonFiniteLoss,
    Trainer,
    round_robin,
    seed_everything,
)

__all__ = [
    "COMPONENTS",
    "CorruptCheckpoint",
    "EmaTracker",
    "LogRecord",
    "NonFiniteLoss",
    "TrainConfig",
    "TrainState",
    "Trainer",
    "UntaggedParameter",
    "build_optimizer",
    "build_param_groups",
    "freeze_backbone_stages",
    "load_checkpoint",
    "lr_at",
    "read_container",
    "round_robin",
    "save_checkpoint",
    "seed_everything",
    "write_container",
]
