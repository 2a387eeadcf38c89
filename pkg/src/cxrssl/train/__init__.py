from .checkpoint import (
    FORMAT_VERSION,
    Checkpoint,
    CheckpointError,
    CheckpointVersionError,
)
from .engine import (
    TrainingDivergedError,
    TrainLog,
    extract_features,
    finetune,
    init_checkpoint,
    load_model,
    model_config,
    predict_scores,
    pretrain,
    probe,
)
from .optim import AdamW, NonFiniteGradientError, adamw_step
from .schedule import ScheduleState, TrainConfig, schedule_at

__all__ = [
    "FORMAT_VERSION", "Checkpoint", "CheckpointError", "CheckpointVersionError",
    "TrainingDivergedError", "TrainLog", "extract_features", "finetune", "init_checkpoint",
    "load_model", "model_config", "predict_scores", "pretrain", "probe", "AdamW", "NonFiniteGradientError",
    "adamw_step", "ScheduleState", "TrainConfig", "schedule_at",
]
