from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

PHASES = ("pretrain", "probe", "finetune")
TRAIN_OBJECTIVES = ("mae", "moco_v3", "dino", "supervised")


@dataclass(frozen=True)
class TrainConfig:
    phase: str = "pretrain"
    objective: str = "mae"
    batch_size: int = 64
    epochs: int = 200
    lr_initial: float = 5e-4
    lr_min: float = 1e-6
    warmup_epochs: int = 10
    wd_start: float = 0.04
    wd_end: float = 0.4
    wd_schedule: str = "cosine"  # or "constant" (stays at wd_start)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_grad: float = 3.0  # global-norm clip for pre-training; 0 disables
    seed: int = 0

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.objective not in TRAIN_OBJECTIVES:
            raise ValueError(f"objective must be one of {TRAIN_OBJECTIVES}, got {self.objective!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.epochs > 0 and not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError(f"warmup_epochs ({self.warmup_epochs}) must be < epochs ({self.epochs})")
        if not 0 <= self.lr_min <= self.lr_initial:
            raise ValueError("need 0 <= lr_min <= lr_initial")
        if self.wd_schedule not in ("cosine", "constant"):
            raise ValueError("wd_schedule must be 'cosine' or 'constant'")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in dict(d).items() if k in names})


@dataclass(frozen=True)
class ScheduleState:
    global_step: int
    steps_per_epoch: int
    current_lr: float
    current_wd: float

    @classmethod
    def at(cls, step: int, cfg: TrainConfig, steps_per_epoch: int) -> "ScheduleState":
        lr, wd = schedule_at(step, cfg, steps_per_epoch)
        return cls(step, steps_per_epoch, lr, wd)


def schedule_at(step: int, cfg: TrainConfig, steps_per_epoch: int) -> tuple[float, float]:
    """Learning rate and weight decay for optimizer step ``step`` (0-based).

    LR ramps linearly from 0 over the warm-up steps, then follows a cosine from
    ``lr_initial`` (first post-warm-up step) down to ``lr_min`` (last step).
    Weight decay follows a half cosine from ``wd_start`` to ``wd_end`` across
    all steps.
    """
    if steps_per_epoch < 1:
        raise ValueError("steps_per_epoch must be >= 1")
    total = cfg.epochs * steps_per_epoch
    if not 0 <= step < total:
        raise ValueError(f"step {step} outside [0, {total})")
    warm = cfg.warmup_epochs * steps_per_epoch
    if step < warm:
        lr = cfg.lr_initial * step / warm
    else:
        span = total - 1 - warm
        progress = (step - warm) / span if span > 0 else 1.0
        lr = cfg.lr_min + 0.5 * (cfg.lr_initial - cfg.lr_min) * (1 + math.cos(math.pi * progress))
    if cfg.wd_schedule == "constant" or total == 1:
        wd = cfg.wd_start
    else:
        p = step / (total - 1)
        wd = cfg.wd_start + 0.5 * (cfg.wd_end - cfg.wd_start) * (1 - math.cos(math.pi * p))
    return lr, wd
