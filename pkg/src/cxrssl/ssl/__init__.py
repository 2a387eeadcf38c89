from .losses import (
    ContrastState,
    DistillState,
    UndefinedLossError,
    center_update,
    dino_loss,
    ema_update,
    info_nce,
    mae_loss,
    moco_loss,
)
from .masking import MaskPlan, batch_masks, plan_mask
from .objectives import (
    OBJECTIVES,
    DINOObjective,
    MAEObjective,
    MoCoV3Objective,
    Objective,
    SSLConfig,
    build_objective,
    cosine_ramp,
)
from .views import ViewRecipe, ViewSpec, augment_batch, make_views

__all__ = [
    "ContrastState", "DistillState", "UndefinedLossError", "center_update", "dino_loss",
    "ema_update", "info_nce", "mae_loss", "moco_loss", "MaskPlan", "batch_masks", "plan_mask",
    "OBJECTIVES", "DINOObjective", "MAEObjective", "MoCoV3Objective", "Objective", "SSLConfig",
    "build_objective", "cosine_ramp", "ViewRecipe", "ViewSpec", "augment_batch", "make_views",
]
