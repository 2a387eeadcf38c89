from .metrics import (
    BACKEND,
    ConfidenceInterval,
    accuracy,
    aupr,
    bootstrap_ci,
    bootstrap_distribution,
    confusion_metrics,
    delong_ci,
    delong_placements,
    delong_variance,
    midranks,
    pr_curve,
    roc_auc,
    roc_curve,
)
from .protocol import EvaluationError, evaluate, predict
from .report import REPORT_KEYS, EvaluationReport, PredictionSet, build_report, write_curves

__all__ = [
    "BACKEND", "ConfidenceInterval", "accuracy", "aupr", "bootstrap_ci", "bootstrap_distribution",
    "confusion_metrics", "delong_ci", "delong_placements", "delong_variance", "midranks",
    "pr_curve", "roc_auc", "roc_curve", "REPORT_KEYS", "EvaluationReport", "PredictionSet",
    "build_report", "write_curves", "EvaluationError", "evaluate", "predict",
]
