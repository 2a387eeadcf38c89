"""Score a manifest with a headed checkpoint and build the full report.

Nothing is trained here. Pointing a checkpoint at a cohort it never saw is the
zero-shot out-of-distribution setting.
"""

from __future__ import annotations

from ..data import Manifest, load_images
from .report import EvaluationReport, PredictionSet, build_report


class EvaluationError(ValueError):
    pass


def predict(ckpt, manifest: Manifest) -> PredictionSet:
    """Score every labeled image of ``manifest``; unlabeled manifests are rejected."""
    from ..train import load_model, predict_scores

    if not ckpt.has_head:
        raise EvaluationError("checkpoint has no classification head; run probe or finetune")
    if not manifest.records:
        raise EvaluationError("manifest is empty")
    unlabeled = [r.image_id for r in manifest.records if r.target is None]
    if unlabeled:
        raise EvaluationError(f"{len(unlabeled)} record(s) lack a label, e.g. {unlabeled[0]!r}")
    model = load_model(ckpt)
    images = load_images(manifest, model.cfg.image_size, model.cfg.channels)
    scores = predict_scores(model, images)
    prov = {"checkpoint_digest": ckpt.digest(), "manifest_digest": manifest.digest()}
    return PredictionSet([r.image_id for r in manifest.records], manifest.labels(), scores, prov)


def evaluate(ckpt, manifest: Manifest, threshold: float = 0.5, n_boot: int = 2000,
             seed: int = 0, alpha: float = 0.05) -> tuple[PredictionSet, EvaluationReport]:
    preds = predict(ckpt, manifest)
    report = build_report(preds.labels, preds.scores, threshold, n_boot, seed, alpha)
    return preds, report
