from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .metrics import bootstrap_ci, confusion_metrics, delong_ci, pr_curve, roc_curve

REPORT_KEYS = ("acc", "acc_ci", "aupr", "aupr_ci", "auc", "auc_ci", "tpr", "tnr", "threshold",
               "n_pos", "n_neg")


@dataclass
class PredictionSet:
    image_ids: list[str]
    labels: np.ndarray
    scores: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if not (len(self.image_ids) == self.labels.size == self.scores.size):
            raise ValueError("image_ids, labels and scores must have equal length")
        if not np.isfinite(self.scores).all():
            raise ValueError("scores must be finite")
        if self.scores.size and (self.scores.min() < 0 or self.scores.max() > 1):
            raise ValueError("scores must lie in [0, 1]")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")

    def __len__(self):
        return len(self.image_ids)

    def save(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("image_id", "label", "score"))
            for iid, y, s in zip(self.image_ids, self.labels, self.scores):
                w.writerow((iid, int(y), repr(float(s))))
        return path

    @classmethod
    def load(cls, path) -> "PredictionSet":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or list(reader.fieldnames)[:3] != ["image_id", "label",
                                                                            "score"]:
                raise ValueError(f"{path}: expected header image_id,label,score")
            rows = list(reader)
        for i, r in enumerate(rows, start=2):
            if r["label"] not in ("0", "1"):
                raise ValueError(f"{path}: row {i}: label must be 0 or 1, got {r['label']!r}")
        return cls([r["image_id"] for r in rows], [int(r["label"]) for r in rows],
                   [float(r["score"]) for r in rows])


@dataclass
class EvaluationReport:
    acc: float
    acc_ci: tuple[float, float]
    aupr: float
    aupr_ci: tuple[float, float]
    auc: float
    auc_ci: tuple[float, float]
    tpr: float
    tnr: float
    threshold: float
    n_pos: int
    n_neg: int
    curve_files: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def clean(v):
            if isinstance(v, tuple):
                return [clean(x) for x in v]
            if isinstance(v, float) and math.isnan(v):
                return None
            return v

        return {k: clean(getattr(self, k)) for k in REPORT_KEYS}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "EvaluationReport":
        d = json.loads(Path(path).read_text())
        nan = lambda v: float("nan") if v is None else v  # noqa: E731
        return cls(d["acc"], tuple(d["acc_ci"]), d["aupr"], tuple(d["aupr_ci"]), d["auc"],
                   tuple(d["auc_ci"]), nan(d["tpr"]), nan(d["tnr"]), d["threshold"],
                   d["n_pos"], d["n_neg"])

    def row(self) -> str:
        """One table row: ACC (CI) | AUPR (CI) | AUC (CI) | TPR | TNR."""
        f = lambda v, ci: f"{v:.3f} ({ci[0]:.3f}, {ci[1]:.3f})"  # noqa: E731
        return " | ".join([f(self.acc, self.acc_ci), f(self.aupr, self.aupr_ci),
                           f(self.auc, self.auc_ci), f"{self.tpr:.3f}", f"{self.tnr:.3f}"])


def build_report(labels, scores, threshold: float = 0.5, n_boot: int = 2000, seed: int = 0,
                 alpha: float = 0.05) -> EvaluationReport:
    labels = np.asarray(labels)
    acc, tpr, tnr = confusion_metrics(labels, scores, threshold)
    acc_ci = bootstrap_ci("acc", labels, scores, n_boot, seed, alpha, threshold)
    aupr_ci = bootstrap_ci("aupr", labels, scores, n_boot, seed, alpha, threshold)
    auc_ci = delong_ci(labels, scores, alpha)
    n_pos = int(labels.sum())
    return EvaluationReport(
        acc=acc_ci.value, acc_ci=(acc_ci.lo, acc_ci.hi),
        aupr=aupr_ci.value, aupr_ci=(aupr_ci.lo, aupr_ci.hi),
        auc=auc_ci.value, auc_ci=(auc_ci.lo, auc_ci.hi),
        tpr=tpr, tnr=tnr, threshold=float(threshold),
        n_pos=n_pos, n_neg=int(labels.size - n_pos),
    )


def write_curves(labels, scores, out_dir, stem: str = "") -> dict:
    """Write ``roc.csv`` (fpr,tpr,threshold) and ``pr.csv`` (recall,precision,threshold)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prefix = f"{stem}_" if stem else ""
    fpr, tpr, thr = roc_curve(labels, scores)
    roc_path = out / f"{prefix}roc.csv"
    _write_csv(roc_path, ("fpr", "tpr", "threshold"), zip(fpr, tpr, thr))
    rec, prec, thr = pr_curve(labels, scores)
    pr_path = out / f"{prefix}pr.csv"
    _write_csv(pr_path, ("recall", "precision", "threshold"), zip(rec, prec, thr))
    return {"roc": roc_path.name, "pr": pr_path.name}


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) for v in row])
