"""Manifests, patient-disjoint stratified splitting, preprocessing and synthetic radiographs."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import warnings
from collections import defaultdict
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

log = logging.getLogger(__name__)

COLUMNS = ("image_id", "path", "patient_id", "label", "sex", "age_years", "cohort", "split")
LABELS = ("negative", "positive", "unlabeled")
SEXES = ("M", "F", "unknown")
SPLITS = ("train", "test", "")
STRAT_KEYS = ("cohort", "label", "sex", "age_bin")
# upper bounds (exclusive) of the 0-3 / 4-12 / 13-18 bands; anything older is "adult"
AGE_BANDS = ((4.0, "0-3"), (13.0, "4-12"), (19.0, "13-18"))


class ManifestError(ValueError):
    """Schema violation in a manifest file."""


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    path: str
    patient_id: str
    label: str = "unlabeled"
    sex: str = "unknown"
    age_years: float | None = None
    cohort: str = ""
    split: str = ""

    @property
    def target(self) -> int | None:
        return {"negative": 0, "positive": 1}.get(self.label)

    @property
    def age_bin(self) -> str:
        return age_bin(self.age_years)


def age_bin(age: float | None) -> str:
    if age is None:
        return "unknown"
    for upper, name in AGE_BANDS:
        if age < upper:
            return name
    return "adult"


@dataclass
class Manifest:
    records: list[ImageRecord]
    name: str = ""
    channels: int = 1
    mean: float = 0.0
    std: float = 1.0
    root: Path | None = None

    def __post_init__(self):
        seen = {}
        for i, r in enumerate(self.records):
            if r.image_id in seen:
                raise ManifestError(
                    f"duplicate image_id {r.image_id!r} in rows {seen[r.image_id]} and {i + 2}"
                )
            seen[r.image_id] = i + 2

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def resolve(self, record: ImageRecord) -> Path:
        p = Path(record.path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def labeled(self) -> "Manifest":
        """Records with a positive/negative label (unlabeled ones are dropped)."""
        return self.subset([r for r in self.records if r.target is not None])

    def subset(self, records: Iterable[ImageRecord]) -> "Manifest":
        return replace(self, records=list(records))

    def labels(self) -> np.ndarray:
        return np.array([r.target for r in self.records], dtype=np.int64)

    def missing_files(self) -> list[str]:
        return [r.image_id for r in self.records if not self.resolve(r).exists()]

    def digest(self) -> str:
        h = hashlib.sha256()
        for r in self.records:
            h.update(json.dumps(asdict(r), sort_keys=True).encode())
        return h.hexdigest()

    def meta(self) -> dict:
        return {"name": self.name, "channels": self.channels, "mean": self.mean, "std": self.std}


def _meta_path(path: Path) -> Path:
    return path.with_suffix(".meta.json")


def _parse_row(row: dict, lineno: int) -> ImageRecord:
    def bad(field_, value):
        return ManifestError(f"row {lineno}: invalid {field_} {value!r}")

    if not row["image_id"]:
        raise bad("image_id", row["image_id"])
    if not row["patient_id"]:
        raise bad("patient_id", row["patient_id"])
    if row["label"] not in LABELS:
        raise bad("label", row["label"])
    if row["sex"] not in SEXES:
        raise bad("sex", row["sex"])
    if row["split"] not in SPLITS:
        raise bad("split", row["split"])
    age = None
    if row["age_years"].strip():
        try:
            age = float(row["age_years"])
        except ValueError:
            raise bad("age_years", row["age_years"]) from None
        if not math.isfinite(age) or age < 0:
            raise bad("age_years", row["age_years"])
    return ImageRecord(row["image_id"], row["path"], row["patient_id"], row["label"],
                       row["sex"], age, row["cohort"], row["split"])


def load_manifest(path, check_files: bool = False) -> Manifest:
    """Parse and validate a manifest CSV (plus its optional ``.meta.json`` sidecar)."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in COLUMNS if c not in header]
        if missing:
            raise ManifestError(f"row 1: missing column(s) {', '.join(missing)}")
        records, seen = [], {}
        for lineno, row in enumerate(reader, start=2):
            rec = _parse_row(row, lineno)
            if rec.image_id in seen:
                raise ManifestError(
                    f"rows {seen[rec.image_id]} and {lineno}: duplicate image_id {rec.image_id!r}"
                )
            seen[rec.image_id] = lineno
            records.append(rec)
    meta = {}
    if _meta_path(path).exists():
        meta = json.loads(_meta_path(path).read_text())
    m = Manifest(records, name=meta.get("name", path.stem), channels=int(meta.get("channels", 1)),
                 mean=float(meta.get("mean", 0.0)), std=float(meta.get("std", 1.0)),
                 root=path.parent)
    if check_files:
        gone = m.missing_files()
        if gone:
            raise ManifestError(f"{len(gone)} image file(s) not found, first: {gone[0]!r}")
    return m


def _fmt_age(age):
    if age is None:
        return ""
    return repr(float(age)) if age != int(age) else str(int(age))


def save_manifest(manifest: Manifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in manifest.records:
            p = r.path
            if manifest.root is not None and not Path(p).is_absolute():
                # keep paths valid relative to the new location
                p = _relpath(manifest.root / p, path.parent)
            w.writerow([r.image_id, p, r.patient_id, r.label, r.sex, _fmt_age(r.age_years),
                        r.cohort, r.split])
    _meta_path(path).write_text(json.dumps(manifest.meta(), indent=2) + "\n")
    return path


def _relpath(target: Path, start: Path) -> str:
    import os

    return Path(os.path.relpath(target.resolve(), start.resolve())).as_posix()


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------


@dataclass
class StratumReport:
    key: tuple
    n_patients: int
    n_train_patients: int
    n_images: int
    n_train_images: int

    @property
    def patient_share(self) -> float:
        return self.n_train_patients / self.n_patients


def _apportion(sizes: Sequence[int], fraction: float) -> list[int]:
    """Largest-remainder apportionment of ``round(fraction * sum)`` over strata.

    Each share is ``floor`` or ``ceil`` of ``fraction * size``, so no stratum
    deviates from the target fraction by a full patient or more.
    """
    exact = [fraction * s for s in sizes]
    base = [math.floor(e) for e in exact]
    total = int(math.floor(fraction * sum(sizes) + 0.5))
    extra = total - sum(base)
    order = sorted(range(len(sizes)), key=lambda i: (-(exact[i] - base[i]), i))
    for i in order:
        if extra <= 0:
            break
        if base[i] < sizes[i] and exact[i] > base[i]:
            base[i] += 1
            extra -= 1
    return base


def stratified_split(manifest: Manifest, train_fraction: float = 0.8,
                     strat_keys: Sequence[str] = STRAT_KEYS, seed: int = 0,
                     return_report: bool = False):
    """Patient-disjoint split, stratified on ``strat_keys``.

    A patient's stratum is taken from its first record. Within each stratum the
    number of training patients is ``floor`` or ``ceil`` of
    ``train_fraction * n_patients``; patients are placed largest-first (ties in
    seeded random order) on whichever side is further below its image target.
    """
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    bad = [k for k in strat_keys if k not in STRAT_KEYS]
    if bad:
        raise ValueError(f"unknown stratification key(s) {bad}; allowed {STRAT_KEYS}")
    rng = np.random.default_rng(seed)

    patients: dict[str, list[ImageRecord]] = {}
    for r in manifest.records:
        patients.setdefault(r.patient_id, []).append(r)
    strata: dict[tuple, list[str]] = defaultdict(list)
    for pid, recs in patients.items():
        strata[tuple(getattr(recs[0], k) for k in strat_keys)].append(pid)
    keys = sorted(strata, key=lambda k: tuple(map(str, k)))
    quotas = _apportion([len(strata[k]) for k in keys], train_fraction)

    train_ids: set[str] = set()
    report = []
    for key, quota in zip(keys, quotas):
        pids = sorted(strata[key])
        shuffled = [pids[i] for i in rng.permutation(len(pids))]
        # stable sort keeps the seeded order among equal-sized patients
        ordered = sorted(shuffled, key=lambda p: -len(patients[p]))
        n_img = sum(len(patients[p]) for p in pids)
        tgt_train, tgt_test = train_fraction * n_img, (1 - train_fraction) * n_img
        left_train, left_test = quota, len(pids) - quota
        img_train = img_test = 0
        for pid in ordered:
            size = len(patients[pid])
            if left_test == 0 or (left_train > 0 and tgt_train - img_train >= tgt_test - img_test):
                train_ids.add(pid)
                left_train -= 1
                img_train += size
            else:
                left_test -= 1
                img_test += size
        report.append(StratumReport(key, len(pids), quota, n_img, img_train))
        if len(pids) < 2:
            warnings.warn(f"stratum {key} has {len(pids)} patient(s); achieved train share "
                          f"{quota / len(pids):.2f} vs target {train_fraction}")

    train = [replace(r, split="train") for r in manifest.records if r.patient_id in train_ids]
    test = [replace(r, split="test") for r in manifest.records if r.patient_id not in train_ids]
    out = (manifest.subset(train), manifest.subset(test))
    return (*out, report) if return_report else out


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IntensityStats:
    mean: float = 0.0
    std: float = 1.0


def to_unit_range(raw) -> np.ndarray:
    """Raw pixel array (H, W) or (H, W, C) -> float64 in [0, 1] by integer bit depth."""
    a = np.asarray(raw)
    if a.dtype == np.uint8:
        return a.astype(np.float64) / 255.0
    if a.dtype == np.uint16:
        return a.astype(np.float64) / 65535.0
    if np.issubdtype(a.dtype, np.integer):
        raise ValueError(f"unsupported integer pixel type {a.dtype}")
    return a.astype(np.float64)


def resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize of a (C, H, W) array to (C, size, size)."""
    if img.shape[-2:] == (size, size):
        return img
    t = torch.from_numpy(np.ascontiguousarray(img)).unsqueeze(0)
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return out[0].numpy()


def preprocess(raw, target_size: int, stats: IntensityStats = IntensityStats(),
               channels: int = 1) -> torch.Tensor:
    """Decode-level array -> standardised float32 ``(C, target, target)`` tensor.

    RGB is collapsed to luminance (ITU-R 601 weights) when ``channels == 1``;
    grayscale is replicated when ``channels == 3``.
    """
    if isinstance(raw, (str, Path)):
        raw = read_image(raw)
    if isinstance(raw, torch.Tensor):
        a = raw.detach().cpu().numpy().astype(np.float64)
        if a.ndim == 2:
            a = a[None]
    else:
        a = to_unit_range(raw)
        if a.ndim == 2:
            a = a[None]
        elif a.ndim == 3:
            a = np.moveaxis(a, -1, 0)  # HWC -> CHW
        else:
            raise ValueError(f"cannot interpret image of shape {a.shape}")
    if a.shape[0] == 4:
        a = a[:3]
    if channels == 1 and a.shape[0] == 3:
        a = (0.299 * a[0] + 0.587 * a[1] + 0.114 * a[2])[None]
    elif channels == 3 and a.shape[0] == 1:
        a = np.repeat(a, 3, axis=0)
    elif a.shape[0] != channels:
        raise ValueError(f"cannot convert {a.shape[0]} channel(s) to {channels}")
    a = resize_bilinear(a, target_size)
    if stats.std <= 0:
        raise ValueError("stats.std must be positive")
    a = (a - stats.mean) / stats.std
    return torch.from_numpy(np.ascontiguousarray(a)).float()


def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode in ("I;16", "I;16B", "I;16L"):
                return np.array(im, dtype=np.uint16)
            if im.mode == "I":
                return np.array(im).astype(np.uint16)
            if im.mode not in ("L", "RGB", "RGBA"):
                im = im.convert("RGB")
            return np.array(im)
    except (OSError, ValueError) as exc:
        raise ValueError(f"cannot decode image {path}: {exc}") from exc


def load_images(manifest: Manifest, size: int, channels: int = 1,
                stats: IntensityStats | None = None) -> torch.Tensor:
    """Preprocess every manifest image, in manifest order, into ``(N, C, size, size)``."""
    if stats is None:
        stats = IntensityStats(manifest.mean, manifest.std)
    if not manifest.records:
        return torch.zeros(0, channels, size, size)
    return torch.stack([preprocess(read_image(manifest.resolve(r)), size, stats, channels)
                        for r in manifest.records])


# ---------------------------------------------------------------------------
# Synthetic radiographs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthStyle:
    """Appearance of one synthetic acquisition domain."""

    cohort: str = "synth-adult"
    age_range: tuple[float, float] = (19.0, 80.0)
    lung_scale: float = 1.0
    contrast: float = 1.0
    noise: float = 0.05
    opacity_gain: float = 0.35


ADULT = SynthStyle()
PEDIATRIC = SynthStyle(cohort="synth-pediatric", age_range=(0.0, 18.0), lung_scale=0.85,
                       contrast=0.8, noise=0.07, opacity_gain=0.3)


def _render(rng: np.random.Generator, size: int, positive: bool, style: SynthStyle) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    # smooth body/background gradient
    img = 0.25 + 0.15 * np.exp(-((xx - 0.5) ** 2) / 0.2) + rng.uniform(-0.05, 0.05) * yy
    fields = []
    sx = style.lung_scale * rng.uniform(0.14, 0.19)
    sy = style.lung_scale * rng.uniform(0.26, 0.34)
    cy = 0.5 + rng.uniform(-0.04, 0.04)
    for side in (-1, 1):
        cx = 0.5 + side * rng.uniform(0.18, 0.23)
        fields.append((cx, cy, sx * rng.uniform(0.95, 1.05), sy * rng.uniform(0.95, 1.05)))
        r2 = ((xx - cx) / fields[-1][2]) ** 2 + ((yy - cy) / fields[-1][3]) ** 2
        img = img + 0.45 * style.contrast / (1 + np.exp((r2 - 1) * 8))
    # ribs: faint horizontal stripes inside the chest
    img = img + 0.04 * np.sin(yy * rng.uniform(20, 26) + rng.uniform(0, np.pi))
    if positive:
        for _ in range(int(rng.integers(1, 4))):
            cx, cy_, fx, fy = fields[int(rng.integers(0, 2))]
            ang, rad = rng.uniform(0, 2 * np.pi), np.sqrt(rng.uniform(0, 0.5))
            bx, by = cx + rad * fx * np.cos(ang), cy_ + rad * fy * np.sin(ang)
            br = rng.uniform(0.05, 0.09)
            blob = np.exp(-(((xx - bx) ** 2 + (yy - by) ** 2) / (2 * br**2)))
            img = img - style.opacity_gain * rng.uniform(0.7, 1.3) * blob
    img = img * rng.uniform(0.85, 1.15) + rng.uniform(-0.08, 0.08)
    img = img + style.noise * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def _patients(rng: np.random.Generator, n: int) -> list[int]:
    """Partition ``n`` images into patients of 1-3 images."""
    sizes = []
    while n > 0:
        s = min(int(rng.integers(1, 4)), n)
        sizes.append(s)
        n -= s
    return sizes


def synth_generate(n_images: int, positive_fraction: float, image_size: int, seed: int,
                   out_dir=None, style: SynthStyle = ADULT, id_prefix: str = "img",
                   single_image_patients: bool = False, manifest_name: str = "manifest.csv"):
    """Procedurally generate lung-field-like radiographs and their manifest.

    Lung fields appear as two bright ellipses; positives carry 1-3 dark blob
    "opacities" inside a field (on inverted-intensity conventions these would
    read as bright). Exactly ``round(n * positive_fraction)`` images are
    positive. Returns ``(manifest, images)`` where ``images`` is a uint8 array
    ``(n, size, size)``; when ``out_dir`` is given PNGs and ``manifest.csv`` are
    written there.
    """
    if n_images < 2:
        raise ValueError("n_images must be >= 2")
    if not 0 < positive_fraction < 1:
        raise ValueError("positive_fraction must be in (0, 1)")
    if image_size < 8:
        raise ValueError("image_size must be >= 8")
    rng = np.random.default_rng(seed)
    n_pos = int(math.floor(n_images * positive_fraction + 0.5))
    n_pos = min(max(n_pos, 1), n_images - 1)

    plan = []  # (label, patient_size)
    for label, count in (("positive", n_pos), ("negative", n_images - n_pos)):
        sizes = [1] * count if single_image_patients else _patients(rng, count)
        plan += [(label, s) for s in sizes]
    order = rng.permutation(len(plan))
    sub_cohorts = (f"{style.cohort}-A", f"{style.cohort}-B")

    records, images = [], []
    k = 0
    for pnum, idx in enumerate(order):
        label, size = plan[idx]
        pid = f"{id_prefix}-p{pnum:05d}"
        sex = ("M", "F")[int(rng.integers(0, 2))]
        age = float(round(rng.uniform(*style.age_range)))
        cohort = sub_cohorts[int(rng.integers(0, 2))]
        for _ in range(size):
            iid = f"{id_prefix}{k:05d}"
            arr = _render(rng, image_size, label == "positive", style)
            images.append(np.round(arr * 255).astype(np.uint8))
            records.append(ImageRecord(iid, f"images/{iid}.png", pid, label, sex, age, cohort))
            k += 1
    images = np.stack(images)
    mean = float(images.mean() / 255.0)
    std = float(images.std() / 255.0)
    manifest = Manifest(records, name=f"synthetic-{style.cohort}", channels=1,
                        mean=round(mean, 6), std=round(std, 6))
    if out_dir is not None:
        out = Path(out_dir)
        (out / "images").mkdir(parents=True, exist_ok=True)
        for rec, arr in zip(records, images):
            Image.fromarray(arr, mode="L").save(out / rec.path, optimize=False)
        manifest.root = out
        save_manifest(manifest, out / manifest_name)
    return manifest, images
