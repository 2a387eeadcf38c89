import csv
import math
from collections import Counter, defaultdict
from dataclasses import replace

import numpy as np
import pytest
import torch
from PIL import Image
from scipy.ndimage import binary_erosion, binary_fill_holes, gaussian_filter

from cxrssl.data import (
    COLUMNS,
    PEDIATRIC,
    ImageRecord,
    IntensityStats,
    Manifest,
    ManifestError,
    age_bin,
    load_images,
    load_manifest,
    preprocess,
    save_manifest,
    stratified_split,
    synth_generate,
)
from cxrssl.eval import roc_auc


def _write_csv(path, rows, header=COLUMNS):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def _row(i, label="negative", pid=None, **kw):
    base = dict(image_id=f"im{i}", path=f"im{i}.png", patient_id=pid or f"p{i}", label=label,
                sex="F", age_years="40", cohort="c", split="")
    base.update(kw)
    return [base[c] for c in COLUMNS]


# -- manifests -----------------------------------------------------------------


def test_load_well_formed_manifest(tmp_path):
    p = _write_csv(tmp_path / "m.csv", [_row(0), _row(1, "positive"), _row(2, "unlabeled")])
    m = load_manifest(p)
    assert len(m) == 3
    assert [r.image_id for r in m] == ["im0", "im1", "im2"]
    assert [r.target for r in m] == [0, 1, None]
    assert len(m.labeled()) == 2


def test_duplicate_image_id_names_both_rows(tmp_path):
    p = _write_csv(tmp_path / "m.csv", [_row(0), _row(1), _row(0)])
    with pytest.raises(ManifestError, match=r"rows 2 and 4"):
        load_manifest(p)


def test_unknown_label_names_row_and_value(tmp_path):
    p = _write_csv(tmp_path / "m.csv", [_row(0), _row(1, "maybe")])
    with pytest.raises(ManifestError, match=r"row 3.*maybe"):
        load_manifest(p)


@pytest.mark.parametrize("field,value", [("sex", "X"), ("age_years", "-3"), ("age_years", "old"),
                                         ("split", "val")])
def test_bad_field_values(tmp_path, field, value):
    p = _write_csv(tmp_path / "m.csv", [_row(0, **{field: value})])
    with pytest.raises(ManifestError, match=field):
        load_manifest(p)


def test_missing_column(tmp_path):
    p = _write_csv(tmp_path / "m.csv", [_row(0)[:-1]], header=COLUMNS[:-1])
    with pytest.raises(ManifestError, match="split"):
        load_manifest(p)


def test_missing_files_reported(tmp_path):
    p = _write_csv(tmp_path / "m.csv", [_row(0)])
    assert load_manifest(p).missing_files() == ["im0"]
    with pytest.raises(ManifestError):
        load_manifest(p, check_files=True)


def test_manifest_round_trip(tmp_path):
    m, _ = synth_generate(12, 0.5, 16, seed=0, out_dir=tmp_path / "d")
    again = load_manifest(tmp_path / "d" / "manifest.csv", check_files=True)
    assert again.records == m.records
    assert (again.mean, again.std) == (m.mean, m.std)
    moved = save_manifest(again, tmp_path / "elsewhere" / "copy.csv")
    relocated = load_manifest(moved, check_files=True)
    assert [r.path for r in relocated][0] == "../d/images/img00000.png"
    assert [replace(r, path="") for r in relocated] == [replace(r, path="") for r in m]


@pytest.mark.parametrize("age,band", [(None, "unknown"), (0, "0-3"), (3.9, "0-3"), (4, "4-12"),
                                      (12.5, "4-12"), (13, "13-18"), (18.9, "13-18"),
                                      (19, "adult"), (70, "adult")])
def test_age_bins(age, band):
    assert age_bin(age) == band


# -- splitting -------------------------------------------------------------------


def _records(n_patients, sizes=None, **attrs):
    recs, k = [], 0
    for p in range(n_patients):
        for _ in range(sizes[p] if sizes else 1):
            recs.append(ImageRecord(f"i{k}", f"i{k}.png", f"p{p}", attrs.get("label", "negative"),
                                    attrs.get("sex", "F"), attrs.get("age", 40.0),
                                    attrs.get("cohort", "c")))
            k += 1
    return recs


def test_split_800_uniform_gives_640_160():
    train, test = stratified_split(Manifest(_records(800)), 0.8, seed=0)
    assert (len(train), len(test)) == (640, 160)


def test_split_keeps_patient_images_together():
    recs = _records(20, sizes=[5] + [1] * 19)
    train, test = stratified_split(Manifest(recs), 0.8, seed=3)
    sides = {r.split for r in train.records + test.records if r.patient_id == "p0"}
    assert len(sides) == 1


def test_split_ten_patients_one_stratum():
    train, test = stratified_split(Manifest(_records(10, sizes=[2] * 10)), 0.8, seed=1)
    assert len({r.patient_id for r in train}) == 8
    assert len({r.patient_id for r in test}) == 2


def test_split_invariants_on_synthetic_manifest():
    m, _ = synth_generate(1000, 0.31, 8, seed=5)
    train, test, report = stratified_split(m, 0.8, seed=2, return_report=True)
    assert not {r.patient_id for r in train} & {r.patient_id for r in test}
    assert len(train) + len(test) == 1000
    for s in report:
        assert abs(s.n_train_patients - 0.8 * s.n_patients) < 1
    # recompute shares independently of the report
    side = {r.patient_id: "train" for r in train}
    strata = defaultdict(set)
    for r in m.records:
        strata[(r.cohort, r.label, r.sex, r.age_bin)].add(r.patient_id)
    for pids in strata.values():
        n_train = sum(side.get(p) == "train" for p in pids)
        assert abs(n_train - 0.8 * len(pids)) < 1


def test_split_deterministic_and_seed_sensitive():
    m, _ = synth_generate(300, 0.31, 8, seed=1)
    a = stratified_split(m, 0.8, seed=4)[0]
    b = stratified_split(m, 0.8, seed=4)[0]
    c = stratified_split(m, 0.8, seed=5)[0]
    assert [r.image_id for r in a] == [r.image_id for r in b]
    assert [r.image_id for r in a] != [r.image_id for r in c]


def test_split_warns_on_tiny_stratum():
    recs = _records(10) + _records(1, cohort="rare")
    recs[-1] = ImageRecord("solo", "solo.png", "solo-p", "negative", "F", 40.0, "rare")
    with pytest.warns(UserWarning, match="rare"):
        stratified_split(Manifest(recs), 0.8, seed=0)


@pytest.mark.parametrize("kw", [dict(train_fraction=1.0), dict(train_fraction=0.0),
                                dict(strat_keys=("hospital",))])
def test_split_argument_errors(kw):
    with pytest.raises(ValueError):
        stratified_split(Manifest(_records(4)), **kw)


# -- preprocessing ----------------------------------------------------------------


def _bilinear_oracle(img, size):
    """Half-pixel-centred bilinear resize with edge clamping, one pixel at a time."""
    h, w = img.shape
    out = np.zeros((size, size))
    for i in range(size):
        for j in range(size):
            y = max((i + 0.5) * h / size - 0.5, 0.0)
            x = max((j + 0.5) * w / size - 0.5, 0.0)
            y0, x0 = min(int(math.floor(y)), h - 1), min(int(math.floor(x)), w - 1)
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            dy, dx = y - y0, x - x0
            out[i, j] = ((1 - dy) * (1 - dx) * img[y0, x0] + (1 - dy) * dx * img[y0, x1]
                         + dy * (1 - dx) * img[y1, x0] + dy * dx * img[y1, x1])
    return out


def test_constant_image_standardises_to_zero():
    raw = np.full((20, 20), 102, dtype=np.uint8)
    out = preprocess(raw, 16, IntensityStats(mean=102 / 255, std=1.0))
    assert out.shape == (1, 16, 16)
    assert torch.count_nonzero(out) == 0


def test_resize_shape():
    assert preprocess(np.zeros((512, 512), dtype=np.uint8), 256).shape == (1, 256, 256)


def test_checkerboard_matches_bilinear_oracle():
    board = np.array([[0, 255], [255, 0]], dtype=np.uint8)
    got = preprocess(board, 7)[0].numpy()
    assert np.max(np.abs(got - _bilinear_oracle(board / 255.0, 7))) < 1e-6
    up = preprocess(board, 8)[0].numpy()
    assert np.max(np.abs(up - _bilinear_oracle(board / 255.0, 8))) < 1e-6


def test_preprocess_idempotent_with_identity_stats():
    rng = np.random.default_rng(0)
    once = preprocess(rng.integers(0, 256, (40, 40), dtype=np.uint8), 32)
    assert torch.equal(preprocess(once, 32), once)


def test_rgb_collapses_to_luminance():
    rgb = np.zeros((4, 4, 3), dtype=np.uint8)
    rgb[..., 0] = 255
    out = preprocess(rgb, 4)
    assert torch.allclose(out, torch.full((1, 4, 4), 0.299), atol=1e-7)
    assert preprocess(rgb, 4, channels=3).shape == (3, 4, 4)


def test_sixteen_bit_png(tmp_path):
    arr = np.full((6, 6), 65535, dtype=np.uint16)
    Image.fromarray(arr).save(tmp_path / "x.png")
    assert torch.allclose(preprocess(tmp_path / "x.png", 6), torch.ones(1, 6, 6))


def test_undecodable_file(tmp_path):
    (tmp_path / "bad.png").write_bytes(b"not a png")
    with pytest.raises(ValueError, match="cannot decode"):
        preprocess(tmp_path / "bad.png", 8)


def test_load_images_uses_manifest_stats(tmp_path):
    m, imgs = synth_generate(6, 0.5, 16, seed=0, out_dir=tmp_path)
    x = load_images(load_manifest(tmp_path / "manifest.csv"), 16)
    expect = (imgs[2] / 255.0 - m.mean) / m.std
    assert x.shape == (6, 1, 16, 16)
    assert np.allclose(x[2, 0].numpy(), expect, atol=1e-5)


# -- synthetic data ---------------------------------------------------------------


def test_synth_counts():
    m, imgs = synth_generate(100, 0.31, 32, seed=0)
    assert Counter(r.label for r in m) == {"positive": 31, "negative": 69}
    assert imgs.shape == (100, 32, 32) and imgs.dtype == np.uint8


def test_synth_deterministic(tmp_path):
    a = synth_generate(20, 0.3, 32, seed=7, out_dir=tmp_path / "a")
    b = synth_generate(20, 0.3, 32, seed=7, out_dir=tmp_path / "b")
    assert np.array_equal(a[1], b[1])
    assert a[0].records == b[0].records
    for name in ["manifest.csv", "images/img00003.png"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_synth_patients_and_attributes():
    m, _ = synth_generate(200, 0.31, 8, seed=3)
    by_patient = defaultdict(list)
    for r in m:
        by_patient[r.patient_id].append(r)
    assert max(len(v) for v in by_patient.values()) <= 3
    assert any(len(v) > 1 for v in by_patient.values())
    for recs in by_patient.values():
        assert len({(r.label, r.sex, r.age_years, r.cohort) for r in recs}) == 1
    assert {r.sex for r in m} == {"M", "F"}
    assert len({r.cohort for r in m}) == 2
    ped, _ = synth_generate(50, 0.3, 8, seed=3, style=PEDIATRIC)
    assert all(r.age_years <= 18 for r in ped)


@pytest.mark.parametrize("args", [(1, 0.5, 32), (10, 0.0, 32), (10, 1.0, 32), (10, 0.5, 4)])
def test_synth_argument_errors(args):
    with pytest.raises(ValueError):
        synth_generate(*args, seed=0)


def _blob_score(img):
    """Darkest lung-interior level relative to lung/background contrast."""
    s = gaussian_filter(img.astype(float) / 255, 1.5)
    bg, top = np.median(s), np.percentile(s, 97)
    lung = binary_erosion(binary_fill_holes(s > (bg + top) / 2), iterations=2)
    return (top - np.percentile(s[lung], 5)) / (top - bg)


def test_synth_task_is_learnable_by_a_blob_detector():
    m, imgs = synth_generate(200, 0.5, 64, seed=0)
    assert roc_auc(m.labels(), np.array([_blob_score(a) for a in imgs])) > 0.8
