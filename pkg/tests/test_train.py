import csv
import math

import numpy as np
import pytest
import torch

from cxrssl.backbone import VisionTransformer, preset
from cxrssl.data import synth_generate
from cxrssl.ssl import SSLConfig
from cxrssl.train import (
    FORMAT_VERSION,
    AdamW,
    Checkpoint,
    CheckpointError,
    CheckpointVersionError,
    NonFiniteGradientError,
    ScheduleState,
    TrainConfig,
    TrainingDivergedError,
    adamw_step,
    finetune,
    init_checkpoint,
    load_model,
    predict_scores,
    pretrain,
    probe,
    schedule_at,
)
from cxrssl.train.optim import decays

TINY = preset("vit_tiny_test")
SMALL_SSL = SSLConfig(moco_out_dim=16, dino_prototypes=16, dino_bottleneck=16)


def _cosine_oracle(step, cfg, spe):
    warm = cfg.warmup_epochs * spe
    total = cfg.epochs * spe
    if step < warm:
        return cfg.lr_initial * step / warm
    progress = (step - warm) / (total - 1 - warm)
    return cfg.lr_min + 0.5 * (cfg.lr_initial - cfg.lr_min) * (1 + math.cos(math.pi * progress))


# -- schedule ----------------------------------------------------------------------


def test_schedule_warmup_end_hits_lr_initial():
    cfg = TrainConfig()
    lr, wd = schedule_at(10 * 7, cfg, steps_per_epoch=7)
    assert abs(lr - 5e-4) <= math.ulp(5e-4)
    assert schedule_at(0, cfg, 7)[0] == 0.0


def test_schedule_final_step_hits_lr_min_and_wd_end():
    cfg = TrainConfig()
    lr, wd = schedule_at(200 * 7 - 1, cfg, steps_per_epoch=7)
    assert abs(lr - 1e-6) <= math.ulp(1e-6)
    assert abs(wd - 0.4) <= math.ulp(0.4)
    assert schedule_at(0, cfg, 7)[1] == 0.04


def test_schedule_midpoint():
    cfg = TrainConfig(epochs=21, warmup_epochs=10)
    lr, _ = schedule_at(15, cfg, steps_per_epoch=1)
    assert abs(lr - (5e-4 + 1e-6) / 2) < 1e-18
    assert abs(lr - 2.505e-4) < 1e-15


def test_schedule_matches_closed_form_at_random_steps():
    cfg = TrainConfig()
    rng = np.random.default_rng(0)
    for step in rng.integers(0, 200 * 5, size=20):
        assert abs(schedule_at(int(step), cfg, 5)[0] - _cosine_oracle(int(step), cfg, 5)) < 1e-15


def test_schedule_is_monotone_after_warmup_and_in_range():
    cfg = TrainConfig(epochs=20, warmup_epochs=3)
    lrs = [schedule_at(s, cfg, 4)[0] for s in range(80)]
    assert all(0 <= v <= cfg.lr_initial for v in lrs)
    assert all(a <= b for a, b in zip(lrs[:12], lrs[1:13]))
    assert all(a >= b for a, b in zip(lrs[12:], lrs[13:]))
    wds = [schedule_at(s, cfg, 4)[1] for s in range(80)]
    assert all(a <= b for a, b in zip(wds, wds[1:]))


def test_schedule_constant_wd_and_state():
    cfg = TrainConfig(wd_schedule="constant")
    assert schedule_at(500, cfg, 10)[1] == 0.04
    st = ScheduleState.at(500, cfg, 10)
    assert (st.global_step, st.current_lr) == (500, schedule_at(500, cfg, 10)[0])


@pytest.mark.parametrize("step", [-1, 200 * 3])
def test_schedule_step_out_of_range(step):
    with pytest.raises(ValueError):
        schedule_at(step, TrainConfig(), 3)


@pytest.mark.parametrize("kw", [dict(warmup_epochs=200), dict(lr_min=1e-3), dict(batch_size=0),
                                dict(phase="eval"), dict(objective="simclr")])
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


# -- AdamW -----------------------------------------------------------------------


def _moments(params):
    return [torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params]


def test_adamw_zero_grad_no_decay_is_identity():
    p = [torch.randn(3, 4, dtype=torch.float64)]
    before = p[0].clone()
    adamw_step(p, [torch.zeros_like(p[0])], *_moments(p), lr=1e-3, wd=0.0, t=1)
    assert torch.equal(p[0], before)


def test_adamw_zero_grad_applies_pure_decay():
    p = [torch.randn(3, 4, dtype=torch.float64)]
    expect = p[0] * (1 - 1e-3 * 0.05)
    adamw_step(p, [torch.zeros_like(p[0])], *_moments(p), lr=1e-3, wd=0.05, t=1)
    assert torch.equal(p[0], expect)


def test_adamw_first_step_closed_form():
    g = torch.tensor([0.3, -2.0, 1e-3], dtype=torch.float64)
    p = [torch.zeros(3, dtype=torch.float64)]
    adamw_step(p, [g], *_moments(p), lr=1e-2, wd=0.0, t=1, eps=1e-8)
    expect = [-1e-2 * v / (abs(v) + 1e-8) for v in g.tolist()]
    assert np.allclose(p[0].numpy(), expect, rtol=1e-12, atol=0)


def test_adamw_without_decay_matches_torch_adam():
    gen = torch.Generator().manual_seed(0)
    ours = [torch.randn(4, 5, generator=gen, dtype=torch.float64),
            torch.randn(5, generator=gen, dtype=torch.float64)]
    ref = [p.clone().requires_grad_(True) for p in ours]
    adam = torch.optim.Adam(ref, lr=3e-3, betas=(0.9, 0.999), eps=1e-8)
    m, v = _moments(ours)
    for t in range(1, 6):
        grads = [torch.randn(p.shape, generator=gen, dtype=torch.float64) for p in ours]
        adamw_step(ours, grads, m, v, lr=3e-3, wd=0.0, t=t)
        for r, g in zip(ref, grads):
            r.grad = g.clone()
        adam.step()
    for a, b in zip(ours, ref):
        assert torch.max(torch.abs(a - b.detach())) <= 1e-12


def test_adamw_rejects_non_finite_gradients():
    p = [torch.ones(2)]
    with pytest.raises(NonFiniteGradientError, match="w"):
        adamw_step(p, [torch.tensor([1.0, float("inf")])], *_moments(p), lr=1.0, wd=0.1, t=1,
                   names=["w"])
    assert torch.equal(p[0], torch.ones(2))
    with pytest.raises(ValueError):
        adamw_step(p, [torch.ones(3)], *_moments(p), lr=1.0, wd=0.0, t=1)
    with pytest.raises(ValueError):
        adamw_step(p, [torch.ones(2)], *_moments(p), lr=1.0, wd=0.0, t=0)


def test_decay_mask():
    model = VisionTransformer(TINY, with_head=True)
    flags = {n: decays(n, p) for n, p in model.named_parameters()}
    assert flags["blocks.0.attn.qkv.weight"] and flags["head.weight"]
    for name in ("blocks.0.attn.qkv.bias", "norm.weight", "pos_embed", "cls_token"):
        assert not flags[name]


def test_adamw_class_skips_decay_for_exempt_params():
    w = torch.nn.Parameter(torch.ones(2, 2))
    b = torch.nn.Parameter(torch.ones(2))
    opt = AdamW([("w", w), ("b", b)])
    opt.step(lr=0.1, wd=0.5)
    assert torch.equal(b.detach(), torch.ones(2))
    assert torch.allclose(w.detach(), torch.full((2, 2), 0.95))
    assert opt.t == 1 and set(opt.state_arrays()) == {"exp_avg/w", "exp_avg_sq/w", "exp_avg/b",
                                                       "exp_avg_sq/b"}


# -- checkpoints -----------------------------------------------------------------


def test_checkpoint_bytes_round_trip(tmp_path):
    ckpt = init_checkpoint(TINY, seed=1)
    path = ckpt.save(tmp_path / "a.ckpt")
    again = Checkpoint.load(path)
    assert again.to_bytes() == path.read_bytes()
    assert again.version == FORMAT_VERSION
    assert again.config == ckpt.config and again.provenance == ckpt.provenance
    assert all(np.array_equal(again.arrays[k], v) for k, v in ckpt.arrays.items())


def test_checkpoint_round_trip_preserves_forward(tmp_path):
    model = VisionTransformer(TINY, with_head=True)
    torch.nn.init.normal_(model.head.weight)
    ckpt = Checkpoint({f"model/{k}": v.detach().numpy().copy()
                       for k, v in model.named_parameters()}, {"model": TINY.to_dict()})
    restored = load_model(Checkpoint.load(ckpt.save(tmp_path / "m.ckpt")))
    x = torch.randn(3, 1, 32, 32)
    model.eval()
    restored.eval()
    assert torch.equal(model.logits(x), restored.logits(x))


def test_checkpoint_version_and_corruption_errors(tmp_path):
    bad = Checkpoint({}, version="ckpt-v0").to_bytes()
    with pytest.raises(CheckpointVersionError):
        Checkpoint.from_bytes(bad)
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(b"garbage")


def test_checkpoint_array_layout_is_float32_le():
    import io
    import json
    import zipfile

    ckpt = Checkpoint({"model/x": np.arange(3, dtype=np.float64)})
    zf = zipfile.ZipFile(io.BytesIO(ckpt.to_bytes()))
    assert zf.namelist() == ["format", "arrays.json", "arrays.bin", "config.json",
                             "provenance.json"]
    assert json.loads(zf.read("arrays.json"))[0]["dtype"] == "<f4"
    assert zf.read("arrays.bin") == np.arange(3, dtype="<f4").tobytes()


# -- pre-training -------------------------------------------------------------------


def _images(n, seed=0, size=32):
    _, a = synth_generate(n, 0.5, size, seed)
    x = torch.from_numpy(a.astype(np.float32) / 255.0)[:, None]
    return (x - x.mean()) / x.std()


def test_pretrain_zero_epochs_returns_initialisation():
    cfg = TrainConfig(epochs=0, warmup_epochs=0, seed=3)
    ckpt = pretrain(_images(8), TINY, SMALL_SSL, cfg)
    init = init_checkpoint(TINY, seed=3)
    for k, v in init.arrays.items():
        assert np.array_equal(ckpt.arrays[k], v), k


@pytest.mark.parametrize("objective", ["mae", "moco_v3", "dino"])
def test_pretrain_is_deterministic(tmp_path, objective):
    cfg = TrainConfig(objective=objective, epochs=2, warmup_epochs=1, batch_size=8, seed=1)
    x = _images(16)
    a = pretrain(x, TINY, SMALL_SSL, cfg, log_path=tmp_path / "a.csv")
    b = pretrain(x, TINY, SMALL_SSL, cfg, log_path=tmp_path / "b.csv")
    assert a.to_bytes() == b.to_bytes()
    assert (tmp_path / "a.csv").read_text() == (tmp_path / "b.csv").read_text()
    assert any(k.startswith("ssl/") for k in a.arrays)
    assert any(k.startswith("opt/") for k in a.arrays)


def test_pretrain_log_and_provenance(tmp_path):
    cfg = TrainConfig(objective="mae", epochs=2, warmup_epochs=1, batch_size=4)
    ckpt = pretrain(_images(10), TINY, SMALL_SSL, cfg, log_path=tmp_path / "log.csv",
                    out_dir=tmp_path, checkpoint_every=1, data_digest="abc")
    rows = list(csv.DictReader(open(tmp_path / "log.csv")))
    assert list(rows[0]) == ["step", "epoch", "phase", "loss", "lr", "wd"]
    assert len(rows) == 2 * (10 // 4)
    assert [int(r["step"]) for r in rows] == list(range(4))
    assert float(rows[0]["lr"]) == 0.0
    phase = ckpt.provenance["phases"][-1]
    assert phase["data_digest"] == "abc" and len(phase["epoch_losses"]) == 2
    assert ckpt.config["schedule"]["global_step"] == 3
    assert (tmp_path / "epoch0001.ckpt").exists() and (tmp_path / "epoch0002.ckpt").exists()


def test_pretrain_mae_loss_decreases():
    cfg = TrainConfig(objective="mae", epochs=5, warmup_epochs=1, batch_size=16)
    ckpt = pretrain(_images(200), TINY, SSLConfig(), cfg)
    losses = ckpt.provenance["phases"][-1]["epoch_losses"]
    assert losses[-1] < 0.8 * losses[0]


def test_pretrain_divergence_keeps_last_good(tmp_path):
    x = _images(8)
    x[0, 0, 0, 0] = float("nan")
    cfg = TrainConfig(objective="mae", epochs=2, warmup_epochs=1, batch_size=8)
    with pytest.raises(TrainingDivergedError) as info:
        pretrain(x, TINY, SMALL_SSL, cfg, out_dir=tmp_path)
    assert (tmp_path / "last_good.ckpt").exists()
    init = init_checkpoint(TINY, seed=0)
    assert np.array_equal(info.value.checkpoint.arrays["model/pos_embed"],
                          init.arrays["model/pos_embed"])


def test_pretrain_rejects_supervised_objective():
    with pytest.raises(ValueError):
        pretrain(_images(4), TINY, SMALL_SSL, TrainConfig(objective="supervised", epochs=1,
                                                          warmup_epochs=0))


# -- probing and fine-tuning ----------------------------------------------------------


def _labeled(n=32, seed=0):
    m, a = synth_generate(n, 0.5, 32, seed)
    x = torch.from_numpy(a.astype(np.float32) / 255.0)[:, None]
    return (x - x.mean()) / x.std(), m.labels()


def _down(phase, **kw):
    base = dict(phase=phase, objective="supervised", batch_size=8, epochs=3, warmup_epochs=1,
                lr_initial=5e-2 if phase == "probe" else 5e-4, wd_start=0.0, wd_end=0.0)
    base.update(kw)
    return TrainConfig(**base)


def test_probe_leaves_backbone_bitwise_unchanged():
    start = init_checkpoint(TINY, seed=2)
    x, y = _labeled()
    out = probe(start, x, y, _down("probe"))
    backbone = {k for k in out.arrays if k.startswith("model/") and "head." not in k}
    assert backbone == set(start.arrays)
    assert all(np.array_equal(out.arrays[k].view(np.uint32), start.arrays[k].view(np.uint32))
               for k in backbone)
    assert out.has_head and np.any(out.arrays["model/head.weight"] != 0)


def test_probe_reduces_training_loss():
    x, y = _labeled(64)
    out = probe(init_checkpoint(TINY), x, y, _down("probe", epochs=10))
    losses = out.provenance["phases"][-1]["epoch_losses"]
    assert losses[-1] < losses[0]
    assert [p["phase"] for p in out.provenance["phases"]] == ["init", "probe"]


def test_probe_requires_labels():
    x, _ = _labeled(8)
    with pytest.raises(ValueError, match="labeled"):
        probe(init_checkpoint(TINY), x, np.array([0, 1, None, 0, 1, 0, 1, 0], dtype=object),
              _down("probe"))


def test_finetune_updates_backbone():
    # a fresh head is zero, so the backbone only sees gradient from the second step on
    start = init_checkpoint(TINY, seed=0)
    x, y = _labeled(8)
    out = finetune(start, x, y, _down("finetune", epochs=1, warmup_epochs=0, batch_size=4))
    assert out.config["schedule"]["optimizer_t"] == 2
    changed = [k for k in start.arrays if not np.array_equal(start.arrays[k], out.arrays[k])]
    assert "model/blocks.0.attn.qkv.weight" in changed


def test_finetune_carries_probe_head():
    x, y = _labeled(16)
    probed = probe(init_checkpoint(TINY), x, y, _down("probe"))
    frozen = _down("finetune", lr_initial=0.0, lr_min=0.0, epochs=1, warmup_epochs=0)
    out = finetune(probed, x, y, frozen)
    assert np.array_equal(out.arrays["model/head.weight"], probed.arrays["model/head.weight"])
    fresh = finetune(init_checkpoint(TINY), x, y, frozen)
    assert not np.any(fresh.arrays["model/head.weight"])


def test_predict_scores_are_probabilities():
    x, y = _labeled(16)
    scores = predict_scores(probe(init_checkpoint(TINY), x, y, _down("probe")), x)
    assert scores.shape == (16,) and np.all((scores >= 0) & (scores <= 1))
