"""Pre-training, linear probing and fine-tuning loops.

All loops are single-process and deterministic for a fixed seed: the batch
order and every augmentation/mask draw come from one ``numpy`` generator
seeded with ``TrainConfig.seed``, and model initialisation from
``torch.manual_seed``.
"""

from __future__ import annotations

import csv
import logging
import math
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .. import __version__
from ..backbone import ModelConfig, VisionTransformer
from ..ssl import OBJECTIVES, SSLConfig, build_objective
from .checkpoint import Checkpoint, to_arrays
from .optim import AdamW
from .schedule import ScheduleState, TrainConfig, schedule_at

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "epoch", "phase", "loss", "lr", "wd")


class TrainingDivergedError(FloatingPointError):
    """Non-finite loss; ``checkpoint`` holds the last good state."""

    def __init__(self, msg, checkpoint=None):
        super().__init__(msg)
        self.checkpoint = checkpoint


class TrainLog:
    """Append-only CSV: ``step,epoch,phase,loss,lr,wd``."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        if self.path and not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(LOG_COLUMNS)
        self._fh = open(self.path, "a", newline="") if self.path else None
        self._w = csv.writer(self._fh, lineterminator="\n") if self._fh else None

    def write(self, step, epoch, phase, loss, lr, wd):
        if self._w:
            self._w.writerow((step, epoch, phase, repr(loss), repr(lr), repr(wd)))

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None


def _phase_entry(cfg: TrainConfig, data_digest: str, epoch_losses) -> dict:
    return {"phase": cfg.phase, "objective": cfg.objective, "seed": cfg.seed,
            "epochs": cfg.epochs, "data_digest": data_digest,
            "epoch_losses": [float(x) for x in epoch_losses]}


def _config_block(model_cfg, ssl_cfg, cfg, schedule, opt_t) -> dict:
    return {"model": model_cfg.to_dict(), "ssl": ssl_cfg.to_dict() if ssl_cfg else None,
            "train": cfg.to_dict(),
            "schedule": {"global_step": schedule.global_step,
                         "steps_per_epoch": schedule.steps_per_epoch,
                         "current_lr": schedule.current_lr, "current_wd": schedule.current_wd,
                         "optimizer_t": opt_t}}


def _check_labels(labels, n):
    y = np.asarray(labels)
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    if y.dtype == object or not np.isin(y, (0, 1)).all():
        raise ValueError("supervised phases need labeled data (0/1 targets for every image)")
    return torch.as_tensor(y.astype(np.float32))


def model_config(ckpt: Checkpoint) -> ModelConfig:
    return ModelConfig.from_dict(ckpt.config["model"])


def load_model(ckpt: Checkpoint) -> VisionTransformer:
    """Backbone (plus head, when present) restored from ``ckpt``."""
    model = VisionTransformer(model_config(ckpt), with_head=ckpt.has_head)
    missing, unexpected = model.load_state_dict(ckpt.tensors("model"), strict=False)
    if missing or unexpected:
        raise ValueError(f"checkpoint/model mismatch: missing {missing}, unexpected {unexpected}")
    return model


def init_checkpoint(model_cfg: ModelConfig, seed: int = 0) -> Checkpoint:
    """A randomly initialised backbone, the starting point of the no-pretraining baseline."""
    torch.manual_seed(seed)
    model = VisionTransformer(model_cfg)
    return Checkpoint(
        to_arrays("model", model.named_parameters()),
        config={"model": model_cfg.to_dict(), "ssl": None, "train": None, "schedule": None},
        provenance={"phases": [{"phase": "init", "seed": seed}], "tool_version": __version__},
    )


def pretrain(images: torch.Tensor, model_cfg: ModelConfig, ssl_cfg: SSLConfig, cfg: TrainConfig,
             log_path=None, out_dir=None, checkpoint_every: int = 0,
             data_digest: str = "") -> Checkpoint:
    """Self-supervised pre-training of a fresh backbone on unlabeled ``(N, C, H, W)`` images."""
    if cfg.objective not in OBJECTIVES:
        raise ValueError(f"pre-training objective must be one of {OBJECTIVES}")
    n = len(images)
    if n == 0:
        raise ValueError("no images to pre-train on")
    torch.manual_seed(cfg.seed)
    obj = build_objective(cfg.objective, VisionTransformer(model_cfg), ssl_cfg)
    obj.train()
    bs = min(cfg.batch_size, n)
    spe = n // bs
    total = cfg.epochs * spe
    trainable = [(k, p) for k, p in obj.named_parameters() if p.requires_grad]
    opt = AdamW(trainable, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    tlog = TrainLog(log_path)
    history = []
    state = ScheduleState(0, spe, 0.0, cfg.wd_start)

    def snapshot():
        arrays = to_arrays("model", obj.backbone.named_parameters())
        arrays.update(to_arrays("ssl", ((k, v) for k, v in obj.state_dict().items()
                                        if not k.startswith("backbone."))))
        arrays.update(to_arrays("opt", opt.state_arrays()))
        prov = {"phases": [_phase_entry(cfg, data_digest, history)], "tool_version": __version__}
        return Checkpoint(arrays, _config_block(model_cfg, ssl_cfg, cfg, state, opt.t), prov)

    last_good = snapshot()
    step = 0
    try:
        for epoch in range(cfg.epochs):
            perm = rng.permutation(n)
            losses = []
            for b in range(spe):
                lr, wd = schedule_at(step, cfg, spe)
                loss, _ = obj.loss(images[perm[b * bs:(b + 1) * bs]], rng)
                value = loss.item()
                if not math.isfinite(value):
                    if out_dir is not None:
                        last_good.save(Path(out_dir) / "last_good.ckpt")
                    raise TrainingDivergedError(
                        f"non-finite loss at step {step} (epoch {epoch})", last_good)
                opt.zero_grad()
                loss.backward()
                if cfg.clip_grad > 0:
                    nn.utils.clip_grad_norm_(opt.params, cfg.clip_grad)
                opt.step(lr, wd)
                obj.after_step(step, total)
                tlog.write(step, epoch, cfg.phase, value, lr, wd)
                losses.append(value)
                state = ScheduleState(step, spe, lr, wd)
                step += 1
            history.append(float(np.mean(losses)))
            log.info("pretrain[%s] epoch %d loss %.5f", cfg.objective, epoch, history[-1])
            last_good = snapshot()
            if out_dir is not None and checkpoint_every and (epoch + 1) % checkpoint_every == 0:
                last_good.save(Path(out_dir) / f"epoch{epoch + 1:04d}.ckpt")
    finally:
        tlog.close()
    return last_good


@torch.no_grad()
def extract_features(model: VisionTransformer, images: torch.Tensor, batch_size: int = 256):
    model.eval()
    out = [model.features(images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
    return torch.cat(out) if out else torch.zeros(0, model.cfg.embed_dim)


def _fit(forward, params, y, cfg: TrainConfig, tlog: TrainLog, clip: float = 0.0):
    """Binary cross-entropy training over indices ``0..n-1``; returns (epoch losses, optimizer, last state)."""
    n = len(y)
    bs = min(cfg.batch_size, n)
    spe = math.ceil(n / bs)
    opt = AdamW(params, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    history, step = [], 0
    state = ScheduleState(0, spe, 0.0, cfg.wd_start)
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        total_loss = 0.0
        for b in range(spe):
            idx = torch.from_numpy(perm[b * bs:(b + 1) * bs])
            lr, wd = schedule_at(step, cfg, spe)
            loss = F.binary_cross_entropy_with_logits(forward(idx), y[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(f"non-finite loss at step {step}")
            opt.zero_grad()
            loss.backward()
            if clip > 0:
                nn.utils.clip_grad_norm_(opt.params, clip)
            opt.step(lr, wd)
            tlog.write(step, epoch, cfg.phase, value, lr, wd)
            total_loss += value * len(idx)
            state = ScheduleState(step, spe, lr, wd)
            step += 1
        history.append(total_loss / n)
        log.info("%s epoch %d loss %.5f", cfg.phase, epoch, history[-1])
    return history, opt, state


def _prior_phases(ckpt: Checkpoint) -> list:
    return list(ckpt.provenance.get("phases", []))


def probe(ckpt: Checkpoint, images: torch.Tensor, labels, cfg: TrainConfig, log_path=None,
          data_digest: str = "") -> Checkpoint:
    """Train a fresh linear head on frozen backbone features.

    Backbone arrays are copied verbatim from ``ckpt`` into the result.
    """
    y = _check_labels(labels, len(images))
    backbone_arrays = {k: v for k, v in ckpt.arrays.items()
                       if k.startswith("model/") and not k.startswith("model/head.")}
    model = VisionTransformer(model_config(ckpt))
    model.load_state_dict({k[len("model/"):]: torch.from_numpy(v.copy())
                           for k, v in backbone_arrays.items()})
    torch.manual_seed(cfg.seed)
    feats = extract_features(model, images)
    model.add_head()
    head = model.head
    tlog = TrainLog(log_path)
    try:
        history, opt, state = _fit(lambda idx: head(feats[idx]).squeeze(-1),
                                   list(head.named_parameters(prefix="head")), y, cfg, tlog)
    finally:
        tlog.close()
    arrays = dict(backbone_arrays)
    arrays.update(to_arrays("model", head.named_parameters(prefix="head")))
    arrays.update(to_arrays("opt", opt.state_arrays()))
    prov = {"phases": _prior_phases(ckpt) + [_phase_entry(cfg, data_digest, history)],
            "tool_version": __version__}
    return Checkpoint(arrays, _config_block(model.cfg, None, cfg, state, opt.t), prov)


def finetune(ckpt: Checkpoint, images: torch.Tensor, labels, cfg: TrainConfig, log_path=None,
             data_digest: str = "") -> Checkpoint:
    """Train every backbone parameter plus the head.

    A head already present in ``ckpt`` (e.g. from probing) is carried over;
    otherwise a fresh zero head is attached.
    """
    y = _check_labels(labels, len(images))
    model = load_model(ckpt)
    torch.manual_seed(cfg.seed)
    if model.head is None:
        model.add_head()
    model.train()
    tlog = TrainLog(log_path)
    try:
        history, opt, state = _fit(lambda idx: model.logits(images[idx]),
                                   list(model.named_parameters()), y, cfg, tlog)
    finally:
        tlog.close()
    arrays = to_arrays("model", model.named_parameters())
    arrays.update(to_arrays("opt", opt.state_arrays()))
    prov = {"phases": _prior_phases(ckpt) + [_phase_entry(cfg, data_digest, history)],
            "tool_version": __version__}
    return Checkpoint(arrays, _config_block(model.cfg, None, cfg, state, opt.t), prov)


@torch.no_grad()
def predict_scores(ckpt_or_model, images: torch.Tensor, batch_size: int = 256) -> np.ndarray:
    """Positive-class probabilities for ``(N, C, H, W)`` images."""
    model = load_model(ckpt_or_model) if isinstance(ckpt_or_model, Checkpoint) else ckpt_or_model
    if model.head is None:
        from ..backbone import MissingHeadError

        raise MissingHeadError("checkpoint has no classification head; run probe or finetune")
    model.eval()
    out = [torch.sigmoid(model.logits(images[i:i + batch_size]))
           for i in range(0, len(images), batch_size)]
    return torch.cat(out).double().numpy() if out else np.zeros(0)
