"""Pre-training objectives with one shared contract.

Every objective wraps a student :class:`VisionTransformer` and exposes

* ``loss(images, rng) -> (scalar loss, aux dict)`` for a batch of preprocessed
  images and a ``numpy`` generator that drives views/masks, and
* ``after_step(step, total_steps)`` for the single-writer momentum and centering
  updates that follow each optimizer step.

so the training engine never needs to know which method it is running.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..backbone import Block, VisionTransformer, init_weights, patchify
from .losses import DistillState, center_update, dino_loss, ema_update, mae_loss, moco_loss
from .masking import batch_masks
from .views import ViewRecipe, ViewSpec, augment_batch

OBJECTIVES = ("mae", "moco_v3", "dino")


@dataclass(frozen=True)
class SSLConfig:
    # MAE
    mask_ratio: float = 0.75
    norm_pix_loss: bool = True
    decoder_depth: int = 4
    decoder_dim: int = 0  # 0 -> embed_dim // 2
    decoder_heads: int = 0  # 0 -> decoder_dim // 16 (at least 1)
    # MoCo v3
    moco_tau: float = 0.2
    moco_out_dim: int = 256
    moco_momentum: float = 0.99
    # DINO
    dino_prototypes: int = 256
    dino_bottleneck: int = 256
    dino_tau_teacher: float = 0.04
    dino_tau_student: float = 0.1
    dino_center_momentum: float = 0.9
    dino_teacher_momentum: float = 0.996
    # views
    crop_scale_min: float = 0.4
    crop_scale_max: float = 1.0
    flip_p: float = 0.5
    jitter: float = 0.2
    blur_p: float = 0.5

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "SSLConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in dict(d).items() if k in names})

    def recipe(self, size: int) -> ViewRecipe:
        base = dict(size=size, crop_scale=(self.crop_scale_min, self.crop_scale_max),
                    flip_p=self.flip_p, jitter=self.jitter)
        return ViewRecipe((ViewSpec(blur_p=self.blur_p, **base), ViewSpec(blur_p=0.0, **base)))


def cosine_ramp(base: float, step: int, total_steps: int) -> float:
    """Momentum ramp from ``base`` at step 0 to 1.0 at the last step."""
    if total_steps <= 1:
        return base
    return 1.0 - (1.0 - base) * (math.cos(math.pi * step / (total_steps - 1)) + 1) / 2


def _frozen_copy(module: nn.Module) -> nn.Module:
    twin = copy.deepcopy(module)
    for p in twin.parameters():
        p.requires_grad_(False)
    return twin


class Objective(nn.Module):
    name = "base"

    def __init__(self, backbone: VisionTransformer, cfg: SSLConfig):
        super().__init__()
        self.backbone = backbone
        self.cfg = cfg

    def loss(self, images, rng: np.random.Generator):
        raise NotImplementedError

    def after_step(self, step: int, total_steps: int) -> None:
        pass


class MAEObjective(Objective):
    """Masked autoencoder: encode visible patches, reconstruct masked pixels."""

    name = "mae"

    def __init__(self, backbone: VisionTransformer, cfg: SSLConfig):
        super().__init__(backbone, cfg)
        mc = backbone.cfg
        dd = cfg.decoder_dim or max(mc.embed_dim // 2, 1)
        heads = cfg.decoder_heads or max(dd // 16, 1)
        ns = backbone.n_special
        self.decoder_embed = nn.Linear(mc.embed_dim, dd)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, dd))
        self.decoder_pos_embed = nn.Parameter(torch.zeros(1, mc.num_patches + ns, dd))
        self.decoder_blocks = nn.ModuleList(
            Block(dd, heads, mc.mlp_ratio, mc.norm_eps) for _ in range(cfg.decoder_depth)
        )
        self.decoder_norm = nn.LayerNorm(dd, eps=mc.norm_eps)
        self.decoder_pred = nn.Linear(dd, mc.patch.patch_dim)
        for m in (self.decoder_embed, self.decoder_blocks, self.decoder_norm, self.decoder_pred):
            init_weights(m)
        nn.init.trunc_normal_(self.mask_token, std=0.02)
        nn.init.trunc_normal_(self.decoder_pos_embed, std=0.02)

    def reconstruct(self, images, keep, mask):
        bb = self.backbone
        ns = bb.n_special
        latent = bb.forward_tokens(images, keep)
        x = self.decoder_embed(latent)
        b, n = mask.shape
        full = self.mask_token.expand(b, n, -1).clone()
        full = full.scatter(1, keep.unsqueeze(-1).expand(-1, -1, x.shape[-1]), x[:, ns:])
        x = torch.cat([x[:, :ns], full], dim=1) + self.decoder_pos_embed
        for blk in self.decoder_blocks:
            x = blk(x)
        return self.decoder_pred(self.decoder_norm(x))[:, ns:]

    def loss(self, images, rng):
        n = self.backbone.cfg.num_patches
        keep, mask = batch_masks(images.shape[0], n, self.cfg.mask_ratio, rng)
        pred = self.reconstruct(images, keep, mask)
        target = patchify(images, self.backbone.cfg)
        loss = mae_loss(pred, target, mask, normalize_targets=self.cfg.norm_pix_loss)
        return loss, {}


def _mlp(dims, last_bn_affine=None):
    layers = []
    for i in range(len(dims) - 1):
        last = i == len(dims) - 2
        # a bias feeding BatchNorm is cancelled by the mean subtraction
        followed_by_bn = not last or last_bn_affine is not None
        layers.append(nn.Linear(dims[i], dims[i + 1], bias=not followed_by_bn))
        if not last:
            layers += [nn.BatchNorm1d(dims[i + 1], track_running_stats=False), nn.GELU()]
        elif last_bn_affine is not None:
            layers.append(nn.BatchNorm1d(dims[i + 1], affine=last_bn_affine,
                                         track_running_stats=False))
    return nn.Sequential(*layers)


class MoCoV3Objective(Objective):
    """Momentum contrast with in-batch negatives and a predictor on the query branch."""

    name = "moco_v3"

    def __init__(self, backbone: VisionTransformer, cfg: SSLConfig):
        super().__init__(backbone, cfg)
        d = backbone.cfg.embed_dim
        hidden = 4 * d
        self.projector = _mlp([d, hidden, hidden, cfg.moco_out_dim], last_bn_affine=False)
        self.predictor = _mlp([cfg.moco_out_dim, hidden, cfg.moco_out_dim])
        init_weights(self.projector)
        init_weights(self.predictor)
        self.momentum_backbone = _frozen_copy(backbone)
        self.momentum_projector = _frozen_copy(self.projector)
        self.recipe = cfg.recipe(backbone.cfg.image_size)

    def loss(self, images, rng):
        v1, v2 = augment_batch(images, self.recipe, rng)
        views = torch.cat([v1, v2])
        b = images.shape[0]
        q = self.predictor(self.projector(self.backbone.features(views)))
        with torch.no_grad():
            k = self.momentum_projector(self.momentum_backbone.features(views))
        q = q.reshape(2, b, -1)
        k = k.reshape(2, b, -1)
        return moco_loss(q, k, self.cfg.moco_tau), {}

    def after_step(self, step, total_steps):
        m = cosine_ramp(self.cfg.moco_momentum, step, total_steps)
        ema_update(self.backbone, self.momentum_backbone, m)
        ema_update(self.projector, self.momentum_projector, m)


class DINOHead(nn.Module):
    def __init__(self, dim: int, hidden: int, bottleneck: int, prototypes: int):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(dim, hidden), nn.GELU(),
            nn.Linear(hidden, hidden), nn.GELU(),
            nn.Linear(hidden, bottleneck),
        )
        self.prototypes = nn.Parameter(torch.empty(prototypes, bottleneck))
        init_weights(self.mlp)
        nn.init.trunc_normal_(self.prototypes, std=0.02)

    def forward(self, x):
        x = F.normalize(self.mlp(x), dim=-1)
        # unit-norm prototypes make the logits cosine similarities
        return x @ F.normalize(self.prototypes, dim=-1).t()


class DINOObjective(Objective):
    """Self-distillation: the student matches a centred, sharpened EMA teacher."""

    name = "dino"

    def __init__(self, backbone: VisionTransformer, cfg: SSLConfig):
        super().__init__(backbone, cfg)
        d = backbone.cfg.embed_dim
        self.head = DINOHead(d, 4 * d, cfg.dino_bottleneck, cfg.dino_prototypes)
        self.teacher_backbone = _frozen_copy(backbone)
        self.teacher_head = _frozen_copy(self.head)
        self.register_buffer("center", torch.zeros(cfg.dino_prototypes))
        self.recipe = cfg.recipe(backbone.cfg.image_size)
        self._last_teacher = None

    @property
    def state(self) -> DistillState:
        return DistillState(self.center, self.cfg.dino_tau_teacher, self.cfg.dino_tau_student,
                            self.cfg.dino_center_momentum, self.cfg.dino_teacher_momentum)

    def loss(self, images, rng):
        v1, v2 = augment_batch(images, self.recipe, rng)
        views = torch.cat([v1, v2])
        b = images.shape[0]
        s = self.head(self.backbone.features(views)).reshape(2, b, -1)
        with torch.no_grad():
            t = self.teacher_head(self.teacher_backbone.features(views)).reshape(2, b, -1)
        self._last_teacher = t
        return dino_loss(s, t, self.state), {}

    def after_step(self, step, total_steps):
        m = cosine_ramp(self.cfg.dino_teacher_momentum, step, total_steps)
        ema_update(self.backbone, self.teacher_backbone, m)
        ema_update(self.head, self.teacher_head, m)
        if self._last_teacher is not None:
            self.center.copy_(center_update(self.center, self._last_teacher,
                                            self.cfg.dino_center_momentum))
            self._last_teacher = None


def build_objective(name: str, backbone: VisionTransformer, cfg: SSLConfig) -> Objective:
    table = {"mae": MAEObjective, "moco_v3": MoCoV3Objective, "dino": DINOObjective}
    try:
        cls = table[name]
    except KeyError:
        raise ValueError(f"unknown objective {name!r}; choose from {OBJECTIVES}") from None
    return cls(backbone, cfg)
