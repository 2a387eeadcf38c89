"""Vision transformer backbone: patch tokenization, multi-head self-attention
and the pre-norm encoder used by every training phase.

Images are channel-first tensors ``(C, H, W)`` (or batched ``(B, C, H, W)``).
A patch vector is flattened row-major over ``(p1, p2, C)``, i.e. element
``(r, c, ch)`` of a patch lands at index ``(r * p2 + c) * C + ch``; patches
themselves are ordered row-major from the top-left corner.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Mapping

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

TOKEN_MODES = ("class_token", "contrastive_token", "none")
POSITION_EMBEDDINGS = ("learnable", "fixed_sinusoidal")


class MissingHeadError(RuntimeError):
    """Raised when a classification is requested from a model without a head."""


@dataclass(frozen=True)
class PatchConfig:
    patch_height: int
    patch_width: int
    image_height: int
    image_width: int
    channels: int = 1

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_height // self.patch_height, self.image_width // self.patch_width

    @property
    def token_count(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def patch_dim(self) -> int:
        return self.patch_height * self.patch_width * self.channels


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 1
    embed_dim: int = 64
    depth: int = 2
    num_heads: int = 2
    mlp_ratio: float = 4.0
    token_mode: str = "class_token"
    position_embedding: str = "learnable"
    norm_eps: float = 1e-6

    def __post_init__(self):
        if self.image_size <= 0 or self.patch_size <= 0 or self.channels < 1:
            raise ValueError("image_size, patch_size must be positive and channels >= 1")
        if self.image_size % self.patch_size:
            raise ValueError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}"
            )
        if self.num_heads < 1 or self.embed_dim % self.num_heads:
            raise ValueError(
                f"embed_dim {self.embed_dim} must be a multiple of num_heads {self.num_heads}"
            )
        if self.depth < 0:
            raise ValueError("depth must be >= 0")
        if self.mlp_ratio <= 0:
            raise ValueError("mlp_ratio must be > 0")
        if self.token_mode not in TOKEN_MODES:
            raise ValueError(f"token_mode must be one of {TOKEN_MODES}, got {self.token_mode!r}")
        if self.position_embedding not in POSITION_EMBEDDINGS:
            raise ValueError(
                f"position_embedding must be one of {POSITION_EMBEDDINGS}, "
                f"got {self.position_embedding!r}"
            )

    @property
    def patch(self) -> PatchConfig:
        return PatchConfig(
            self.patch_size, self.patch_size, self.image_size, self.image_size, self.channels
        )

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def has_special_token(self) -> bool:
        return self.token_mode != "none"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**dict(d))


PRESETS = {
    # ViT-S/16 at the 256x256 input resolution used for the radiographs.
    "vit_s16": ModelConfig(
        image_size=256, patch_size=16, embed_dim=384, depth=12, num_heads=6, mlp_ratio=4.0
    ),
    "vit_tiny_test": ModelConfig(
        image_size=32, patch_size=8, embed_dim=64, depth=2, num_heads=2, mlp_ratio=4.0
    ),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(base, **overrides)


# ---------------------------------------------------------------------------
# Tokenization
# ---------------------------------------------------------------------------


def patchify(image, cfg) -> torch.Tensor:
    """Split ``image`` into flattened, non-overlapping patches.

    ``image`` is ``(C, H, W)`` or ``(B, C, H, W)``; ``cfg`` is anything with
    ``patch_height``/``patch_width`` (a :class:`PatchConfig`) or ``patch_size``.
    Returns ``(n, p1*p2*C)`` or ``(B, n, p1*p2*C)``.
    """
    x = torch.as_tensor(image)
    p1 = getattr(cfg, "patch_height", None) or cfg.patch_size
    p2 = getattr(cfg, "patch_width", None) or cfg.patch_size
    squeeze = x.ndim == 3
    if squeeze:
        x = x.unsqueeze(0)
    if x.ndim != 4:
        raise ValueError(f"expected (C,H,W) or (B,C,H,W) image, got shape {tuple(x.shape)}")
    b, c, h, w = x.shape
    if h % p1 or w % p2:
        raise ValueError(f"image {h}x{w} is not divisible into {p1}x{p2} patches")
    gh, gw = h // p1, w // p2
    x = x.reshape(b, c, gh, p1, gw, p2).permute(0, 2, 4, 3, 5, 1)
    x = x.reshape(b, gh * gw, p1 * p2 * c)
    return x[0] if squeeze else x


def unpatchify(patches: torch.Tensor, cfg: ModelConfig) -> torch.Tensor:
    """Inverse of :func:`patchify` for a batched ``(B, n, p*p*C)`` tensor."""
    p, c = cfg.patch_size, cfg.channels
    g = cfg.image_size // p
    b = patches.shape[0]
    x = patches.reshape(b, g, g, p, p, c).permute(0, 5, 1, 3, 2, 4)
    return x.reshape(b, c, g * p, g * p)


def sinusoidal_embedding(n_positions: int, dim: int) -> torch.Tensor:
    """Fixed 1-D sine/cosine position table of shape ``(n_positions, dim)``."""
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    i = np.arange(dim // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2 * i / dim)
    table = np.zeros((n_positions, dim))
    table[:, 0 : 2 * (dim // 2) : 2] = np.sin(angle)
    table[:, 1 : 2 * (dim // 2) : 2] = np.cos(angle)
    return torch.from_numpy(table).float()


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------


def _attention(q, k, v):
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    # softmax subtracts the row max internally
    return torch.softmax(scores, dim=-1) @ v


def attention_weights(q, k) -> torch.Tensor:
    scores = torch.as_tensor(q) @ torch.as_tensor(k).transpose(-2, -1)
    return torch.softmax(scores / math.sqrt(q.shape[-1]), dim=-1)


def attention(q, k, v) -> torch.Tensor:
    """Scaled dot-product attention ``softmax(Q K^T / sqrt(d_k)) V``.

    Works on ``(n, d)`` matrices or any batch of them. Raises ``ValueError``
    on mismatched shapes or non-finite inputs.
    """
    q, k, v = (torch.as_tensor(a) for a in (q, k, v))
    if q.ndim < 2 or k.ndim < 2 or v.ndim < 2:
        raise ValueError("attention expects matrices")
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"key count {k.shape[-2]} != value count {v.shape[-2]}")
    for name, a in (("Q", q), ("K", k), ("V", v)):
        if not torch.isfinite(a).all():
            raise ValueError(f"non-finite values in {name}")
    return _attention(q, k, v)


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        h = self.num_heads
        qkv = self.qkv(x).reshape(b, n, 3, h, d // h).permute(2, 0, 3, 1, 4)
        out = _attention(qkv[0], qkv[1], qkv[2])
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block: x + MSA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float, eps: float = 1e-6):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=eps)
        self.attn = MultiHeadSelfAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim, eps=eps)
        self.mlp = Mlp(dim, int(round(dim * mlp_ratio)))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class VisionTransformer(nn.Module):
    """ViT encoder with an optional prepended special token and a binary head.

    The special token acts as the class token for supervised use and as the
    contrastive/distillation token during self-supervised pre-training.
    """

    def __init__(self, cfg: ModelConfig, with_head: bool = False):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        n_special = 1 if cfg.has_special_token else 0
        self.patch_embed = nn.Linear(cfg.patch.patch_dim, d)
        if n_special:
            self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        if cfg.position_embedding == "learnable":
            self.pos_embed = nn.Parameter(torch.zeros(1, cfg.num_patches + n_special, d))
        else:
            self.register_buffer(
                "pos_embed",
                sinusoidal_embedding(cfg.num_patches + n_special, d).unsqueeze(0),
                persistent=False,
            )
        self.blocks = nn.ModuleList(
            Block(d, cfg.num_heads, cfg.mlp_ratio, cfg.norm_eps) for _ in range(cfg.depth)
        )
        self.norm = nn.LayerNorm(d, eps=cfg.norm_eps)
        self.head = None
        init_weights(self)
        if n_special:
            nn.init.trunc_normal_(self.cls_token, std=0.02)
        if cfg.position_embedding == "learnable":
            nn.init.trunc_normal_(self.pos_embed, std=0.02)
        if with_head:
            self.add_head()

    def add_head(self) -> None:
        """Attach a fresh zero-initialised single-logit head (replacing any existing one)."""
        p = next(self.parameters())
        self.head = nn.Linear(self.cfg.embed_dim, 1).to(dtype=p.dtype, device=p.device)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    @property
    def n_special(self) -> int:
        return 1 if self.cfg.has_special_token else 0

    def embed(self, images, keep_index=None):
        """Project patches, add positions, optionally keep a subset, prepend the token.

        ``keep_index`` is a ``(B, k)`` long tensor of patch indices to retain.
        """
        x = self.patch_embed(patchify(images, self.cfg))
        ns = self.n_special
        x = x + self.pos_embed[:, ns:]
        if keep_index is not None:
            x = torch.gather(x, 1, keep_index.unsqueeze(-1).expand(-1, -1, x.shape[-1]))
        if ns:
            tok = (self.cls_token + self.pos_embed[:, :1]).expand(x.shape[0], -1, -1)
            x = torch.cat([tok, x], dim=1)
        return x

    def encode(self, tokens):
        for blk in self.blocks:
            tokens = blk(tokens)
        return tokens

    def forward_tokens(self, images, keep_index=None):
        """Final-normalised contextual embeddings, ``(B, tokens, D)``."""
        return self.norm(self.encode(self.embed(images, keep_index)))

    def features(self, images):
        """Image representation: the special token, or mean-pooled patches when absent."""
        t = self.forward_tokens(images)
        return t[:, 0] if self.n_special else t.mean(dim=1)

    def logits(self, images):
        if self.head is None:
            raise MissingHeadError("model has no classification head")
        return self.head(self.features(images)).squeeze(-1)

    def forward(self, images):
        return self.logits(images)


# ---------------------------------------------------------------------------
# Functional interface over a named parameter map
# ---------------------------------------------------------------------------


def parameter_set(model: nn.Module) -> dict[str, torch.Tensor]:
    """Named learnable arrays of ``model`` (detached clones)."""
    return {k: v.detach().clone() for k, v in model.named_parameters()}


def _bind(params: Mapping[str, torch.Tensor], cfg: ModelConfig) -> VisionTransformer:
    model = VisionTransformer(cfg, with_head="head.weight" in params)
    expected = {k: tuple(v.shape) for k, v in model.named_parameters()}
    missing = [k for k in expected if k not in params]
    if missing:
        raise ValueError(f"parameter set lacks {missing[:5]}")
    for k, shape in expected.items():
        if tuple(params[k].shape) != shape:
            raise ValueError(f"parameter {k} has shape {tuple(params[k].shape)}, expected {shape}")
    dtype = next(iter(params.values())).dtype
    return model.to(dtype)


def encoder_forward(tokens, params: Mapping[str, torch.Tensor], cfg: ModelConfig):
    """Run the ``cfg.depth`` transformer blocks over already-embedded tokens."""
    tokens = torch.as_tensor(tokens)
    if tokens.shape[-1] != cfg.embed_dim:
        raise ValueError(f"token dim {tokens.shape[-1]} != embed_dim {cfg.embed_dim}")
    squeeze = tokens.ndim == 2
    if squeeze:
        tokens = tokens.unsqueeze(0)
    model = _bind(params, cfg)
    out = tokens
    for i, blk in enumerate(model.blocks):
        prefix = f"blocks.{i}."
        local = {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}
        out = torch.func.functional_call(blk, local, (out,))
    return out[0] if squeeze else out


def classify(image, params: Mapping[str, torch.Tensor], cfg: ModelConfig) -> float:
    """Probability that ``image`` is positive: sigmoid of the head applied to the class token."""
    if "head.weight" not in params:
        raise MissingHeadError("checkpoint lacks a classification head")
    if cfg.token_mode != "class_token":
        raise ValueError("classify requires token_mode='class_token'")
    model = _bind(params, cfg)
    x = torch.as_tensor(image, dtype=next(iter(params.values())).dtype)
    if x.ndim == 3:
        x = x.unsqueeze(0)
    with torch.no_grad():
        logit = torch.func.functional_call(model, dict(params), (x,))
    return float(torch.sigmoid(logit)[0])
