"""Augmented views for the contrastive and distillation objectives."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class ViewSpec:
    """Augmentation chain for one view: crop -> flip -> intensity jitter -> blur."""

    size: int
    crop_scale: tuple[float, float] = (0.4, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip_p: float = 0.5
    jitter: float = 0.2
    blur_p: float = 0.0
    blur_sigma: tuple[float, float] = (0.1, 1.0)

    def validate(self) -> None:
        lo, hi = self.crop_scale
        if not (0 < lo <= hi <= 1):
            raise ValueError(f"crop_scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")
        if not (0 < self.crop_ratio[0] <= self.crop_ratio[1]):
            raise ValueError(f"invalid crop_ratio {self.crop_ratio}")
        for name in ("flip_p", "blur_p"):
            p = getattr(self, name)
            if not 0 <= p <= 1:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if self.jitter < 0 or self.jitter >= 1:
            raise ValueError(f"jitter must be in [0, 1), got {self.jitter}")
        if self.size <= 0:
            raise ValueError("view size must be positive")


@dataclass(frozen=True)
class ViewRecipe:
    views: tuple[ViewSpec, ...]

    def __post_init__(self):
        if not self.views:
            raise ValueError("a recipe needs at least one view")
        for v in self.views:
            v.validate()

    @property
    def view_count(self) -> int:
        return len(self.views)

    @classmethod
    def default(cls, size: int, n_views: int = 2, **kw) -> "ViewRecipe":
        """Two-view SSL recipe; Gaussian blur is applied (p=0.5) on the first view only."""
        specs = [ViewSpec(size=size, blur_p=0.5 if i == 0 else 0.0, **kw) for i in range(n_views)]
        return cls(tuple(specs))

    @classmethod
    def identity(cls, size: int, n_views: int = 1) -> "ViewRecipe":
        spec = ViewSpec(size=size, crop_scale=(1.0, 1.0), crop_ratio=(1.0, 1.0),
                        flip_p=0.0, jitter=0.0, blur_p=0.0)
        return cls((spec,) * n_views)


def _crop_box(h: int, w: int, spec: ViewSpec, rng: np.random.Generator):
    area = h * w
    log_ratio = (math.log(spec.crop_ratio[0]), math.log(spec.crop_ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(*spec.crop_scale)
        ratio = math.exp(rng.uniform(*log_ratio))
        cw = int(round(math.sqrt(target * ratio)))
        ch = int(round(math.sqrt(target / ratio)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    # central square fallback
    side = min(h, w)
    return (h - side) // 2, (w - side) // 2, side, side


def _gaussian_blur(img: torch.Tensor, sigma: float) -> torch.Tensor:
    radius = max(1, int(math.ceil(2 * sigma)))
    xs = torch.arange(-radius, radius + 1, dtype=img.dtype)
    k = torch.exp(-0.5 * (xs / sigma) ** 2)
    k = k / k.sum()
    c = img.shape[0]
    x = img.unsqueeze(0)
    x = F.pad(x, (radius, radius, radius, radius), mode="reflect" if radius < min(img.shape[-2:]) else "replicate")
    x = F.conv2d(x, k.view(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)
    x = F.conv2d(x, k.view(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)
    return x[0]


def _apply(img: torch.Tensor, spec: ViewSpec, rng: np.random.Generator) -> torch.Tensor:
    _, h, w = img.shape
    top, left, ch, cw = _crop_box(h, w, spec, rng)
    out = img[:, top : top + ch, left : left + cw]
    if (ch, cw) != (spec.size, spec.size):
        out = F.interpolate(out.unsqueeze(0), size=(spec.size, spec.size), mode="bilinear",
                            align_corners=False)[0]
    if spec.flip_p > 0 and rng.uniform() < spec.flip_p:
        out = out.flip(-1)
    if spec.jitter > 0:
        gain = 1.0 + rng.uniform(-spec.jitter, spec.jitter)
        shift = rng.uniform(-spec.jitter, spec.jitter)
        mean = out.mean()
        out = (out - mean) * gain + mean + shift
    if spec.blur_p > 0 and rng.uniform() < spec.blur_p:
        out = _gaussian_blur(out, rng.uniform(*spec.blur_sigma))
    return out.contiguous()


def make_views(image, recipe: ViewRecipe, seed) -> list[torch.Tensor]:
    """Return ``recipe.view_count`` augmented copies of a ``(C, H, W)`` image.

    Deterministic for a given ``(image, recipe, seed)``. ``seed`` may be an int
    or a ``numpy.random.Generator`` (which is advanced).
    """
    img = torch.as_tensor(image)
    if img.ndim != 3:
        raise ValueError(f"expected a (C,H,W) image, got shape {tuple(img.shape)}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return [_apply(img, spec, rng) for spec in recipe.views]


def augment_batch(images: torch.Tensor, recipe: ViewRecipe, rng: np.random.Generator):
    """Views for a batch ``(B, C, H, W)``: returns a list with one ``(B, C, s, s)`` tensor per view."""
    per_image = [make_views(img, recipe, rng) for img in images]
    return [torch.stack([v[i] for v in per_image]) for i in range(recipe.view_count)]
