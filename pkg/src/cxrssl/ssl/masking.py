from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class MaskPlan:
    mask_ratio: float
    masked_indices: np.ndarray
    visible_indices: np.ndarray

    @property
    def n_tokens(self) -> int:
        return len(self.masked_indices) + len(self.visible_indices)

    def mask(self) -> np.ndarray:
        """Boolean vector, True where the token is masked."""
        m = np.zeros(self.n_tokens, dtype=bool)
        m[self.masked_indices] = True
        return m


def n_masked(n_tokens: int, mask_ratio: float) -> int:
    # round half up, so 0.75 * 6 -> 5 rather than banker's 4
    return int(np.floor(mask_ratio * n_tokens + 0.5))


def _check_ratio(mask_ratio: float) -> None:
    if not 0 <= mask_ratio < 1:
        raise ValueError(f"mask_ratio must be in [0, 1), got {mask_ratio}")


def plan_mask(n_tokens: int, mask_ratio: float, seed) -> MaskPlan:
    """Sample ``round(mask_ratio * n_tokens)`` masked tokens uniformly without replacement."""
    _check_ratio(mask_ratio)
    if n_tokens < 1:
        raise ValueError("n_tokens must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    perm = rng.permutation(n_tokens)
    k = n_masked(n_tokens, mask_ratio)
    return MaskPlan(float(mask_ratio), np.sort(perm[:k]), np.sort(perm[k:]))


def batch_masks(batch: int, n_tokens: int, mask_ratio: float, rng: np.random.Generator):
    """Independent plans for a batch as ``(keep_index (B, n_vis), mask (B, n))`` tensors."""
    _check_ratio(mask_ratio)
    plans = [plan_mask(n_tokens, mask_ratio, rng) for _ in range(batch)]
    keep = torch.from_numpy(np.stack([p.visible_indices for p in plans])).long()
    mask = torch.from_numpy(np.stack([p.mask() for p in plans]))
    return keep, mask
