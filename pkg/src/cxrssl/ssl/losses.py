"""Objective functions and the momentum/centering updates they depend on."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .masking import MaskPlan


class UndefinedLossError(ValueError):
    pass


def _as_mask(plan, shape) -> torch.Tensor:
    if isinstance(plan, MaskPlan):
        m = torch.from_numpy(plan.mask())
    else:
        m = torch.as_tensor(plan, dtype=torch.bool)
    if m.shape != shape:
        raise ValueError(f"mask shape {tuple(m.shape)} does not match patches {tuple(shape)}")
    return m


def mae_loss(predicted, target, plan, normalize_targets: bool = True, eps: float = 1e-6):
    """Mean squared reconstruction error over masked patches only.

    ``predicted``/``target`` are ``(n, P)`` or ``(B, n, P)``; ``plan`` is a
    :class:`MaskPlan` or a boolean mask of shape ``(n,)``/``(B, n)``. With
    ``normalize_targets`` each target patch is standardised by its own mean and
    (unbiased) std before comparison.
    """
    predicted = torch.as_tensor(predicted)
    target = torch.as_tensor(target, dtype=predicted.dtype)
    if predicted.shape != target.shape:
        raise ValueError(f"prediction {tuple(predicted.shape)} vs target {tuple(target.shape)}")
    mask = _as_mask(plan, predicted.shape[:-1])
    if not mask.any():
        raise UndefinedLossError("no masked patches: reconstruction loss is undefined")
    if normalize_targets:
        mean = target.mean(dim=-1, keepdim=True)
        var = target.var(dim=-1, keepdim=True)
        target = (target - mean) / (var + eps) ** 0.5
    per_patch = ((predicted - target) ** 2).mean(dim=-1)
    w = mask.to(per_patch.dtype)
    return (per_patch * w).sum() / w.sum()


def _check_temperature(*taus) -> None:
    for t in taus:
        if not t > 0:
            raise ValueError(f"temperature must be > 0, got {t}")


def info_nce(queries, keys, tau: float):
    """One-direction InfoNCE with in-batch negatives; row i of ``keys`` is query i's positive."""
    _check_temperature(tau)
    q = F.normalize(queries, dim=-1)
    k = F.normalize(keys, dim=-1)
    logits = q @ k.transpose(-2, -1) / tau
    labels = torch.arange(q.shape[0], device=q.device)
    return F.cross_entropy(logits, labels)


def moco_loss(query_embeds, key_embeds, tau: float = 0.2):
    """Symmetrised InfoNCE.

    With ``(B, d)`` inputs the loss averages ``q -> k`` and ``k -> q``. With
    two-view ``(2, B, d)`` inputs (queries and momentum keys of both views) it
    averages ``q1 -> k2`` and ``q2 -> k1``, the usual momentum-contrast pairing.
    """
    _check_temperature(tau)
    q = torch.as_tensor(query_embeds)
    k = torch.as_tensor(key_embeds)
    if q.shape != k.shape:
        raise ValueError(f"query {tuple(q.shape)} vs key {tuple(k.shape)}")
    if q.ndim == 2:
        if q.shape[0] < 1:
            raise ValueError("need at least one pair")
        return 0.5 * (info_nce(q, k, tau) + info_nce(k, q, tau))
    if q.ndim == 3 and q.shape[0] == 2:
        return 0.5 * (info_nce(q[0], k[1], tau) + info_nce(q[1], k[0], tau))
    raise ValueError(f"expected (B, d) or (2, B, d) embeddings, got {tuple(q.shape)}")


@dataclass
class DistillState:
    """Teacher-side state of self-distillation (the teacher parameters live on the objective)."""

    center: torch.Tensor
    tau_teacher: float = 0.04
    tau_student: float = 0.1
    center_momentum: float = 0.9
    teacher_momentum: float = 0.996

    def __post_init__(self):
        _check_temperature(self.tau_teacher, self.tau_student)
        for name in ("center_momentum", "teacher_momentum"):
            m = getattr(self, name)
            if not 0 <= m <= 1:
                raise ValueError(f"{name} must be in [0, 1], got {m}")
        if not torch.isfinite(torch.as_tensor(self.center)).all():
            raise ValueError("center must be finite")


@dataclass
class ContrastState:
    tau: float = 0.2
    momentum: float = 0.99

    def __post_init__(self):
        _check_temperature(self.tau)
        if not 0 <= self.momentum <= 1:
            raise ValueError(f"momentum must be in [0, 1], got {self.momentum}")


def dino_loss(student_logits, teacher_logits, state: DistillState):
    """Cross-entropy between the centred, sharpened teacher and the student softmax.

    Inputs are ``(K,)``, ``(B, K)`` (one view each) or ``(V, B, K)`` view stacks;
    for view stacks, pairs where student and teacher see the same view are
    skipped. Teacher logits are detached.
    """
    _check_temperature(state.tau_teacher, state.tau_student)
    s = torch.as_tensor(student_logits)
    t = torch.as_tensor(teacher_logits, dtype=s.dtype).detach()
    c = torch.as_tensor(state.center, dtype=s.dtype)
    if s.ndim < 3:
        s, t = s.reshape(1, -1, s.shape[-1]), t.reshape(1, -1, t.shape[-1])
        same_view_pairs = False
    else:
        same_view_pairs = True
    p_t = torch.softmax((t - c) / state.tau_teacher, dim=-1)
    log_p_s = torch.log_softmax(s / state.tau_student, dim=-1)
    total, n_terms = 0.0, 0
    for it in range(t.shape[0]):
        for js in range(s.shape[0]):
            if same_view_pairs and it == js and s.shape[0] > 1:
                continue
            total = total + (-(p_t[it] * log_p_s[js]).sum(dim=-1)).mean()
            n_terms += 1
    return total / n_terms


@torch.no_grad()
def ema_update(student, teacher, m: float):
    """``teacher' = m * teacher + (1 - m) * student`` for every parameter.

    Accepts two parameter maps (returns a new map) or two modules (the teacher
    module is updated in place and returned).
    """
    if not 0 <= m <= 1:
        raise ValueError(f"momentum must be in [0, 1], got {m}")
    if isinstance(teacher, nn.Module):
        s_params = dict(student.named_parameters())
        t_params = dict(teacher.named_parameters())
        if s_params.keys() != t_params.keys():
            raise ValueError("student and teacher parameter paths differ")
        for name, tp in t_params.items():
            sp = s_params[name]
            if sp.shape != tp.shape:
                raise ValueError(f"shape mismatch for {name}")
            tp.copy_(m * tp + (1 - m) * sp)
        return teacher
    if set(student) != set(teacher):
        raise ValueError("student and teacher parameter paths differ")
    out = {}
    for name, tv in teacher.items():
        sv = torch.as_tensor(student[name])
        tv = torch.as_tensor(tv)
        if sv.shape != tv.shape:
            raise ValueError(f"shape mismatch for {name}")
        out[name] = m * tv + (1 - m) * sv
    return out


@torch.no_grad()
def center_update(center, teacher_outputs, m_c: float):
    """``c' = m_c * c + (1 - m_c) * mean(teacher_outputs)`` over all leading axes."""
    if not 0 <= m_c <= 1:
        raise ValueError(f"center momentum must be in [0, 1], got {m_c}")
    t = torch.as_tensor(teacher_outputs)
    t = t.reshape(-1, t.shape[-1])
    if t.shape[0] == 0:
        raise ValueError("empty teacher batch")
    c = torch.as_tensor(center, dtype=t.dtype)
    return m_c * c + (1 - m_c) * t.mean(dim=0)
