"""Training objectives.

Three pieces: a mean binary cross-entropy over slot-by-frame activity
probabilities, an additive-angular-margin softmax over speaker identities for
the representation branch, and a frame-cosine distillation loss that pulls a
small extractor's output toward a frozen larger one.
"""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor

PROB_FLOOR = 1e-7
COS_CEIL = 1.0 - 1e-7


class LossError(ValueError):
    """Raised for inputs a loss cannot score."""


def bce_loss(probs: Tensor, targets: Tensor | np.ndarray) -> Tensor:
    """Mean binary cross-entropy over every slot and frame.

    Probabilities are clamped to [1e-7, 1 - 1e-7] before the logs.
    """
    targets = targets if isinstance(targets, Tensor) else Tensor(targets)
    if probs.shape != targets.shape:
        raise LossError(f"shape mismatch {probs.shape} vs {targets.shape}")
    p = probs.clip(PROB_FLOOR, 1.0 - PROB_FLOOR)
    loss = targets * p.log() + (Tensor(1.0) - targets) * (Tensor(1.0) - p).log()
    return -loss.mean()


def arcface_loss(emb: Tensor, table: Tensor, target_ids: np.ndarray,
                 include: np.ndarray, scale: float = 32.0,
                 margin: float = 0.2) -> tuple[Tensor, int]:
    """Margin-penalized softmax over the global speaker table.

    emb: (..., N, S) unit rows; table: (n_table, S) unit rows; target_ids:
    integer table indices shaped like emb minus the last axis; include: bool
    mask of the same shape selecting slots that carry an identity (real
    speakers and the masked pseudo slot). The margin is added to the target
    angle, all other classes keep their plain cosine, and the result is scored
    with cross-entropy averaged over included slots. Returns the loss and the
    number of slots included; an empty mask yields (0, 0).
    """
    include = np.asarray(include, dtype=bool)
    n_inc = int(include.sum())
    if n_inc == 0:
        return Tensor(0.0), 0
    target_ids = np.asarray(target_ids, dtype=np.int64)
    flat_emb = emb.reshape(-1, emb.shape[-1])
    keep = np.flatnonzero(include.reshape(-1))
    picked = flat_emb[keep]
    ids = target_ids.reshape(-1)[keep]

    cos = picked @ table.swapaxes(-1, -2)
    onehot = np.zeros((n_inc, table.shape[0]))
    onehot[np.arange(n_inc), ids] = 1.0
    hot = Tensor(onehot)

    cos_t = (cos * hot).sum(axis=-1, keepdims=True)
    cos_t = cos_t.clip(-COS_CEIL, COS_CEIL)
    sin_t = (Tensor(1.0) - cos_t * cos_t).clip(0.0, 1.0).sqrt()
    phi = cos_t * float(np.cos(margin)) - sin_t * float(np.sin(margin))
    logits = (hot * phi + (Tensor(1.0) - hot) * cos) * scale

    shift = Tensor(logits.data.max(axis=-1, keepdims=True))
    shifted = logits - shift
    lse = shifted.exp().sum(axis=-1, keepdims=True).log()
    per_slot = lse - (shifted * hot).sum(axis=-1, keepdims=True)
    return per_slot.mean(), n_inc


def distill_loss(student: Tensor, teacher: Tensor, eps: float = 1e-12) -> Tensor:
    """One minus the mean per-frame cosine between two frame sequences."""
    if student.shape != teacher.shape:
        raise LossError(f"shape mismatch {student.shape} vs {teacher.shape}")
    dot = (student * teacher).sum(axis=-1)
    ns = ((student * student).sum(axis=-1) + eps).sqrt()
    nt = ((teacher * teacher).sum(axis=-1) + eps).sqrt()
    cos = dot / (ns * nt)
    return Tensor(1.0) - cos.mean()
