"""Training objectives: gaze regression, masked movement classification,
contrastive instance discrimination, image reconstruction, and their
weighted combination.

Predictions are engine tensors; targets are plain numpy arrays wrapped as
constants, so gradients only flow into the model.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

# canonical body part order used by targets, heads, masks, and label files
PARTS = ("torso", "neck", "right_arm", "left_arm", "right_leg", "left_leg")


class DegenerateLossWarning(UserWarning):
    """A loss term had no unmasked targets and contributed exactly zero."""


@dataclass(frozen=True)
class LossWeights:
    """Coefficients of the combined objective.

    ``attention`` scales the gaze term, ``movement`` the body part term,
    ``visual`` the contrastive or reconstruction term; ``huber_delta`` is the
    quadratic-to-linear crossover of the gaze loss.
    """

    attention: float = 0.09
    movement: float = 0.01
    visual: float = 0.9
    huber_delta: float = 1.0

    def validate(self) -> None:
        for name in ("attention", "movement", "visual"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight '{name}' must be non-negative")
        if self.huber_delta <= 0:
            raise ValueError("huber_delta must be positive")
        if self.attention == 0 and self.movement == 0 and self.visual == 0:
            raise ValueError("at least one loss weight must be positive")


@dataclass
class MovementTarget:
    """Per-frame binary moved/still labels with a validity mask.

    ``labels`` is (..., len(PARTS)) in {0, 1}; ``mask`` has the same shape
    and switches individual entries into or out of the loss (gray-area or
    missing sensor readings are masked off).
    """

    labels: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.labels.shape != self.mask.shape:
            raise ValueError(f"labels {self.labels.shape} and mask {self.mask.shape} differ")
        if self.labels.shape[-1] != len(PARTS):
            raise ValueError(f"last axis must be {len(PARTS)} parts, got {self.labels.shape}")
        vals = np.unique(self.labels)
        if not np.all(np.isin(vals, (0, 1))):
            raise ValueError("labels must be binary")


def _zero_like_scalar(pred: Tensor) -> Tensor:
    return T.constant(0.0, dtype=pred.dtype)


def huber(err: Tensor, delta: float) -> Tensor:
    """Elementwise Huber penalty: quadratic inside |e| < delta, linear outside."""
    delta = float(delta)
    a = T.abs_(err)
    quad = (err * err) * 0.5
    lin = a * delta - 0.5 * delta * delta
    inside = T.constant((np.abs(err.data) < delta).astype(err.data.dtype), dtype=err.dtype)
    return inside * quad + (1.0 - inside) * lin


def gaze_loss(pred: Tensor, target: np.ndarray, valid: np.ndarray | None = None,
              delta: float = 1.0) -> Tensor:
    """Masked mean of the elementwise Huber penalty over gaze coordinates.

    ``pred`` and ``target`` are (..., 2); ``valid`` flags whole frames, shape
    (...,).  With no valid frame the result is a constant zero and a
    :class:`DegenerateLossWarning` is issued.
    """
    target = np.asarray(target, dtype=pred.data.dtype)
    if target.shape != pred.shape or pred.shape[-1] != 2:
        raise T.ShapeError("gaze_loss", pred.shape, target.shape)
    if valid is None:
        mask = np.ones(pred.shape, dtype=pred.data.dtype)
    else:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != pred.shape[:-1]:
            raise T.ShapeError("gaze_loss", valid.shape, pred.shape[:-1])
        mask = np.repeat(valid[..., None], 2, axis=-1).astype(pred.data.dtype)
    count = float(mask.sum())
    if count == 0:
        warnings.warn("gaze loss: no valid frames in batch", DegenerateLossWarning)
        return _zero_like_scalar(pred)
    err = pred - T.constant(target, dtype=pred.dtype)
    masked = huber(err, delta) * T.constant(mask, dtype=pred.dtype)
    return masked.sum() / count


def movement_loss(logits: Tensor, target: MovementTarget) -> Tensor:
    """Masked mean of per-entry sigmoid cross entropy on movement logits."""
    labels = np.asarray(target.labels, dtype=logits.data.dtype)
    if labels.shape != logits.shape:
        raise T.ShapeError("movement_loss", logits.shape, labels.shape)
    mask = target.mask.astype(logits.data.dtype)
    count = float(mask.sum())
    if count == 0:
        warnings.warn("movement loss: every target entry is masked", DegenerateLossWarning)
        return _zero_like_scalar(logits)
    y = T.constant(labels, dtype=logits.dtype)
    # stable log(1 + exp(-|z|)) formulation of BCE-with-logits
    bce = T.relu(logits) - logits * y + T.log(T.exp(-T.abs_(logits)) + 1.0)
    return (bce * T.constant(mask, dtype=logits.dtype)).sum() / count


def infonce_loss(query: Tensor, positive, negatives, tau: float = 0.07,
                 include_positive: bool = True) -> Tensor:
    """Contrastive loss of queries against one positive and a bank of negatives.

    ``query`` is (B, D) and should be unit-normalized, as should ``positive``
    (B, D) and ``negatives`` (K, D); similarities are inner products scaled
    by 1/tau.  ``include_positive`` puts the positive into the denominator
    (the common formulation, default); with ``False`` the denominator sums
    over the bank only, in which case the loss may be negative.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    pos = positive.data if isinstance(positive, Tensor) else np.asarray(positive)
    negs = negatives.as_array() if hasattr(negatives, "as_array") else np.asarray(negatives)
    pos = pos.astype(query.data.dtype)
    negs = negs.astype(query.data.dtype)
    if query.ndim != 2 or pos.shape != query.shape:
        raise T.ShapeError("infonce_loss", query.shape, pos.shape)
    if negs.ndim != 2 or (negs.size and negs.shape[1] != query.shape[1]):
        raise T.ShapeError("infonce_loss", query.shape, negs.shape)
    b = query.shape[0]
    inv_tau = 1.0 / float(tau)
    l_pos = (query * T.constant(pos, dtype=query.dtype)).sum(axis=1) * inv_tau  # (B,)
    if negs.shape[0] == 0:
        if not include_positive:
            raise ValueError("bank-only denominator is undefined with an empty bank")
        warnings.warn("contrastive loss: empty negative bank (warm-up step)", DegenerateLossWarning)
        return _zero_like_scalar(query)
    l_neg = T.matmul(query, T.constant(negs.T, dtype=query.dtype)) * inv_tau  # (B, K)
    if include_positive:
        logits = T.concat([l_pos.reshape(b, 1), l_neg], axis=1)
    else:
        logits = l_neg
    return (T.logsumexp(logits, axis=1) - l_pos).mean()


def ae_loss(recon: Tensor, image: np.ndarray) -> Tensor:
    """Per-sample Euclidean reconstruction error, averaged per element and batch.

    Note this is the unsquared L2 norm of the difference, divided by the
    number of elements per sample.
    """
    image = np.asarray(image, dtype=recon.data.dtype)
    if image.shape != recon.shape:
        raise T.ShapeError("ae_loss", recon.shape, image.shape)
    if recon.ndim < 2:
        raise T.ShapeError("ae_loss", recon.shape, detail="expected a leading batch axis")
    b = recon.shape[0]
    per_sample = int(np.prod(recon.shape[1:]))
    d = recon - T.constant(image, dtype=recon.dtype)
    sq = (d * d).reshape(b, per_sample).sum(axis=1)
    return T.sqrt(sq).mean() / per_sample


def total_loss(attention: Tensor | None, movement: Tensor | None, visual: Tensor | None,
               weights: LossWeights) -> Tensor:
    """Weighted sum of the three objective terms; missing terms contribute zero."""
    weights.validate()
    terms = []
    for w, t in ((weights.attention, attention), (weights.movement, movement),
                 (weights.visual, visual)):
        if t is not None and w != 0:
            terms.append(t * float(w))
    if not terms:
        ref = attention or movement or visual
        return _zero_like_scalar(ref) if ref is not None else T.constant(0.0)
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out
