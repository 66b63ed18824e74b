"""Loss functions and the two players' objectives.

The hybrid loss combines per-pixel multi-class cross-entropy with a
lambda-weighted adversarial term. Training never minimizes it directly:
the adversary minimizes a binary discrimination loss and the segmenter
minimizes cross-entropy plus its adversarial surrogate. Per-image losses
sum over pixels; batch objectives sum over images (the training engine
divides by batch size). Probabilities are clamped to [1e-7, 1 - 1e-7]
before any log so every objective stays finite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, clamp, log, mul, neg, reduce_mean, reduce_sum

PROB_EPS = 1e-7


@dataclass
class ObjectiveConfig:
    """Trade-off weight and which segmenter surrogate to use.

    ``modified_update`` swaps -lam * bce(a, 0) for +lam * bce(a, 1), which
    has the same critical points but a stronger gradient when the adversary
    is confident the map is synthetic.
    """

    lam: float = 1.0
    modified_update: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")


def expand_mask(mask, shape) -> np.ndarray:
    """Materialize an (H, W) or (N, H, W) void mask to a full (N, C, H, W)
    multiplier (the engine never broadcasts tensors implicitly)."""
    m = np.asarray(mask, dtype=np.float64)
    n, c, h, w = shape
    if m.shape == (h, w):
        m = m[None]
    if m.shape != (n, h, w) and not (m.shape[0] == 1 and n > 1):
        if m.shape != (n, h, w):
            raise ShapeError(f"mask shape {m.shape} does not match {shape}")
    return np.ascontiguousarray(np.broadcast_to(m[:, None], shape))


def apply_void_zeroing(prob: Tensor, mask) -> Tensor:
    """Zero all channels at void positions; the multiplication also zeroes
    any gradient flowing back through those positions."""
    if prob.ndim != 4:
        raise ShapeError(f"expected (N, C, H, W), got {prob.shape}")
    return mul(prob, Tensor(expand_mask(mask, prob.shape)))


def mce_loss(pred: Tensor, target_onehot, mask) -> Tensor:
    """Multi-class cross-entropy, summed over pixels and images:
    -sum_i sum_c mask_i * y_ic * ln(pred_ic)."""
    if pred.ndim != 4:
        raise ShapeError(f"expected (N, C, H, W), got {pred.shape}")
    y = target_onehot.data if isinstance(target_onehot, Tensor) else np.asarray(target_onehot, dtype=np.float64)
    if y.ndim == 3:
        y = y[None]
    if y.shape != pred.shape:
        raise ShapeError(f"target shape {y.shape} != pred shape {pred.shape}")
    weights = y * expand_mask(mask, pred.shape)
    p = clamp(pred, PROB_EPS, 1.0 - PROB_EPS)
    return neg(reduce_sum(mul(log(p), Tensor(weights))))


def bce_loss(pred: Tensor, target: int) -> Tensor:
    """Binary cross-entropy against a constant 0/1 target.

    A 4D (N, 1, h, w) adversary output is averaged over grid positions per
    image and summed over the batch; lower-rank inputs are averaged over
    all cells, so a scalar input returns the formula directly.
    """
    if target not in (0, 1):
        raise ValueError(f"bce target must be 0 or 1, got {target!r}")
    p = clamp(pred, PROB_EPS, 1.0 - PROB_EPS)
    per_cell = neg(log(p)) if target == 1 else neg(log((-p) + 1.0))
    if per_cell.ndim == 4:
        return reduce_sum(reduce_mean(per_cell, axes=(1, 2, 3)))
    return reduce_mean(per_cell)


def adversary_objective(adv_on_gt: Tensor, adv_on_pred: Tensor) -> Tensor:
    """Discrimination loss the adversary minimizes:
    sum_n bce(a(x, y), 1) + bce(a(x, s(x)), 0).

    Callers must detach the segmenter outputs feeding ``adv_on_pred`` so no
    gradient reaches the segmenter.
    """
    return bce_loss(adv_on_gt, 1) + bce_loss(adv_on_pred, 0)


def segmenter_objective(seg_out: Tensor, target_onehot, mask,
                        adv_on_pred: Tensor | None,
                        cfg: ObjectiveConfig) -> Tensor:
    """Cross-entropy plus the adversarial surrogate, adversary frozen.

    modified_update: mce + lam * bce(a(x, s(x)), 1)
    original:        mce - lam * bce(a(x, s(x)), 0)
    """
    loss = mce_loss(seg_out, target_onehot, mask)
    if cfg.lam == 0.0:
        return loss
    if adv_on_pred is None:
        raise ValueError("adversary output required when lambda > 0")
    if cfg.modified_update:
        return loss + mul(bce_loss(adv_on_pred, 1), cfg.lam)
    return loss - mul(bce_loss(adv_on_pred, 0), cfg.lam)


def hybrid_loss(seg_out: Tensor, target_onehot, mask,
                adv_on_gt: Tensor, adv_on_pred: Tensor,
                cfg: ObjectiveConfig) -> Tensor:
    """The combined two-player loss (diagnostic only; training uses the two
    split objectives): sum_n mce - lam * [bce(a_gt, 1) + bce(a_pred, 0)]."""
    loss = mce_loss(seg_out, target_onehot, mask)
    if cfg.lam == 0.0:
        return loss
    bracket = bce_loss(adv_on_gt, 1) + bce_loss(adv_on_pred, 0)
    return loss - mul(bracket, cfg.lam)
