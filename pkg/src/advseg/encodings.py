"""Adversary input construction from label maps, predictions, and images.

Three encodings are supported:

* basic:   the probability map itself (one-hot on the ground-truth side).
* product: each class probability map multiplied into every color channel
           of the (down-sampled) image, giving 3C channels.
* scaling: the ground-truth one-hot is softened toward the prediction while
           keeping at least tau mass on the true class; the predicted side
           stays the raw probability map.

Void positions are zeroed across all channels on both sides, which also
kills the gradient there. Gradients flow only through the predicted side.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .labelmap import VOID, void_mask
from .losses import apply_void_zeroing
from .tensor import ShapeError, Tensor, concat_channels, mul, slice_channels


@dataclass(frozen=True)
class EncodingKind:
    """Which adversary input scheme to use.

    ``tau`` only matters for scaling and must exceed 1/C so the mass floor
    binds only when the prediction is wrong enough. ``include_image`` routes
    the down-sampled image into a separate adversary branch.
    """

    kind: str = "basic"
    tau: float = 0.9
    include_image: bool = False

    def __post_init__(self):
        if self.kind not in ("basic", "product", "scaling"):
            raise ValueError(f"unknown encoding kind {self.kind!r}")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")


@dataclass
class AdvInput:
    """One adversary input: channel stack, optional image for the image
    branch, and where the label content came from."""

    channels: Tensor
    provenance: str  # "ground_truth" | "predicted"
    image: Tensor | None = None


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """(C, H, W) or (N, C, H, W) one-hot encoding; VOID pixels are all-zero."""
    labels = np.asarray(labels)
    if np.any((labels >= num_classes) & (labels != VOID)):
        raise ValueError(f"label out of range for C={num_classes}")
    squeeze = labels.ndim == 2
    if squeeze:
        labels = labels[None]
    n, h, w = labels.shape
    out = np.zeros((n, num_classes, h, w))
    for c in range(num_classes):
        out[:, c] = labels == c
    return out[0] if squeeze else out


def downsample_labels(labels: np.ndarray, stride: int) -> np.ndarray:
    """Nearest-neighbor: keep the top-left sample of each stride block."""
    labels = np.asarray(labels)
    h, w = labels.shape[-2:]
    if h % stride or w % stride:
        raise ShapeError(f"extents {h}x{w} not divisible by stride {stride}")
    return labels[..., ::stride, ::stride]


def downsample_image(image: np.ndarray, stride: int) -> np.ndarray:
    """Nearest-neighbor image down-sampling by the segmenter stride."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[-2:]
    if h % stride or w % stride:
        raise ShapeError(f"extents {h}x{w} not divisible by stride {stride}")
    return image[..., ::stride, ::stride]


def encode_basic(prob, mask) -> Tensor:
    """Identity on channels plus void zeroing."""
    t = prob if isinstance(prob, Tensor) else Tensor(np.asarray(prob, dtype=np.float64))
    if t.ndim != 4:
        raise ShapeError(f"expected (N, C, H, W) probabilities, got {t.shape}")
    return apply_void_zeroing(t, mask)


def encode_product(image: np.ndarray, prob: Tensor, mask) -> Tensor:
    """Channel (3c + k) is class-c probability times color channel k; the
    image is nearest-neighbor down-sampled to the probability resolution."""
    if prob.ndim != 4:
        raise ShapeError(f"expected (N, C, H, W) probabilities, got {prob.shape}")
    n, c, h, w = prob.shape
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[None]
    if img.shape[0] != n or img.shape[1] != 3:
        raise ShapeError(f"expected (N, 3, H0, W0) image, got {img.shape}")
    if img.shape[2] != h or img.shape[3] != w:
        if img.shape[2] % h or img.shape[3] % w or img.shape[2] // h != img.shape[3] // w:
            raise ShapeError(f"image {img.shape[2:]} not a multiple of map {h}x{w}")
        img = downsample_image(img, img.shape[2] // h)

    zeroed = apply_void_zeroing(prob, mask)
    class_rep = concat_channels(
        [slice_channels(zeroed, ci, ci + 1) for ci in range(c) for _ in range(3)])
    image_tile = Tensor(np.tile(img, (1, c, 1, 1)))
    return mul(class_rep, image_tile)


def encode_scaling(pred: np.ndarray, labels: np.ndarray, tau: float) -> np.ndarray:
    """Soften ground truth toward the prediction with at least ``tau`` mass
    on the true class:

        y_l = max(tau, s_l);  y_c = s_c * (1 - y_l) / (1 - s_l) for c != l

    Applied to the ground-truth side only and returned as plain data (no
    gradient). Void pixels come out all-zero. If s_l == 1 exactly the
    denominator vanishes; the limit is the one-hot vector.
    """
    s = np.asarray(pred, dtype=np.float64)
    labels = np.asarray(labels)
    squeeze = s.ndim == 3
    if squeeze:
        s = s[None]
        labels = labels[None]
    n, c, h, w = s.shape
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels {labels.shape} do not match predictions {s.shape}")

    valid = labels != VOID
    safe_labels = np.where(valid, labels, 0).astype(np.int64)
    s_true = np.take_along_axis(s, safe_labels[:, None], axis=1)[:, 0]
    y_true = np.maximum(tau, s_true)
    denom = 1.0 - s_true
    degenerate = denom <= 0.0
    factor = np.where(degenerate, 0.0, (1.0 - y_true) / np.where(degenerate, 1.0, denom))

    out = s * factor[:, None]
    np.put_along_axis(out, safe_labels[:, None],
                      np.where(degenerate, 1.0, y_true)[:, None], axis=1)
    out *= valid[:, None]
    return out[0] if squeeze else out


def build_adv_pair(image, labels, seg_out: Tensor,
                   enc: EncodingKind) -> tuple[AdvInput, AdvInput]:
    """Encode the ground-truth and predicted adversary inputs for a batch.

    ``labels`` must already be down-sampled to the segmenter output
    resolution. Only the predicted side carries gradient.
    """
    if seg_out.ndim != 4:
        raise ShapeError(f"expected (N, C, H, W) segmenter output, got {seg_out.shape}")
    n, c, h, w = seg_out.shape
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels[None]
    if enc.kind == "scaling" and enc.tau <= 1.0 / c:
        raise ValueError(f"tau must exceed 1/C = {1.0 / c:.4f}")
    mask = void_mask(labels)

    if enc.kind == "scaling":
        gt_map = encode_scaling(seg_out.data, labels, enc.tau)
    else:
        gt_map = one_hot(labels, c)  # VOID pixels already all-zero

    img_const = None
    if enc.kind == "product" or enc.include_image:
        img = np.asarray(image, dtype=np.float64)
        if img.ndim == 3:
            img = img[None]
        if img.shape[2] != h:
            img = downsample_image(img, img.shape[2] // h)
        img_const = img

    if enc.kind == "product":
        gt_channels = encode_product(img_const, Tensor(gt_map), mask)
        pred_channels = encode_product(img_const, seg_out, mask)
    else:
        gt_channels = encode_basic(gt_map, mask)
        pred_channels = encode_basic(seg_out, mask)

    branch_img = Tensor(img_const) if enc.include_image else None
    gt = AdvInput(gt_channels.detach(), "ground_truth", branch_img)
    pred = AdvInput(pred_channels, "predicted", branch_img)
    return gt, pred
