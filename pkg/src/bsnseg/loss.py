"""Per-pixel softmax and the boundary-sensitive cross-entropy losses.

All segmentation losses take ``(C, H, W)`` logits, reduce by the mean over
pixels, and return the gradient with respect to the logits. Computation runs
in the dtype of the logits (float64 for verification, float32 for training).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import BG, FG


@dataclass
class LossResult:
    value: float
    grad: np.ndarray


def _as_logits(logits) -> np.ndarray:
    z = np.asarray(logits)
    if z.dtype.kind != "f":
        z = z.astype(np.float64)
    if z.ndim != 3:
        raise ValueError(f"logits must be (C, H, W), got shape {z.shape}")
    if not np.isfinite(z).all():
        raise ValueError("logits contain non-finite values")
    return z


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=0)
    return shifted - np.log(np.exp(shifted).sum(axis=0))


def log_softmax_pixelwise(logits) -> np.ndarray:
    return _log_softmax(_as_logits(logits))


def softmax_pixelwise(logits) -> np.ndarray:
    z = _as_logits(logits)
    e = np.exp(z - z.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def _check_same_grid(z: np.ndarray, other: np.ndarray, what: str) -> None:
    if other.shape[-2:] != z.shape[-2:]:
        raise ValueError(f"{what} dims {other.shape[-2:]} do not match logits {z.shape[-2:]}")


def _weighted_soft_ce(z: np.ndarray, target: np.ndarray, weight) -> LossResult:
    logp = _log_softmax(z)
    n = z.shape[1] * z.shape[2]
    per_pixel = -(target * logp).sum(axis=0)
    diff = np.exp(logp) - target
    if weight is not None:
        per_pixel = weight * per_pixel
        diff = diff * weight
    grad = diff / n
    return LossResult(float(per_pixel.sum() / n), grad.astype(z.dtype, copy=False))


def ik_loss(logits, kernel) -> LossResult:
    """Soft-label cross-entropy; gradient ``(y - K) / N`` per pixel."""
    z = _as_logits(logits)
    k = np.asarray(kernel, dtype=z.dtype)
    if k.shape != z.shape:
        raise ValueError(f"soft-label field shape {k.shape} does not match logits {z.shape}")
    return _weighted_soft_ce(z, k, None)


def hard_to_onehot(labels, num_classes: int, dtype=np.float64) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"hard labels must be (H, W), got shape {labels.shape}")
    if labels.dtype.kind not in "iu":
        raise ValueError("hard labels must be integer class indices")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"hard labels must lie in [0, {num_classes})")
    return (np.arange(num_classes)[:, None, None] == labels[None]).astype(dtype)


def mask_to_hard_labels(mask) -> np.ndarray:
    """fg -> FG, bg -> BG class indices (the boundary class is never used)."""
    return np.where(np.asarray(mask, dtype=bool), FG, BG).astype(np.int64)


def cross_entropy(logits, hard_labels) -> LossResult:
    """Standard hard-label softmax cross-entropy, mean over pixels."""
    z = _as_logits(logits)
    _check_same_grid(z, np.asarray(hard_labels), "labels")
    return _weighted_soft_ce(z, hard_to_onehot(hard_labels, z.shape[0], z.dtype), None)


def gk_loss(logits, hard_labels, kernel) -> LossResult:
    """Hard-label cross-entropy with every pixel weighted by the global kernel."""
    z = _as_logits(logits)
    w = np.asarray(kernel, dtype=z.dtype)
    if w.shape != z.shape[1:]:
        raise ValueError(f"global kernel shape {w.shape} does not match logits {z.shape[1:]}")
    onehot = hard_to_onehot(hard_labels, z.shape[0], z.dtype)
    _check_same_grid(z, onehot, "labels")
    return _weighted_soft_ce(z, onehot, w)


def combined_loss(logits, kernel_indv, kernel_global) -> LossResult:
    """Soft-label cross-entropy weighted per pixel by the global kernel."""
    z = _as_logits(logits)
    k = np.asarray(kernel_indv, dtype=z.dtype)
    w = np.asarray(kernel_global, dtype=z.dtype)
    if k.shape != z.shape:
        raise ValueError(f"soft-label field shape {k.shape} does not match logits {z.shape}")
    if w.shape != z.shape[1:]:
        raise ValueError(f"global kernel shape {w.shape} does not match logits {z.shape[1:]}")
    return _weighted_soft_ce(z, k, w)


def attribute_loss(attr_logits, label: int) -> LossResult:
    """Binary softmax cross-entropy for the attribute head (0 = long, 1 = short hair)."""
    z = np.asarray(attr_logits)
    if z.dtype.kind != "f":
        z = z.astype(np.float64)
    if z.shape != (2,):
        raise ValueError(f"attribute logits must be a 2-vector, got shape {z.shape}")
    if label not in (0, 1):
        raise ValueError(f"attribute label must be 0 or 1, got {label}")
    shifted = z - z.max()
    logp = shifted - np.log(np.exp(shifted).sum())
    grad = np.exp(logp)
    grad[label] -= 1.0
    return LossResult(float(-logp[label]), grad)


LOSS_MODES = ("ik", "gk", "combined", "baseline")


def segmentation_loss(mode: str, logits, mask, kernel_indv=None, kernel_global=None) -> LossResult:
    """Dispatch on the training loss mode."""
    if mode == "ik":
        return ik_loss(logits, kernel_indv)
    if mode == "gk":
        return gk_loss(logits, mask_to_hard_labels(mask), kernel_global)
    if mode == "combined":
        return combined_loss(logits, kernel_indv, kernel_global)
    if mode == "baseline":
        return cross_entropy(logits, mask_to_hard_labels(mask))
    raise ValueError(f"unknown loss mode {mode!r}; expected one of {LOSS_MODES}")
