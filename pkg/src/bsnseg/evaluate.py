"""Mean IoU, boundary-band IoU and trimap export."""

from __future__ import annotations

import csv

import numpy as np

from .geometry import boundary_band, contour_mask
from .raster import check_mask, write_gray_png

TRIMAP_BG, TRIMAP_UNKNOWN, TRIMAP_FG = 0, 128, 255


def _pair(pred, gt):
    pred, gt = check_mask(pred), check_mask(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    return pred, gt


def _iou(pred: np.ndarray, gt: np.ndarray) -> float:
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def iou(pred, gt, class_mean: bool = False) -> float:
    """Foreground IoU; both foregrounds empty counts as a perfect score.

    With ``class_mean`` the foreground and background IoUs are averaged.
    """
    pred, gt = _pair(pred, gt)
    if class_mean:
        return 0.5 * (_iou(pred, gt) + _iou(~pred, ~gt))
    return _iou(pred, gt)


def mean_iou(pairs, class_mean: bool = False) -> float:
    pairs = list(pairs)
    if not pairs:
        raise ValueError("mean_iou needs at least one (prediction, ground truth) pair")
    return float(np.mean([iou(p, g, class_mean) for p, g in pairs]))


def band_region(gt, w: float) -> np.ndarray:
    """Pixels within Euclidean distance ``w`` of the ground-truth contour."""
    return boundary_band(gt, 2 * w).member


def boundary_band_iou(pred, gt, w: float = 5) -> float:
    """Foreground IoU restricted to the band around the ground-truth contour."""
    pred, gt = _pair(pred, gt)
    if w < 1:
        raise ValueError(f"band width must be >= 1, got {w}")
    band = band_region(gt, w)
    if not band.any():
        return 1.0
    return _iou(pred[band], gt[band])


def make_trimap(mask, width: float = 10) -> np.ndarray:
    """uint8 trimap: 0 background, 128 unknown (the boundary band), 255 foreground."""
    fg = check_mask(mask)
    if width < 0:
        raise ValueError(f"trimap width must be >= 0, got {width}")
    out = np.where(fg, TRIMAP_FG, TRIMAP_BG).astype(np.uint8)
    out[boundary_band(fg, width).member] = TRIMAP_UNKNOWN
    return out


def save_trimap(trimap, path) -> None:
    write_gray_png(np.asarray(trimap, dtype=np.uint8), path)


def trimap_is_valid(trimap, mask) -> bool:
    """Labels are drawn from the three levels and every contour pixel is unknown."""
    trimap = np.asarray(trimap)
    if not np.isin(trimap, (TRIMAP_BG, TRIMAP_UNKNOWN, TRIMAP_FG)).all():
        return False
    return bool((trimap[contour_mask(mask)] == TRIMAP_UNKNOWN).all())


REPORT_FIELDS = ("image_id", "iou", "band_iou")


def evaluation_rows(named_pairs, w: float = 5):
    """``(image_id, pred, gt)`` triples -> report rows."""
    return [(name, iou(p, g), boundary_band_iou(p, g, w)) for name, p, g in named_pairs]


def write_report(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_FIELDS)
        for name, v, bv in rows:
            writer.writerow([name, f"{v:.6f}", f"{bv:.6f}"])
