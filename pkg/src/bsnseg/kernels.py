"""Soft-label (individual) kernels, the mean mask and the global position kernel.

Soft-label fields are ``(3, H, W)`` float64 arrays with channel order
``[foreground, boundary, background]``.
"""

from __future__ import annotations

import numpy as np

from .geometry import boundary_band
from .raster import check_field, check_mask

FG, BDRY, BG = 0, 1, 2
NORM_MODES = ("max", "sum")
GLOBAL_MODES = ("literal", "intent")


def compute_mean_mask(masks) -> np.ndarray:
    """Per-pixel fraction of masks that are foreground (accumulated in float64)."""
    masks = list(masks)
    if not masks:
        raise ValueError("need at least one mask")
    first = check_mask(masks[0])
    total = np.zeros(first.shape, dtype=np.float64)
    for i, m in enumerate(masks):
        m = check_mask(m)
        if m.shape != first.shape:
            raise ValueError(f"mask {i} has shape {m.shape}, expected {first.shape}")
        total += m
    return total / len(masks)


def one_hot_labels(mask) -> np.ndarray:
    """Hard fg/bg labels as a soft-label field (no boundary class)."""
    fg = check_mask(mask)
    out = np.zeros((3,) + fg.shape)
    out[FG] = fg
    out[BG] = ~fg
    return out


def boundary_weights(distance: np.ndarray, band: np.ndarray, width: float, norm: str) -> np.ndarray:
    """Boundary-class probability for band pixels, zero elsewhere.

    ``sum`` divides each band distance by the total distance over the band;
    ``max`` divides by the band radius. A zero denominator (every band pixel
    lies on the contour) yields zero.
    """
    out = np.zeros(band.shape)
    if not band.any():
        return out
    d = distance[band]
    if norm == "sum":
        denom = d.sum()
    elif norm == "max":
        denom = width / 2.0
    else:
        raise ValueError(f"unknown norm mode {norm!r}; expected one of {NORM_MODES}")
    if denom > 0:
        out[band] = np.minimum(d / denom, 1.0)
    return out


def individual_kernel(mask, width: float = 10, norm: str = "max") -> np.ndarray:
    """Soft labels for one ground-truth mask.

    Outside the boundary band pixels are one-hot fg/bg. Inside the band the
    boundary probability grows with distance from the contour and the rest of
    the mass stays on the pixel's own ground-truth class.
    """
    fg = check_mask(mask)
    if norm not in NORM_MODES:
        raise ValueError(f"unknown norm mode {norm!r}; expected one of {NORM_MODES}")
    band = boundary_band(fg, width)
    l_bdry = boundary_weights(band.distance, band.member, width, norm)
    out = np.empty((3,) + fg.shape)
    out[BDRY] = l_bdry
    out[FG] = np.where(fg, 1.0 - l_bdry, 0.0)
    out[BG] = np.where(fg, 0.0, 1.0 - l_bdry)
    return out


def global_kernel(mean_mask, a: float = 0.9, b: float = 1.0, mode: str = "literal") -> np.ndarray:
    """Per-location loss weight in ``[a, b]`` derived from the mean mask.

    ``literal``: ``b - (1 - |m - 0.5| / 0.5) (b - a)``, so ambiguous locations
    (m = 0.5) get ``a`` and certain ones get ``b``.
    ``intent``: the mirror image, ambiguous locations get ``b``.
    """
    m = check_field(mean_mask)
    if a > b:
        raise ValueError(f"global kernel range needs a <= b, got a={a}, b={b}")
    if a < 0:
        raise ValueError(f"global kernel range needs a >= 0, got a={a}")
    if m.min() < 0.0 or m.max() > 1.0:
        raise ValueError("mean mask values must lie in [0, 1]")
    ambiguity = 1.0 - np.abs(m - 0.5) / 0.5
    # convex-combination form keeps the endpoints exact in floating point
    if mode == "literal":
        return (1.0 - ambiguity) * b + ambiguity * a
    if mode == "intent":
        return (1.0 - ambiguity) * a + ambiguity * b
    raise ValueError(f"unknown global kernel mode {mode!r}; expected one of {GLOBAL_MODES}")
