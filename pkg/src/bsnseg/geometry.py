"""Contours, exact distance fields, boundary bands and spatial augmentation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .raster import check_field, check_mask, check_tensor


class NoContourError(ValueError):
    """The mask has no foreground/background interface."""


@dataclass(frozen=True)
class ContourSet:
    shape: tuple[int, int]
    points: np.ndarray  # (N, 2) int array of (row, col), row-major order

    def __len__(self) -> int:
        return len(self.points)

    @property
    def empty(self) -> bool:
        return len(self.points) == 0

    def to_mask(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=bool)
        if len(self.points):
            out[self.points[:, 0], self.points[:, 1]] = True
        return out

    @classmethod
    def from_mask(cls, contour_mask: np.ndarray) -> "ContourSet":
        contour_mask = np.asarray(contour_mask, dtype=bool)
        return cls(contour_mask.shape, np.argwhere(contour_mask))


@dataclass(frozen=True)
class BandMask:
    member: np.ndarray  # bool (H, W)
    distance: np.ndarray  # float64 (H, W); inf everywhere when there is no contour
    width: float

    @property
    def radius(self) -> float:
        return self.width / 2.0


def contour_mask(mask) -> np.ndarray:
    """Foreground pixels with at least one in-bounds background 4-neighbour."""
    fg = check_mask(mask)
    bg = ~fg
    touches_bg = np.zeros_like(fg)
    touches_bg[1:, :] |= bg[:-1, :]
    touches_bg[:-1, :] |= bg[1:, :]
    touches_bg[:, 1:] |= bg[:, :-1]
    touches_bg[:, :-1] |= bg[:, 1:]
    return fg & touches_bg


def extract_contour(mask) -> ContourSet:
    return ContourSet.from_mask(contour_mask(mask))


def distance_transform(contour: ContourSet, shape=None) -> np.ndarray:
    """Exact Euclidean distance from every pixel to the nearest contour point.

    Raises :class:`NoContourError` for an empty contour.
    """
    shape = tuple(shape) if shape is not None else contour.shape
    if tuple(contour.shape) != shape:
        raise ValueError(f"contour dims {contour.shape} do not match {shape}")
    if contour.empty:
        raise NoContourError("cannot compute a distance field without contour points")
    # distance_transform_edt measures distance to the nearest zero element
    return ndimage.distance_transform_edt(~contour.to_mask()).astype(np.float64)


def make_band(contour: ContourSet, distance: np.ndarray | None, width: float) -> BandMask:
    """Pixels within ``width / 2`` (inclusive) of the contour."""
    if width < 0:
        raise ValueError(f"band width must be >= 0, got {width}")
    if contour.empty:
        return BandMask(
            member=np.zeros(contour.shape, dtype=bool),
            distance=np.full(contour.shape, np.inf),
            width=float(width),
        )
    if distance is None:
        distance = distance_transform(contour)
    distance = check_field(distance)
    if distance.shape != tuple(contour.shape):
        raise ValueError("distance field and contour dimensions differ")
    return BandMask(member=distance <= width / 2.0, distance=distance, width=float(width))


def boundary_band(mask, width: float) -> BandMask:
    """Shortcut: contour extraction + distance transform + band."""
    contour = extract_contour(mask)
    distance = None if contour.empty else distance_transform(contour)
    return make_band(contour, distance, width)


# -- augmentation -------------------------------------------------------------


@dataclass(frozen=True)
class SpatialTransform:
    top: int
    left: int
    size: int
    flip: bool

    def apply(self, arr: np.ndarray) -> np.ndarray:
        """Crop and optionally mirror the last two (H, W) axes of ``arr``."""
        out = arr[..., self.top:self.top + self.size, self.left:self.left + self.size]
        if self.flip:
            out = out[..., ::-1]
        return np.ascontiguousarray(out)


def draw_transform(shape, crop: int, flip_prob: float, rng: np.random.Generator) -> SpatialTransform:
    h, w = shape[-2:]
    if crop < 1 or crop > min(h, w):
        raise ValueError(f"crop size {crop} does not fit a {h}x{w} image")
    if not 0.0 <= flip_prob <= 1.0:
        raise ValueError(f"flip probability must be in [0, 1], got {flip_prob}")
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    flip = bool(rng.random() < flip_prob)
    return SpatialTransform(top, left, crop, flip)


def augment_pair(image, labels, crop: int, flip_prob: float, rng: np.random.Generator):
    """Random square crop plus horizontal flip, applied identically to both arrays.

    ``image`` is (C, H, W); ``labels`` is any array whose last two axes are
    (H, W), e.g. a mask or a (3, H, W) soft-label field.
    """
    image = np.asarray(image)
    labels = np.asarray(labels)
    if image.shape[-2:] != labels.shape[-2:]:
        raise ValueError(f"image {image.shape} and labels {labels.shape} differ spatially")
    t = draw_transform(image.shape, crop, flip_prob, rng)
    return t.apply(image), t.apply(labels)


def position_channels(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    xs = np.arange(width, dtype=np.float64) / (width - 1) if width > 1 else np.zeros(1)
    ys = np.arange(height, dtype=np.float64) / (height - 1) if height > 1 else np.zeros(1)
    return (
        np.broadcast_to(xs[None, :], (height, width)),
        np.broadcast_to(ys[:, None], (height, width)),
    )


def assemble_input(rgb, mean_mask, dtype=np.float32) -> np.ndarray:
    """Stack ``[R, G, B, x_norm, y_norm, mean_mask]`` into a (6, H, W) tensor."""
    rgb = check_tensor(rgb, channels=3)
    mean_mask = check_field(mean_mask)
    if rgb.shape[1:] != mean_mask.shape:
        raise ValueError(f"rgb {rgb.shape[1:]} and mean mask {mean_mask.shape} differ")
    h, w = mean_mask.shape
    x_norm, y_norm = position_channels(h, w)
    out = np.empty((6, h, w), dtype=dtype)
    out[:3] = rgb
    out[3] = x_norm
    out[4] = y_norm
    out[5] = mean_mask
    return out
