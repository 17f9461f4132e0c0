"""Seeded synthetic portrait-like masks and images for desk-scale training."""

from __future__ import annotations

import numpy as np

from .net import Sample

LONG_HAIR, SHORT_HAIR = 0, 1


def _ellipse(rows, cols, cy, cx, ry, rx):
    return ((rows - cy) / ry) ** 2 + ((cols - cx) / rx) ** 2 <= 1.0


def portrait_mask(size: int, rng: np.random.Generator, long_hair: bool) -> np.ndarray:
    """Head, neck and shoulders touching the bottom edge; long hair widens the head."""
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    cx = size * (0.5 + rng.uniform(-0.08, 0.08))
    head_y = size * rng.uniform(0.30, 0.38)
    head_ry = size * rng.uniform(0.15, 0.19)
    head_rx = head_ry * rng.uniform(0.72, 0.85)
    mask = _ellipse(rows, cols, head_y, cx, head_ry, head_rx)
    neck_w = head_rx * 0.5
    mask |= (np.abs(cols - cx) <= neck_w) & (rows >= head_y) & (rows <= head_y + head_ry * 1.6)
    shoulder_y = size * rng.uniform(1.00, 1.08)
    mask |= _ellipse(rows, cols, shoulder_y, cx, size * rng.uniform(0.33, 0.40),
                     size * rng.uniform(0.38, 0.46))
    if long_hair:
        hair_ry = head_ry * rng.uniform(1.45, 1.7)
        mask |= _ellipse(rows, cols, head_y + 0.45 * hair_ry, cx, hair_ry, head_rx * 1.25)
    return mask


def portrait_image(mask: np.ndarray, rng: np.random.Generator, palette=None,
                   noise: float = 0.08) -> np.ndarray:
    """(3, H, W) image in [0, 1]: shaded background, flat foreground, pixel noise.

    ``palette`` (fg colour, bg colour, gradient) can be fixed so that only the
    noise realisation changes between calls.
    """
    h, w = mask.shape
    fg_color, bg_color, grad = palette if palette is not None else random_palette(rng)
    ys = np.linspace(-0.5, 0.5, h)[:, None]
    xs = np.linspace(-0.5, 0.5, w)[None, :]
    bg = bg_color[:, None, None] + grad[:, None, None] * (ys + xs)[None]
    img = np.where(mask[None], fg_color[:, None, None], bg)
    img = img + rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def random_palette(rng: np.random.Generator):
    """Warm-ish foreground, cool-ish background; brightness varies per image."""
    level = rng.uniform(0.35, 0.65)
    fg = np.clip(level + np.array([0.15, 0.0, -0.15]) + rng.normal(0, 0.04, 3), 0, 1)
    bg = np.clip(level + np.array([-0.15, 0.0, 0.15]) + rng.normal(0, 0.04, 3), 0, 1)
    grad = rng.uniform(-0.15, 0.15, size=3)
    return fg, bg, grad


def portrait_suite(count: int = 8, size: int = 64, seed: int = 0):
    """Frozen training suite plus the palettes needed to redraw held-out noise."""
    rng = np.random.default_rng(seed)
    samples, palettes = [], []
    for i in range(count):
        long_hair = i % 2 == 0
        mask = portrait_mask(size, rng, long_hair)
        palette = random_palette(rng)
        image = portrait_image(mask, rng, palette)
        samples.append(Sample(image, mask, LONG_HAIR if long_hair else SHORT_HAIR))
        palettes.append(palette)
    return samples, palettes


def held_out(samples, palettes, seed: int):
    """Same masks and colours, fresh noise."""
    rng = np.random.default_rng(seed)
    return [Sample(portrait_image(s.mask, rng, pal), s.mask, s.attr)
            for s, pal in zip(samples, palettes)]
