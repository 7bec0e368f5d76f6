"""Offline stand-in for MNIST: stroke-rendered digits with seeded jitter.

Each digit has a few fixed polyline styles in a unit box.  Per sample the
strokes are trimmed at the ends, warped (rotation, scale, shear, a smooth
wobble), sometimes joined by a stray stroke, rendered with a random pen
width, shifted by up to two pixels, and covered in Gaussian pixel noise
(sigma 0.05).  Pixel values are quantized to k/255 so the
result round-trips through IDX files exactly.
"""
from __future__ import annotations

import numpy as np

from .idx import one_hot_states
from .labels import DIGITS, SourceDataset
from ..autodiff import ContractError

SIZE = 28
BOX = 20.0  # glyph box in pixels, centered like MNIST
MAX_SHIFT = 2
NOISE_SIGMA = 0.05


def _arc(cx, cy, rx, ry, a0, a1, steps=18):
    t = np.radians(np.linspace(a0, a1, steps))
    return np.stack([cx + rx * np.cos(t), cy + ry * np.sin(t)], axis=1)


def _line(*pts):
    return np.asarray(pts, dtype=np.float64)


# x grows rightwards, y grows downwards, angles measured clockwise from +x.
# Each digit has a few handwriting styles; a sample picks one at random.
GLYPHS: dict[int, list[list[np.ndarray]]] = {
    0: [[_arc(0.5, 0.5, 0.28, 0.42, 0, 360, 28)],
        [_arc(0.5, 0.5, 0.3, 0.4, -70, 310, 28)],
        [_arc(0.52, 0.5, 0.22, 0.43, 0, 360, 28)]],
    1: [[_line((0.54, 0.08), (0.54, 0.92))],
        [_line((0.36, 0.24), (0.54, 0.08), (0.54, 0.92))],
        [_line((0.36, 0.24), (0.54, 0.08), (0.54, 0.92)), _line((0.36, 0.92), (0.72, 0.92))]],
    2: [[np.vstack([_arc(0.5, 0.32, 0.25, 0.22, 195, 380),
                    _line((0.66, 0.52), (0.24, 0.9), (0.8, 0.9))])],
        [np.vstack([_arc(0.48, 0.3, 0.24, 0.2, 190, 390),
                    _line((0.68, 0.5), (0.3, 0.84)), _arc(0.3, 0.8, 0.08, 0.08, 270, 30, 8),
                    _line((0.37, 0.84), (0.82, 0.88))])]],
    3: [[_arc(0.47, 0.29, 0.23, 0.2, 210, 450), _arc(0.47, 0.7, 0.27, 0.21, 270, 510)],
        [_line((0.25, 0.1), (0.72, 0.1), (0.45, 0.42)), _arc(0.47, 0.68, 0.27, 0.24, 270, 510)]],
    4: [[_line((0.6, 0.08), (0.2, 0.64), (0.84, 0.64)), _line((0.63, 0.3), (0.63, 0.92))],
        [_line((0.28, 0.08), (0.24, 0.56), (0.8, 0.56)), _line((0.66, 0.1), (0.64, 0.92))]],
    5: [[_line((0.76, 0.1), (0.34, 0.1), (0.3, 0.46)),
         _arc(0.5, 0.67, 0.26, 0.23, 230, 510)],
        [_line((0.3, 0.1), (0.3, 0.46)), _line((0.3, 0.1), (0.76, 0.12)),
         _arc(0.48, 0.68, 0.26, 0.22, 240, 500)]],
    6: [[np.vstack([_line((0.7, 0.08), (0.46, 0.3)), _arc(0.52, 0.66, 0.24, 0.25, 200, 565)])],
        [np.vstack([_arc(0.62, 0.58, 0.36, 0.5, 240, 180, 10), _arc(0.5, 0.72, 0.22, 0.2, 180, 540)])]],
    7: [[_line((0.2, 0.1), (0.8, 0.1), (0.42, 0.92))],
        [_line((0.2, 0.1), (0.8, 0.1), (0.42, 0.92)), _line((0.38, 0.52), (0.74, 0.52))]],
    8: [[_arc(0.5, 0.28, 0.19, 0.2, 0, 360, 24), _arc(0.5, 0.7, 0.24, 0.22, 0, 360, 24)],
        [_arc(0.5, 0.3, 0.22, 0.21, 0, 360, 24), _arc(0.48, 0.71, 0.21, 0.2, 0, 360, 24)]],
    9: [[_arc(0.5, 0.33, 0.23, 0.23, 0, 360, 24), _line((0.72, 0.35), (0.6, 0.92))],
        [_arc(0.48, 0.32, 0.22, 0.21, 0, 360, 24), _arc(0.3, 0.36, 0.42, 0.56, 0, 80, 10)]],
}

_YY, _XX = np.mgrid[0:SIZE, 0:SIZE]
_PIXELS = np.stack([_XX.ravel() + 0.5, _YY.ravel() + 0.5], axis=1)


def _segments(polys: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    starts = np.concatenate([p[:-1] for p in polys])
    ends = np.concatenate([p[1:] for p in polys])
    return starts, ends


def _distance(starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
    d = ends - starts
    rel = _PIXELS[:, None, :] - starts[None, :, :]
    length2 = np.maximum(np.sum(d * d, axis=1), 1e-12)
    t = np.clip(np.sum(rel * d[None], axis=2) / length2, 0.0, 1.0)
    near = rel - t[..., None] * d[None]
    return np.sqrt(np.min(np.sum(near * near, axis=2), axis=1))


def _truncate(poly: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Keep the arclength fraction [lo, hi] of a polyline."""
    seg = np.linalg.norm(np.diff(poly, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)]) / max(seg.sum(), 1e-12)
    grid = np.linspace(lo, hi, max(2, int(np.ceil(len(poly) * (hi - lo))) + 1))
    return np.stack([np.interp(grid, cum, poly[:, 0]), np.interp(grid, cum, poly[:, 1])], axis=1)


def render_digit(digit: int, rng: np.random.Generator) -> np.ndarray:
    styles = GLYPHS[digit]
    strokes = styles[int(rng.integers(len(styles)))]
    theta = np.radians(rng.uniform(-20.0, 20.0))
    sx = rng.uniform(0.72, 1.08)
    sy = sx * rng.uniform(0.82, 1.18)
    shear = rng.uniform(-0.4, 0.4)
    wobble_amp = rng.uniform(0.0, 0.05, size=2)
    wobble_freq = rng.uniform(0.8, 2.0, size=2)
    wobble_phase = rng.uniform(0.0, 2 * np.pi, size=2)
    half_width = rng.uniform(0.7, 2.0)
    ink = rng.uniform(0.6, 1.0)

    c, s = np.cos(theta), np.sin(theta)
    transform = np.array([[c, -s], [s, c]]) @ np.array([[sx, shear], [0.0, sy]])
    polys = []
    for poly in strokes:
        poly = _truncate(poly, rng.uniform(0.0, 0.1), rng.uniform(0.88, 1.0))
        p = poly - 0.5
        p = p + wobble_amp * np.sin(2 * np.pi * wobble_freq * p[:, ::-1] + wobble_phase)
        p = p @ transform.T
        polys.append(p * BOX + SIZE / 2.0)
    if rng.random() < 0.3:
        # stray pen stroke somewhere in the frame
        a = rng.uniform(3.0, SIZE - 3.0, size=2)
        polys.append(np.stack([a, a + rng.normal(0.0, 4.0, size=2)]))
    dist = _distance(*_segments(polys))
    img = np.clip(half_width + 0.5 - dist, 0.0, 1.0) * ink
    img = img.reshape(SIZE, SIZE)

    dy, dx = rng.integers(-MAX_SHIFT, MAX_SHIFT + 1, size=2)
    img = shift_image(img, int(dy), int(dx))
    img = img + rng.normal(0.0, NOISE_SIGMA, size=img.shape)
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def shift_image(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Integer translation with zero fill."""
    out = np.zeros_like(img)
    h, w = img.shape
    if abs(dy) >= h or abs(dx) >= w:
        return out
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = img[ys, xs]
    return out


def synthesize_digits(count_per_class: int, seed: int, name: str = "synthetic",
                      stream: int = 0) -> SourceDataset:
    """``10 * count_per_class`` digits, classes interleaved (0, 1, ..., 9, 0, ...)."""
    if count_per_class < 1:
        raise ContractError(f"count_per_class must be >= 1, got {count_per_class}")
    return synthesize_subset(np.arange(10 * count_per_class), seed, name, stream)


def synthesize_subset(indices, seed: int, name: str = "synthetic",
                      stream: int = 0) -> SourceDataset:
    """Samples ``indices`` of the (unbounded) synthetic sequence for ``seed``.

    Sample ``i`` depicts digit ``i % 10`` and is drawn from its own random
    stream, so any subset matches the corresponding rows of a full
    generation.  ``stream`` separates independent splits (train/valid/test).
    """
    indices = np.asarray(indices, dtype=np.int64).reshape(-1)
    digits = indices % 10
    images = np.empty((indices.size, SIZE, SIZE))
    for row, i in enumerate(indices):
        rng = np.random.default_rng([seed, stream, int(i)])
        images[row] = render_digit(int(digits[row]), rng)
    return SourceDataset(name, DIGITS, images, one_hot_states(digits))
