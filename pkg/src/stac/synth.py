"""Deterministic synthetic sequences and textures for tests and demos.

The moving-shapes sequence is the bundled desk-scale stand-in for real
dashcam footage: a textured background with two colored shapes (a circle
and a square, classes 1 and 2) translating across frames.  Shape motion
creates disocclusion trails, so flow-propagated frames degrade gradually
and keyframe triggering shows realistic dynamics.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .flow import SegmentationMap
from .frame import Frame, pad_to_block_multiple


def smooth_texture(h: int, w: int, seed: int = 0, sigma: float = 4.0,
                   lo: int = 0, hi: int = 255) -> np.ndarray:
    rng = np.random.default_rng(seed)
    tex = ndimage.gaussian_filter(rng.normal(size=(h, w)), sigma)
    tex = (tex - tex.min()) / max(tex.max() - tex.min(), 1e-12)
    return (lo + tex * (hi - lo)).astype(np.uint8)


def sharp_texture(h: int, w: int, seed: int = 0, sigma: float = 1.2
                  ) -> np.ndarray:
    rng = np.random.default_rng(seed)
    tex = ndimage.gaussian_filter(rng.normal(size=(h, w)), sigma)
    tex = (tex - tex.min()) / max(tex.max() - tex.min(), 1e-12)
    return (tex * 255).astype(np.uint8)


def pan_sequence(n: int, w: int = 96, h: int = 64, seed: int = 0,
                 step: tuple[float, float] = (1.0, 1.0),
                 sigma: float = 4.0) -> list[Frame]:
    """Frames cropped from one large texture, shifted ``step`` px per frame."""
    margin = int(np.ceil(max(abs(step[0]), abs(step[1])) * n)) + 4
    tex = smooth_texture(h + 2 * margin, w + 2 * margin, seed, sigma)
    frames = []
    for t in range(n):
        x0 = int(round(margin + t * step[0]))
        y0 = int(round(margin + t * step[1]))
        frames.append(Frame.from_gray(tex[y0 : y0 + h, x0 : x0 + w],
                                      frame_id=t + 1))
    return frames


def static_sequence(n: int, w: int = 96, h: int = 64, seed: int = 0
                    ) -> list[Frame]:
    base = smooth_texture(h, w, seed, sigma=2.0)
    return [Frame.from_gray(base, frame_id=t + 1) for t in range(n)]


def _render_shapes(w: int, h: int, circle_c, circle_r, square_c, square_half,
                   bg_rgb: np.ndarray, circle_tex: np.ndarray,
                   square_tex: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    rgb = bg_rgb.astype(np.int16).copy()
    labels = np.zeros((h, w), dtype=np.uint8)
    yy, xx = np.mgrid[0:h, 0:w]

    def paste(mask, color, tex, cx, cy):
        ty = np.clip((yy - int(round(cy))) + tex.shape[0] // 2, 0,
                     tex.shape[0] - 1)
        tx = np.clip((xx - int(round(cx))) + tex.shape[1] // 2, 0,
                     tex.shape[1] - 1)
        # shape-local texture translates with the shape
        mod = (tex[ty, tx].astype(np.int16) - 128) // 3
        for c in range(3):
            rgb[..., c][mask] = color[c] + mod[mask]

    sq = (np.abs(xx - square_c[0]) <= square_half) & (
        np.abs(yy - square_c[1]) <= square_half
    )
    paste(sq, (60, 80, 200), square_tex, square_c[0], square_c[1])
    labels[sq] = 2

    circ = (xx - circle_c[0]) ** 2 + (yy - circle_c[1]) ** 2 <= circle_r**2
    paste(circ, (200, 60, 60), circle_tex, circle_c[0], circle_c[1])
    labels[circ] = 1
    return np.clip(rgb, 0, 255).astype(np.uint8), labels


def moving_shapes_sequence(n: int = 60, w: int = 96, h: int = 64,
                           seed: int = 0
                           ) -> tuple[list[Frame], list[SegmentationMap]]:
    """The bundled n-frame moving-shapes sequence with ground-truth labels."""
    bg = np.stack(
        [
            smooth_texture(h, w, seed + 1, sigma=5.0, lo=70, hi=120),
            smooth_texture(h, w, seed + 2, sigma=5.0, lo=110, hi=160),
            smooth_texture(h, w, seed + 3, sigma=5.0, lo=80, hi=130),
        ],
        axis=-1,
    ).astype(np.uint8)
    # sharp detail so optical flow has texture to lock onto and so
    # propagation errors are visible to the PSNR trigger
    detail = sharp_texture(h, w, seed + 4, sigma=1.0).astype(np.int16)
    bg = np.clip(bg.astype(np.int16) + (detail[..., None] - 128) // 3, 0, 255)
    bg = bg.astype(np.uint8)

    circle_r = max(7, min(w, h) // 5)
    square_half = max(6, min(w, h) // 6)
    circle_tex = sharp_texture(4 * circle_r, 4 * circle_r, seed + 5, sigma=1.0)
    square_tex = sharp_texture(4 * square_half, 4 * square_half, seed + 6,
                               sigma=1.0)
    frames = []
    labels = []
    for t in range(n):
        cx = w * 0.25 + 2.6 * t
        cy = h * 0.35 + 8.0 * np.sin(t / 5.0)
        sx = w * 0.75 - 2.0 * t
        sy = h * 0.65 + 6.0 * np.cos(t / 7.0)
        cx = cx % (w + 2 * circle_r) - circle_r
        sx = sx % (w + 2 * square_half) - square_half
        rgb, lab = _render_shapes(
            w, h, (cx, cy), circle_r, (sx, sy), square_half, bg,
            circle_tex, square_tex,
        )
        frames.append(Frame.from_rgb(rgb, frame_id=t + 1))
        labels.append(
            SegmentationMap(pad_to_block_multiple(lab), frame_id=t + 1)
        )
    return frames, labels
