"""Orthonormal 8x8 block DCT, zigzag scan and scalar quantization.

The transform is the orthonormal 2D type-II DCT, which for 8x8 blocks
coincides with the JPEG FDCT scaling (DC of a level-shifted block equals
8 * mean).  Quantization rounds half away from zero, so the per
coefficient reconstruction error is bounded by q/2.
"""

from __future__ import annotations

import numpy as np

BLOCK = 8
N_COEFFS = BLOCK * BLOCK
LEVEL_SHIFT = 128.0


def _dct_matrix() -> np.ndarray:
    k = np.arange(BLOCK)[:, None].astype(np.float64)
    i = np.arange(BLOCK)[None, :].astype(np.float64)
    m = np.cos((2.0 * i + 1.0) * k * np.pi / (2.0 * BLOCK))
    m[0, :] *= np.sqrt(1.0 / BLOCK)
    m[1:, :] *= np.sqrt(2.0 / BLOCK)
    return m


DCT_MATRIX = _dct_matrix()
DCT_MATRIX.setflags(write=False)


def _zigzag_positions() -> list[tuple[int, int]]:
    pos = []
    r = c = 0
    for _ in range(N_COEFFS):
        pos.append((r, c))
        if (r + c) % 2 == 0:
            if c == BLOCK - 1:
                r += 1
            elif r == 0:
                c += 1
            else:
                r -= 1
                c += 1
        else:
            if r == BLOCK - 1:
                c += 1
            elif c == 0:
                r += 1
            else:
                r += 1
                c -= 1
    return pos


ZIGZAG = _zigzag_positions()
# zigzag index of each raster position
ZIGZAG_INDEX = np.empty((BLOCK, BLOCK), dtype=np.int64)
for _k, (_r, _c) in enumerate(ZIGZAG):
    ZIGZAG_INDEX[_r, _c] = _k
ZIGZAG_INDEX.setflags(write=False)


def zigzag_to_raster(steps64: np.ndarray) -> np.ndarray:
    """Expand a 64-vector in zigzag order to an 8x8 raster array."""
    out = np.empty((BLOCK, BLOCK), dtype=np.asarray(steps64).dtype)
    for k, (r, c) in enumerate(ZIGZAG):
        out[r, c] = steps64[k]
    return out


def raster_to_zigzag(block: np.ndarray) -> np.ndarray:
    return np.asarray(block).reshape(-1)[
        np.array([r * BLOCK + c for r, c in ZIGZAG])
    ]


def dct_block(block: np.ndarray) -> np.ndarray:
    """Forward orthonormal DCT of one 8x8 sample block (level shift -128)."""
    b = np.asarray(block, dtype=np.float64) - LEVEL_SHIFT
    return DCT_MATRIX @ b @ DCT_MATRIX.T


def idct_block(coeffs: np.ndarray) -> np.ndarray:
    """Inverse of :func:`dct_block`, returns float samples near [0, 255]."""
    c = np.asarray(coeffs, dtype=np.float64)
    return DCT_MATRIX.T @ c @ DCT_MATRIX + LEVEL_SHIFT


def plane_to_blocks(plane: np.ndarray) -> np.ndarray:
    """Reshape an (H, W) plane into (H/8, W/8, 8, 8) blocks, no copy of data order."""
    h, w = plane.shape
    return plane.reshape(h // BLOCK, BLOCK, w // BLOCK, BLOCK).swapaxes(1, 2)

def blocks_to_plane(blocks: np.ndarray) -> np.ndarray:
    nby, nbx = blocks.shape[:2]
    return blocks.swapaxes(1, 2).reshape(nby * BLOCK, nbx * BLOCK)


def dct_plane(plane: np.ndarray, level_shift: bool = True) -> np.ndarray:
    """Blockwise forward DCT of a padded plane, output (nby, nbx, 8, 8)."""
    b = plane_to_blocks(np.asarray(plane, dtype=np.float64))
    if level_shift:
        b = b - LEVEL_SHIFT
    return np.einsum("ij,abjk,lk->abil", DCT_MATRIX, b, DCT_MATRIX, optimize=True)


def idct_plane(coeff_blocks: np.ndarray, level_shift: bool = True) -> np.ndarray:
    out = np.einsum(
        "ji,abjk,kl->abil", DCT_MATRIX, coeff_blocks, DCT_MATRIX, optimize=True
    )
    if level_shift:
        out = out + LEVEL_SHIFT
    return blocks_to_plane(out)


def quantize(coeffs: np.ndarray, steps: np.ndarray) -> np.ndarray:
    """round(s/q) with half away from zero; works elementwise on any shape."""
    c = np.asarray(coeffs, dtype=np.float64)
    q = np.asarray(steps, dtype=np.float64)
    return (np.sign(c) * np.floor(np.abs(c) / q + 0.5)).astype(np.int32)


def dequantize(levels: np.ndarray, steps: np.ndarray) -> np.ndarray:
    return np.asarray(levels, dtype=np.float64) * np.asarray(steps, dtype=np.float64)


def quantize_block(coeffs: np.ndarray, table) -> np.ndarray:
    """Quantize one 8x8 coefficient block with a QuantTable."""
    return quantize(coeffs, table.raster())


def dequantize_block(levels: np.ndarray, table) -> np.ndarray:
    return dequantize(levels, table.raster())
