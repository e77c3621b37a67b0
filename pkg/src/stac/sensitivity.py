"""Gradient maps of a segmentation loss and their frequency-domain form.

Pixel gradients come from a pluggable oracle (any model exposing scores,
predictions and an exact loss gradient).  Because a block's samples are a
linear orthonormal function of its DCT coefficients, the chain rule makes
the per-coefficient gradient simply the blockwise DCT of the per-pixel
gradient, with no level shift.

The "fake gradient" treats the oracle's own prediction on a compressed
frame as the label: the loss is evaluated at that self-label, which tracks
the actual loss growth under increasing compression better than the raw
frame's gradient does.

SGRD gradient-map file layout (little-endian):

    magic      "SGRD"
    version    u16
    frame_id   u32
    loss_norm  u8      0 = loss summed over pixels (the convention here)
    planes     u8      always 3
    dims       (u32 w, u32 h) per plane
    data       float32 row-major per plane, order Y, U, V
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from .dct import BLOCK, DCT_MATRIX, raster_to_zigzag
from .errors import (
    BadMagic,
    DimensionMismatch,
    EmptyCorpus,
    OracleFailure,
    TruncatedStream,
)
from .flow import SegmentationMap
from .frame import Frame

SGRD_MAGIC = b"SGRD"
SGRD_VERSION = 1
LOSS_NORM_SUM = 0

SFRQ_MAGIC = b"SFRQ"
SFRQ_VERSION = 1


def _frozen_f32(a) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float32)
    a.setflags(write=False)
    return a


class _GradientPlanes:
    """Shared validation for the pixel/coefficient gradient containers."""

    def __post_init__(self):
        for name in ("y", "u", "v"):
            p = np.asarray(getattr(self, name))
            if p.ndim != 2 or p.shape[0] % BLOCK or p.shape[1] % BLOCK:
                raise DimensionMismatch("gradient planes must be 8x8 padded")
            if not np.isfinite(p).all():
                raise ValueError("gradient planes must be finite")
            object.__setattr__(self, name, _frozen_f32(p))
        if self.u.shape != self.v.shape:
            raise DimensionMismatch("u/v gradient planes must share dims")
        if self.chroma_scale not in (1, 2):
            raise ValueError("chroma_scale must be 1 or 2")

    @property
    def planes(self):
        return (self.y, self.u, self.v)


@dataclass(frozen=True)
class PixelGradientMap(_GradientPlanes):
    """Signed loss gradients per sample, one grid per plane."""

    y: np.ndarray
    u: np.ndarray
    v: np.ndarray
    frame_id: int = 0
    chroma_scale: int = 2


@dataclass(frozen=True)
class CoeffGradientMap(_GradientPlanes):
    """Signed loss gradients per DCT coefficient, blockwise layout."""

    y: np.ndarray
    u: np.ndarray
    v: np.ndarray
    frame_id: int = 0
    chroma_scale: int = 2


@dataclass(frozen=True)
class FrequencyGradients:
    """Mean |gradient| per DCT frequency (zigzag order), per plane class."""

    luma: np.ndarray
    chroma: np.ndarray

    def __post_init__(self):
        for name in ("luma", "chroma"):
            g = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if g.shape != (64,):
                raise ValueError("frequency gradients are 64-vectors")
            if (g < 0).any():
                raise ValueError("frequency averages must be nonnegative")
            g.setflags(write=False)
            object.__setattr__(self, name, g)

    def serialize(self) -> bytes:
        out = bytearray()
        out += SFRQ_MAGIC
        out += struct.pack("<HBB", SFRQ_VERSION, 2, 0)
        out += self.luma.astype("<f8").tobytes()
        out += self.chroma.astype("<f8").tobytes()
        return bytes(out)

    @staticmethod
    def deserialize(data: bytes) -> "FrequencyGradients":
        if len(data) < 8 + 2 * 64 * 8:
            raise TruncatedStream("frequency-gradient file truncated")
        if data[:4] != SFRQ_MAGIC:
            raise BadMagic("not an SFRQ file")
        luma = np.frombuffer(data, dtype="<f8", count=64, offset=8)
        chroma = np.frombuffer(data, dtype="<f8", count=64, offset=8 + 64 * 8)
        return FrequencyGradients(luma.copy(), chroma.copy())

    def save(self, path) -> None:
        Path(path).write_bytes(self.serialize())

    @staticmethod
    def load(path) -> "FrequencyGradients":
        return FrequencyGradients.deserialize(Path(path).read_bytes())


class SensitivityOracle(Protocol):
    """Model contract: scores, prediction and an exact loss gradient."""

    class_count: int

    def predict(self, frame: Frame) -> tuple[np.ndarray, SegmentationMap]:
        """Class-score volume (K, H, W) and the argmax label map."""
        ...

    def loss_and_gradient(self, frame: Frame, labels: SegmentationMap
                          ) -> tuple[float, PixelGradientMap]:
        """Loss at the given labels and its gradient w.r.t. every sample."""
        ...


def _blockwise_dct(plane: np.ndarray, inverse: bool = False) -> np.ndarray:
    h, w = plane.shape
    b = plane.astype(np.float64).reshape(
        h // BLOCK, BLOCK, w // BLOCK, BLOCK
    ).swapaxes(1, 2)
    m = DCT_MATRIX.T if inverse else DCT_MATRIX
    out = np.einsum("ij,abjk,lk->abil", m, b, m, optimize=True)
    return out.swapaxes(1, 2).reshape(h, w)


def pixel_to_coeff_gradients(gx: PixelGradientMap) -> CoeffGradientMap:
    """Exact chain rule through the orthonormal block DCT (no level shift)."""
    return CoeffGradientMap(
        y=_blockwise_dct(gx.y),
        u=_blockwise_dct(gx.u),
        v=_blockwise_dct(gx.v),
        frame_id=gx.frame_id,
        chroma_scale=gx.chroma_scale,
    )


def coeff_to_pixel_gradients(gs: CoeffGradientMap) -> PixelGradientMap:
    """Inverse of pixel_to_coeff_gradients."""
    return PixelGradientMap(
        y=_blockwise_dct(gs.y, inverse=True),
        u=_blockwise_dct(gs.u, inverse=True),
        v=_blockwise_dct(gs.v, inverse=True),
        frame_id=gs.frame_id,
        chroma_scale=gs.chroma_scale,
    )


def fake_gradient(compressed: Frame, oracle: SensitivityOracle
                  ) -> tuple[PixelGradientMap, SegmentationMap]:
    """Gradient of the loss at the oracle's own prediction on the frame."""
    try:
        _, labels = oracle.predict(compressed)
        _, grad = oracle.loss_and_gradient(compressed, labels)
    except Exception as exc:
        if isinstance(exc, OracleFailure):
            raise
        raise OracleFailure(f"oracle failed: {exc}") from exc
    return grad, labels


def average_frequency_gradients(maps) -> FrequencyGradients:
    """Mean |g| per frequency over all blocks of all maps, per plane class."""
    maps = list(maps)
    if not maps:
        raise EmptyCorpus("no gradient maps to average")
    first = maps[0]
    sums = {"luma": np.zeros(64), "chroma": np.zeros(64)}
    counts = {"luma": 0, "chroma": 0}
    for gm in maps:
        if gm.y.shape != first.y.shape or gm.u.shape != first.u.shape:
            raise DimensionMismatch("corpus maps must share dims")
        for plane, cls in ((gm.y, "luma"), (gm.u, "chroma"), (gm.v, "chroma")):
            h, w = plane.shape
            blocks = np.abs(
                plane.astype(np.float64)
                .reshape(h // BLOCK, BLOCK, w // BLOCK, BLOCK)
                .swapaxes(1, 2)
                .reshape(-1, BLOCK, BLOCK)
            )
            flat = blocks.reshape(-1, 64).sum(axis=0)
            sums[cls] += raster_to_zigzag(flat.reshape(BLOCK, BLOCK))
            counts[cls] += blocks.shape[0]
    return FrequencyGradients(
        luma=sums["luma"] / max(counts["luma"], 1),
        chroma=sums["chroma"] / max(counts["chroma"], 1),
    )


def write_gradient_map(path, gm: PixelGradientMap,
                       loss_norm: int = LOSS_NORM_SUM) -> None:
    with open(path, "wb") as f:
        f.write(SGRD_MAGIC)
        f.write(struct.pack("<HIBB", SGRD_VERSION, gm.frame_id, loss_norm, 3))
        for plane in gm.planes:
            h, w = plane.shape
            f.write(struct.pack("<II", w, h))
        for plane in gm.planes:
            f.write(plane.astype("<f4").tobytes())


def read_gradient_map(path) -> PixelGradientMap:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise TruncatedStream("gradient-map file shorter than header")
    if data[:4] != SGRD_MAGIC:
        raise BadMagic("not an SGRD file")
    version, frame_id, _loss_norm, n_planes = struct.unpack_from("<HIBB", data, 4)
    if version != SGRD_VERSION or n_planes != 3:
        raise BadMagic("unsupported SGRD layout")
    pos = 12
    dims = []
    for _ in range(3):
        w, h = struct.unpack_from("<II", data, pos)
        dims.append((h, w))
        pos += 8
    planes = []
    for h, w in dims:
        n = h * w
        if len(data) < pos + 4 * n:
            raise TruncatedStream("gradient-map data truncated")
        planes.append(
            np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(h, w).copy()
        )
        pos += 4 * n
    scale = 2 if dims[1][0] < dims[0][0] else 1
    return PixelGradientMap(planes[0], planes[1], planes[2],
                            frame_id=frame_id, chroma_scale=scale)
