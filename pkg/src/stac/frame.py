"""Planar YUV frames, padding, color conversion and PGM/PPM file I/O.

A frame stores one full-resolution luma plane and two chroma planes (full
resolution for 4:4:4, quarter resolution for 4:2:0).  Planes are padded to
multiples of 8 by edge replication so the block transform never sees a
partial block; the logical width/height are kept separately.

RGB <-> YUV uses BT.601 full-range coefficients:

    Y =  0.299000 R + 0.587000 G + 0.114000 B
    U = -0.168736 R - 0.331264 G + 0.500000 B + 128
    V =  0.500000 R - 0.418688 G - 0.081312 B + 128

    R = Y + 1.402000 (V - 128)
    G = Y - 0.344136 (U - 128) - 0.714136 (V - 128)
    B = Y + 1.772000 (U - 128)
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadMagic, DimensionMismatch

BLOCK = 8

SUBSAMPLING_420 = "420"
SUBSAMPLING_444 = "444"

_RGB_TO_YUV = np.array(
    [
        [0.299000, 0.587000, 0.114000],
        [-0.168736, -0.331264, 0.500000],
        [0.500000, -0.418688, -0.081312],
    ]
)
_YUV_TO_RGB = np.array(
    [
        [1.0, 0.0, 1.402000],
        [1.0, -0.344136, -0.714136],
        [1.0, 1.772000, 0.0],
    ]
)


def pad_to_block_multiple(plane: np.ndarray) -> np.ndarray:
    """Edge-replicate a 2D plane up to the next multiple of 8 in each dim."""
    h, w = plane.shape
    ph = (-h) % BLOCK
    pw = (-w) % BLOCK
    if ph == 0 and pw == 0:
        return plane
    return np.pad(plane, ((0, ph), (0, pw)), mode="edge")


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.uint8)
    a.setflags(write=False)
    return a


def _box_downsample_2x(plane: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    if h % 2 or w % 2:
        plane = np.pad(plane, ((0, h % 2), (0, w % 2)), mode="edge")
        h, w = plane.shape
    p = plane.astype(np.float64)
    out = (p[0::2, 0::2] + p[0::2, 1::2] + p[1::2, 0::2] + p[1::2, 1::2]) / 4.0
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class Frame:
    """An 8-bit planar YUV frame; planes are padded, read-only arrays."""

    width: int
    height: int
    y: np.ndarray
    u: np.ndarray
    v: np.ndarray
    frame_id: int = 0
    subsampling: str = SUBSAMPLING_420

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise DimensionMismatch("frame dims must be positive")
        if self.subsampling not in (SUBSAMPLING_420, SUBSAMPLING_444):
            raise ValueError(f"unknown subsampling {self.subsampling!r}")
        for name in ("y", "u", "v"):
            p = getattr(self, name)
            if p.ndim != 2 or p.shape[0] % BLOCK or p.shape[1] % BLOCK:
                raise DimensionMismatch("planes must be padded to 8x8 multiples")
            if p.dtype != np.uint8 or p.flags.writeable:
                object.__setattr__(self, name, _freeze(p))
        if self.u.shape != self.v.shape:
            raise DimensionMismatch("u/v planes must share dims")

    @property
    def chroma_scale(self) -> int:
        """Luma pixels per chroma sample along each axis (1 or 2)."""
        return 2 if self.subsampling == SUBSAMPLING_420 else 1

    @property
    def planes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (self.y, self.u, self.v)

    def y_logical(self) -> np.ndarray:
        return self.y[: self.height, : self.width]

    @staticmethod
    def from_planes(y, u, v, frame_id=0, subsampling=SUBSAMPLING_420) -> "Frame":
        """Build a frame from unpadded planes (chroma already subsampled)."""
        y = np.asarray(y, dtype=np.uint8)
        h, w = y.shape
        return Frame(
            width=w,
            height=h,
            y=_freeze(pad_to_block_multiple(y)),
            u=_freeze(pad_to_block_multiple(np.asarray(u, dtype=np.uint8))),
            v=_freeze(pad_to_block_multiple(np.asarray(v, dtype=np.uint8))),
            frame_id=frame_id,
            subsampling=subsampling,
        )

    @staticmethod
    def from_gray(gray, frame_id=0, subsampling=SUBSAMPLING_420) -> "Frame":
        gray = np.asarray(gray, dtype=np.uint8)
        h, w = gray.shape
        if subsampling == SUBSAMPLING_420:
            ch, cw = (h + 1) // 2, (w + 1) // 2
        else:
            ch, cw = h, w
        neutral = np.full((ch, cw), 128, dtype=np.uint8)
        return Frame.from_planes(gray, neutral, neutral, frame_id, subsampling)

    @staticmethod
    def from_rgb(rgb, frame_id=0, subsampling=SUBSAMPLING_420) -> "Frame":
        rgb = np.asarray(rgb, dtype=np.float64)
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise DimensionMismatch("rgb must be HxWx3")
        yuv = rgb @ _RGB_TO_YUV.T
        yuv[..., 1:] += 128.0
        yuv = np.clip(np.rint(yuv), 0, 255).astype(np.uint8)
        y, u, v = yuv[..., 0], yuv[..., 1], yuv[..., 2]
        if subsampling == SUBSAMPLING_420:
            u = _box_downsample_2x(u)
            v = _box_downsample_2x(v)
        return Frame.from_planes(y, u, v, frame_id, subsampling)

    def chroma_upsampled(self) -> tuple[np.ndarray, np.ndarray]:
        """Chroma planes at padded-luma resolution (nearest-neighbor)."""
        if self.subsampling == SUBSAMPLING_444:
            return self.u, self.v
        h, w = self.y.shape
        u = np.repeat(np.repeat(self.u, 2, axis=0), 2, axis=1)[:h, :w]
        v = np.repeat(np.repeat(self.v, 2, axis=0), 2, axis=1)[:h, :w]
        return u, v

    def to_rgb(self) -> np.ndarray:
        """Logical-size HxWx3 uint8 RGB image."""
        u, v = self.chroma_upsampled()
        yuv = np.stack(
            [
                self.y[: self.height, : self.width].astype(np.float64),
                u[: self.height, : self.width].astype(np.float64) - 128.0,
                v[: self.height, : self.width].astype(np.float64) - 128.0,
            ],
            axis=-1,
        )
        rgb = yuv @ _YUV_TO_RGB.T
        return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)

    def with_id(self, frame_id: int) -> "Frame":
        return Frame(self.width, self.height, self.y, self.u, self.v,
                     frame_id, self.subsampling)


def _read_pnm_header(data: bytes, magic: bytes):
    if not data.startswith(magic):
        raise BadMagic(f"expected {magic!r} header")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError("only maxval 255 PNM files are supported")
    return w, h, pos


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    w, h, pos = _read_pnm_header(data, b"P5")
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos)
    return pixels.reshape(h, w).copy()


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    w, h, pos = _read_pnm_header(data, b"P6")
    pixels = np.frombuffer(data, dtype=np.uint8, count=3 * w * h, offset=pos)
    return pixels.reshape(h, w, 3).copy()


def write_pgm(path, gray: np.ndarray) -> None:
    gray = np.asarray(gray, dtype=np.uint8)
    h, w = gray.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(gray.tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(rgb.tobytes())


def read_frame(path, frame_id=0, subsampling=SUBSAMPLING_420) -> Frame:
    """Load a P5 (gray) or P6 (RGB) file as a frame."""
    head = Path(path).read_bytes()[:2]
    if head == b"P5":
        return Frame.from_gray(read_pgm(path), frame_id, subsampling)
    if head == b"P6":
        return Frame.from_rgb(read_ppm(path), frame_id, subsampling)
    raise BadMagic(f"{path}: not a binary PGM/PPM file")
