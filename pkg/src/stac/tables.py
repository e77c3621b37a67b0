"""Quantization tables, table-set ladders, region grids and the STBL file.

A table set holds L luma tables and L chroma tables ordered by increasing
loss budget.  Table sets are distributed out of band as "STBL" files; the
truncated SHA-256 of the serialized file is the digest that bitstream
headers and session handshakes use to check that both peers quantize with
the same tables.

STBL layout (little-endian):

    magic   "STBL"
    version u16
    L       u8          number of levels, 1..16
    flags   u8          bit0: chroma ladder shared with luma
    B[L]    f64 * L     loss-budget ladder, ascending
    luma    L * 64 u8   steps in zigzag order
    chroma  L * 64 u8
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dct import BLOCK, zigzag_to_raster
from .errors import BadMagic, TruncatedStream

STBL_MAGIC = b"STBL"
STBL_VERSION = 1
MAX_LEVELS = 16  # strategy maps are packed 4 bits per region
DIGEST_BYTES = 8

PLANE_LUMA = "luma"
PLANE_CHROMA = "chroma"


@dataclass(frozen=True)
class QuantTable:
    """64 integer quantization steps in zigzag order, each in [1, 255]."""

    steps: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.steps, dtype=np.int64)
        if s.shape != (64,):
            raise ValueError("a quantization table has exactly 64 steps")
        if s.min() < 1 or s.max() > 255:
            raise ValueError("quantization steps must lie in [1, 255]")
        s = s.astype(np.uint8)
        s.setflags(write=False)
        object.__setattr__(self, "steps", s)

    def raster(self) -> np.ndarray:
        """Steps as an 8x8 raster array (float64, for vectorized math)."""
        return zigzag_to_raster(self.steps.astype(np.float64))

    @staticmethod
    def uniform(step: int) -> "QuantTable":
        return QuantTable(np.full(64, step, dtype=np.int64))


@dataclass(frozen=True)
class QuantTableSet:
    """L-level luma and chroma ladders, monotone in the loss budget."""

    luma: tuple
    chroma: tuple
    b_levels: tuple = ()

    def __post_init__(self):
        if not 1 <= len(self.luma) <= MAX_LEVELS:
            raise ValueError(f"level count must be in [1, {MAX_LEVELS}]")
        if len(self.luma) != len(self.chroma):
            raise ValueError("luma/chroma ladders must have equal length")
        if self.b_levels and len(self.b_levels) != len(self.luma):
            raise ValueError("ladder must have one budget per level")
        for ladder in (self.luma, self.chroma):
            for lo, hi in zip(ladder, ladder[1:]):
                if np.any(hi.steps.astype(int) < lo.steps.astype(int)):
                    raise ValueError("ladder steps must be monotone in level")

    @property
    def level_count(self) -> int:
        return len(self.luma)

    def table_for(self, level: int, plane_class: str) -> QuantTable:
        """1-based level lookup."""
        if not 1 <= level <= self.level_count:
            raise ValueError(f"level {level} outside [1, {self.level_count}]")
        ladder = self.luma if plane_class == PLANE_LUMA else self.chroma
        return ladder[level - 1]

    def serialize(self) -> bytes:
        shared = all(
            np.array_equal(a.steps, b.steps) for a, b in zip(self.luma, self.chroma)
        )
        out = bytearray()
        out += STBL_MAGIC
        out += struct.pack("<HBB", STBL_VERSION, self.level_count, 1 if shared else 0)
        b_levels = self.b_levels or tuple(0.0 for _ in self.luma)
        out += struct.pack(f"<{self.level_count}d", *b_levels)
        for ladder in (self.luma, self.chroma):
            for t in ladder:
                out += t.steps.tobytes()
        return bytes(out)

    def digest(self) -> bytes:
        """Truncated SHA-256 over the serialized table set."""
        return hashlib.sha256(self.serialize()).digest()[:DIGEST_BYTES]

    @staticmethod
    def deserialize(data: bytes) -> "QuantTableSet":
        if len(data) < 8:
            raise TruncatedStream("table-set file shorter than header")
        if data[:4] != STBL_MAGIC:
            raise BadMagic("not an STBL file")
        version, level_count, _flags = struct.unpack_from("<HBB", data, 4)
        if version != STBL_VERSION:
            raise BadMagic(f"unsupported STBL version {version}")
        pos = 8
        need = level_count * 8 + 2 * level_count * 64
        if len(data) < pos + need:
            raise TruncatedStream("table-set file truncated")
        b_levels = struct.unpack_from(f"<{level_count}d", data, pos)
        pos += level_count * 8
        ladders = []
        for _ in range(2):
            tables = []
            for _ in range(level_count):
                steps = np.frombuffer(data, dtype=np.uint8, count=64, offset=pos)
                tables.append(QuantTable(steps.astype(np.int64)))
                pos += 64
            ladders.append(tuple(tables))
        b = b_levels if any(b_levels) else ()
        return QuantTableSet(luma=ladders[0], chroma=ladders[1], b_levels=tuple(b))

    def save(self, path) -> None:
        Path(path).write_bytes(self.serialize())

    @staticmethod
    def load(path) -> "QuantTableSet":
        return QuantTableSet.deserialize(Path(path).read_bytes())

    @staticmethod
    def single(table: QuantTable, chroma: QuantTable | None = None,
               b: float = 0.0) -> "QuantTableSet":
        """One-level set, the uniform single-table (GRACE-style) baseline."""
        return QuantTableSet(
            luma=(table,),
            chroma=(chroma or table,),
            b_levels=(b,) if b else (),
        )


@dataclass(frozen=True)
class RegionGrid:
    """Partition of the block grid into regions of region_w x region_h blocks.

    Regions tile the padded luma block grid; trailing regions at the right
    and bottom edges may contain fewer blocks.  Chroma blocks of subsampled
    planes are assigned to the region of their co-located (top-left) luma
    block.
    """

    region_w: int = 3
    region_h: int = 3

    def __post_init__(self):
        if self.region_w < 1 or self.region_h < 1:
            raise ValueError("region dims must be >= 1")

    def regions_shape(self, plane_shape: tuple[int, int]) -> tuple[int, int]:
        """(regions_y, regions_x) for a padded luma plane shape."""
        h, w = plane_shape
        nby, nbx = h // BLOCK, w // BLOCK
        return (-(-nby // self.region_h), -(-nbx // self.region_w))

    def r_max(self, plane_shape: tuple[int, int]) -> int:
        ry, rx = self.regions_shape(plane_shape)
        return ry * rx

    def block_region_ids(self, plane_shape: tuple[int, int],
                         chroma_scale: int = 1) -> np.ndarray:
        """Row-major region id of every block of a plane.

        ``chroma_scale`` > 1 maps subsampled-plane blocks through their
        co-located luma block; the region shape is always derived from the
        luma plane, which must be ``chroma_scale`` times larger.
        """
        h, w = plane_shape
        nby, nbx = h // BLOCK, w // BLOCK
        luma_shape = (h * chroma_scale, w * chroma_scale)
        ry, rx = self.regions_shape(luma_shape)
        by = np.arange(nby) * chroma_scale
        bx = np.arange(nbx) * chroma_scale
        # clip: padded chroma may extend past the luma block grid
        reg_y = np.minimum(by // self.region_h, ry - 1)
        reg_x = np.minimum(bx // self.region_w, rx - 1)
        return (reg_y[:, None] * rx + reg_x[None, :]).astype(np.int64)

    def region_center(self, region_id: int, plane_shape: tuple[int, int]
                      ) -> tuple[float, float]:
        """(x, y) pixel center of a region on the padded luma plane."""
        h, w = plane_shape
        ry, rx = self.regions_shape(plane_shape)
        i, j = divmod(region_id, rx)
        x0 = j * self.region_w * BLOCK
        y0 = i * self.region_h * BLOCK
        x1 = min(x0 + self.region_w * BLOCK, w)
        y1 = min(y0 + self.region_h * BLOCK, h)
        return ((x0 + x1 - 1) / 2.0, (y0 + y1 - 1) / 2.0)

    def region_of_point(self, x: float, y: float, plane_shape: tuple[int, int]
                        ) -> int:
        h, w = plane_shape
        ry, rx = self.regions_shape(plane_shape)
        j = min(int(x) // (self.region_w * BLOCK), rx - 1)
        i = min(int(y) // (self.region_h * BLOCK), ry - 1)
        return i * rx + j
