"""Block-DCT intra codec with per-region quantization table selection.

Encoding quantizes every 8x8 block with the ladder level its region
selected (luma ladder for Y, chroma ladder for U/V) and entropy-codes the
coefficients with zigzag scan, run-length coding and the canonical Huffman
tables from the JPEG baseline defaults.  The container is custom ("STAC"
magic) because a strategy map can reference up to 16 tables per frame;
the selected levels travel in the header, packed 4 bits per region.

Container layout (little-endian):

    magic        "STAC"
    version      u16
    frame_id     u32
    width        u32     logical pixels
    height       u32
    subsampling  u8      0 = 4:4:4, 1 = 4:2:0
    level_count  u8
    region_w     u8      blocks per region, horizontal
    region_h     u8
    digest       8 bytes truncated SHA-256 of the table-set file
    strategy     ceil(r_max / 2) bytes, 4 bits per region, row-major
    payload_len  u32
    payload      entropy-coded blocks, plane order Y, U, V
"""

from __future__ import annotations

import struct

import numpy as np

from .dct import (
    BLOCK,
    ZIGZAG_INDEX,
    dct_plane,
    idct_plane,
    plane_to_blocks,
    quantize,
)
from .errors import (
    BadMagic,
    DigestMismatch,
    DimensionMismatch,
    TruncatedStream,
    UnknownLevel,
)
from .frame import SUBSAMPLING_420, SUBSAMPLING_444, Frame
from .strategy import StrategyMap
from .tables import PLANE_CHROMA, PLANE_LUMA, QuantTableSet, RegionGrid

MAGIC = b"STAC"
VERSION = 1
_HEADER = struct.Struct("<4sHIIIBBBB8s")

# JPEG baseline default Huffman specs: (bits per code length 1..16, values)
_DC_LUMA_SPEC = (
    (0, 1, 5, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0),
    tuple(range(12)),
)
_DC_CHROMA_SPEC = (
    (0, 3, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0),
    tuple(range(12)),
)
_AC_LUMA_SPEC = (
    (0, 2, 1, 3, 3, 2, 4, 3, 5, 5, 4, 4, 0, 0, 1, 0x7D),
    (
        0x01, 0x02, 0x03, 0x00, 0x04, 0x11, 0x05, 0x12, 0x21, 0x31, 0x41,
        0x06, 0x13, 0x51, 0x61, 0x07, 0x22, 0x71, 0x14, 0x32, 0x81, 0x91,
        0xA1, 0x08, 0x23, 0x42, 0xB1, 0xC1, 0x15, 0x52, 0xD1, 0xF0, 0x24,
        0x33, 0x62, 0x72, 0x82, 0x09, 0x0A, 0x16, 0x17, 0x18, 0x19, 0x1A,
        0x25, 0x26, 0x27, 0x28, 0x29, 0x2A, 0x34, 0x35, 0x36, 0x37, 0x38,
        0x39, 0x3A, 0x43, 0x44, 0x45, 0x46, 0x47, 0x48, 0x49, 0x4A, 0x53,
        0x54, 0x55, 0x56, 0x57, 0x58, 0x59, 0x5A, 0x63, 0x64, 0x65, 0x66,
        0x67, 0x68, 0x69, 0x6A, 0x73, 0x74, 0x75, 0x76, 0x77, 0x78, 0x79,
        0x7A, 0x83, 0x84, 0x85, 0x86, 0x87, 0x88, 0x89, 0x8A, 0x92, 0x93,
        0x94, 0x95, 0x96, 0x97, 0x98, 0x99, 0x9A, 0xA2, 0xA3, 0xA4, 0xA5,
        0xA6, 0xA7, 0xA8, 0xA9, 0xAA, 0xB2, 0xB3, 0xB4, 0xB5, 0xB6, 0xB7,
        0xB8, 0xB9, 0xBA, 0xC2, 0xC3, 0xC4, 0xC5, 0xC6, 0xC7, 0xC8, 0xC9,
        0xCA, 0xD2, 0xD3, 0xD4, 0xD5, 0xD6, 0xD7, 0xD8, 0xD9, 0xDA, 0xE1,
        0xE2, 0xE3, 0xE4, 0xE5, 0xE6, 0xE7, 0xE8, 0xE9, 0xEA, 0xF1, 0xF2,
        0xF3, 0xF4, 0xF5, 0xF6, 0xF7, 0xF8, 0xF9, 0xFA,
    ),
)
_AC_CHROMA_SPEC = (
    (0, 2, 1, 2, 4, 4, 3, 4, 7, 5, 4, 4, 0, 1, 2, 0x77),
    (
        0x00, 0x01, 0x02, 0x03, 0x11, 0x04, 0x05, 0x21, 0x31, 0x06, 0x12,
        0x41, 0x51, 0x07, 0x61, 0x71, 0x13, 0x22, 0x32, 0x81, 0x08, 0x14,
        0x42, 0x91, 0xA1, 0xB1, 0xC1, 0x09, 0x23, 0x33, 0x52, 0xF0, 0x15,
        0x62, 0x72, 0xD1, 0x0A, 0x16, 0x24, 0x34, 0xE1, 0x25, 0xF1, 0x17,
        0x18, 0x19, 0x1A, 0x26, 0x27, 0x28, 0x29, 0x2A, 0x35, 0x36, 0x37,
        0x38, 0x39, 0x3A, 0x43, 0x44, 0x45, 0x46, 0x47, 0x48, 0x49, 0x4A,
        0x53, 0x54, 0x55, 0x56, 0x57, 0x58, 0x59, 0x5A, 0x63, 0x64, 0x65,
        0x66, 0x67, 0x68, 0x69, 0x6A, 0x73, 0x74, 0x75, 0x76, 0x77, 0x78,
        0x79, 0x7A, 0x82, 0x83, 0x84, 0x85, 0x86, 0x87, 0x88, 0x89, 0x8A,
        0x92, 0x93, 0x94, 0x95, 0x96, 0x97, 0x98, 0x99, 0x9A, 0xA2, 0xA3,
        0xA4, 0xA5, 0xA6, 0xA7, 0xA8, 0xA9, 0xAA, 0xB2, 0xB3, 0xB4, 0xB5,
        0xB6, 0xB7, 0xB8, 0xB9, 0xBA, 0xC2, 0xC3, 0xC4, 0xC5, 0xC6, 0xC7,
        0xC8, 0xC9, 0xCA, 0xD2, 0xD3, 0xD4, 0xD5, 0xD6, 0xD7, 0xD8, 0xD9,
        0xDA, 0xE2, 0xE3, 0xE4, 0xE5, 0xE6, 0xE7, 0xE8, 0xE9, 0xEA, 0xF2,
        0xF3, 0xF4, 0xF5, 0xF6, 0xF7, 0xF8, 0xF9, 0xFA,
    ),
)

_ZIGZAG_FLAT = ZIGZAG_INDEX.reshape(-1)
_RASTER_OF_ZIGZAG = np.argsort(_ZIGZAG_FLAT)


class HuffmanTable:
    """Canonical Huffman codec built from (bits, values) JPEG-style specs."""

    def __init__(self, bits, values):
        self.bits = tuple(bits)
        self.values = tuple(values)
        self.encode_map = {}
        code = 0
        k = 0
        self.mincode = [0] * 17
        self.maxcode = [-1] * 17
        self.valptr = [0] * 17
        for length in range(1, 17):
            self.valptr[length] = k
            self.mincode[length] = code
            for _ in range(self.bits[length - 1]):
                self.encode_map[self.values[k]] = (code, length)
                code += 1
                k += 1
            self.maxcode[length] = code - 1
            code <<= 1

    def decode(self, reader) -> int:
        code = 0
        for length in range(1, 17):
            code = (code << 1) | reader.read(1)
            if self.bits[length - 1] and code <= self.maxcode[length]:
                return self.values[self.valptr[length] + code - self.mincode[length]]
        raise TruncatedStream("invalid Huffman code in payload")


DC_LUMA = HuffmanTable(*_DC_LUMA_SPEC)
DC_CHROMA = HuffmanTable(*_DC_CHROMA_SPEC)
AC_LUMA = HuffmanTable(*_AC_LUMA_SPEC)
AC_CHROMA = HuffmanTable(*_AC_CHROMA_SPEC)


class BitWriter:
    def __init__(self):
        self.out = bytearray()
        self.acc = 0
        self.nbits = 0

    def write(self, value: int, nbits: int) -> None:
        if nbits == 0:
            return
        self.acc = (self.acc << nbits) | (value & ((1 << nbits) - 1))
        self.nbits += nbits
        while self.nbits >= 8:
            self.nbits -= 8
            self.out.append((self.acc >> self.nbits) & 0xFF)
        self.acc &= (1 << self.nbits) - 1

    def getvalue(self) -> bytes:
        if self.nbits:
            pad = 8 - self.nbits
            self.out.append(((self.acc << pad) | ((1 << pad) - 1)) & 0xFF)
            self.acc = 0
            self.nbits = 0
        return bytes(self.out)


class BitReader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.acc = 0
        self.nbits = 0

    def read(self, n: int) -> int:
        while self.nbits < n:
            if self.pos >= len(self.data):
                raise TruncatedStream("payload exhausted mid-symbol")
            self.acc = (self.acc << 8) | self.data[self.pos]
            self.pos += 1
            self.nbits += 8
        self.nbits -= n
        value = (self.acc >> self.nbits) & ((1 << n) - 1)
        self.acc &= (1 << self.nbits) - 1
        return value


def _category(v: int) -> int:
    return int(v).bit_length() if v > 0 else int(-v).bit_length()


def _encode_value_bits(v: int, size: int) -> int:
    return v if v >= 0 else v + (1 << size) - 1


def _extend(bits: int, size: int) -> int:
    if size == 0:
        return 0
    if bits < (1 << (size - 1)):
        return bits - (1 << size) + 1
    return bits


def _encode_plane_blocks(writer: BitWriter, zz_blocks: np.ndarray,
                         dc_table: HuffmanTable, ac_table: HuffmanTable) -> None:
    """zz_blocks: (n_blocks, 64) int32 quantized coefficients, zigzag order."""
    prev_dc = 0
    for blk in zz_blocks:
        diff = int(blk[0]) - prev_dc
        prev_dc = int(blk[0])
        size = _category(diff)
        code, length = dc_table.encode_map[size]
        writer.write(code, length)
        writer.write(_encode_value_bits(diff, size), size)
        run = 0
        for k in range(1, 64):
            v = int(blk[k])
            if v == 0:
                run += 1
                continue
            while run > 15:
                code, length = ac_table.encode_map[0xF0]
                writer.write(code, length)
                run -= 16
            size = _category(v)
            code, length = ac_table.encode_map[(run << 4) | size]
            writer.write(code, length)
            writer.write(_encode_value_bits(v, size), size)
            run = 0
        if run:
            code, length = ac_table.encode_map[0x00]
            writer.write(code, length)


def _decode_plane_blocks(reader: BitReader, n_blocks: int,
                         dc_table: HuffmanTable, ac_table: HuffmanTable
                         ) -> np.ndarray:
    out = np.zeros((n_blocks, 64), dtype=np.int32)
    prev_dc = 0
    for i in range(n_blocks):
        size = dc_table.decode(reader)
        diff = _extend(reader.read(size), size)
        prev_dc += diff
        out[i, 0] = prev_dc
        k = 1
        while k < 64:
            symbol = ac_table.decode(reader)
            if symbol == 0x00:
                break
            if symbol == 0xF0:
                k += 16
                continue
            run, size = symbol >> 4, symbol & 0x0F
            k += run
            if k > 63:
                raise TruncatedStream("AC run overflows block")
            out[i, k] = _extend(reader.read(size), size)
            k += 1
    return out


def _plane_q_steps(levels_per_block: np.ndarray, tables: QuantTableSet,
                   plane_class: str) -> np.ndarray:
    """(nby, nbx, 8, 8) quantization steps from per-block 1-based levels."""
    rasters = np.stack(
        [tables.table_for(l, plane_class).raster()
         for l in range(1, tables.level_count + 1)]
    )
    return rasters[levels_per_block - 1]


def _check_geometry(frame: Frame, strategy: StrategyMap,
                    tables: QuantTableSet) -> RegionGrid:
    grid = strategy.grid
    expected = grid.regions_shape(frame.y.shape)
    if strategy.levels.shape != expected:
        raise DimensionMismatch(
            f"strategy grid {strategy.levels.shape} != frame grid {expected}"
        )
    if int(strategy.levels.max()) > tables.level_count:
        raise UnknownLevel(
            f"strategy uses level {int(strategy.levels.max())}, "
            f"table set has {tables.level_count}"
        )
    return grid


def _quantized_zigzag_planes(frame: Frame, strategy: StrategyMap,
                             tables: QuantTableSet):
    """Quantized (n_blocks, 64) zigzag coefficients for Y, U, V."""
    grid = _check_geometry(frame, strategy, tables)
    flat_levels = strategy.flat()
    out = []
    for plane, plane_class, scale in (
        (frame.y, PLANE_LUMA, 1),
        (frame.u, PLANE_CHROMA, frame.chroma_scale),
        (frame.v, PLANE_CHROMA, frame.chroma_scale),
    ):
        coeffs = dct_plane(plane)
        ids = grid.block_region_ids(plane.shape, scale)
        steps = _plane_q_steps(flat_levels[ids], tables, plane_class)
        q = quantize(coeffs, steps)
        zz = q.reshape(-1, 64)[:, _RASTER_OF_ZIGZAG]
        out.append(zz)
    return out


def encode_frame(frame: Frame, strategy: StrategyMap,
                 tables: QuantTableSet) -> bytes:
    """Serialize a frame under a per-region strategy; pure and deterministic."""
    zz_planes = _quantized_zigzag_planes(frame, strategy, tables)
    writer = BitWriter()
    _encode_plane_blocks(writer, zz_planes[0], DC_LUMA, AC_LUMA)
    _encode_plane_blocks(writer, zz_planes[1], DC_CHROMA, AC_CHROMA)
    _encode_plane_blocks(writer, zz_planes[2], DC_CHROMA, AC_CHROMA)
    payload = writer.getvalue()

    header = _HEADER.pack(
        MAGIC,
        VERSION,
        frame.frame_id,
        frame.width,
        frame.height,
        1 if frame.subsampling == SUBSAMPLING_420 else 0,
        tables.level_count,
        strategy.region_w,
        strategy.region_h,
        tables.digest(),
    )
    return header + strategy.pack() + struct.pack("<I", len(payload)) + payload


def encoded_size(frame: Frame, strategy: StrategyMap,
                 tables: QuantTableSet) -> int:
    """Exact byte count of encode_frame without keeping the stream."""
    return len(encode_frame(frame, strategy, tables))


def decode_frame(data: bytes, tables: QuantTableSet
                 ) -> tuple[Frame, StrategyMap]:
    """Inverse of encode_frame; also returns the embedded strategy map."""
    if len(data) < _HEADER.size:
        raise TruncatedStream("bitstream shorter than header")
    (magic, version, frame_id, width, height, sub, level_count,
     region_w, region_h, digest) = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise BadMagic("not a STAC bitstream")
    if version != VERSION:
        raise BadMagic(f"unsupported bitstream version {version}")
    if digest != tables.digest():
        raise DigestMismatch("bitstream was encoded with a different table set")
    if level_count != tables.level_count:
        raise DigestMismatch("level count disagrees with table set")
    subsampling = SUBSAMPLING_420 if sub == 1 else SUBSAMPLING_444

    pad = lambda n: -(-n // BLOCK) * BLOCK
    y_shape = (pad(height), pad(width))
    if subsampling == SUBSAMPLING_420:
        c_shape = (pad((height + 1) // 2), pad((width + 1) // 2))
        scale = 2
    else:
        c_shape = y_shape
        scale = 1

    grid = RegionGrid(region_w, region_h)
    regions_shape = grid.regions_shape(y_shape)
    n_regions = regions_shape[0] * regions_shape[1]
    strat_bytes = (n_regions + 1) // 2
    pos = _HEADER.size
    if len(data) < pos + strat_bytes + 4:
        raise TruncatedStream("bitstream truncated in strategy map")
    strategy = StrategyMap.unpack(
        data[pos : pos + strat_bytes], regions_shape, region_w, region_h
    )
    if int(strategy.levels.max()) > tables.level_count:
        raise UnknownLevel("embedded strategy references a missing level")
    pos += strat_bytes
    (payload_len,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if len(data) < pos + payload_len:
        raise TruncatedStream("bitstream payload truncated")
    reader = BitReader(data[pos : pos + payload_len])

    flat_levels = strategy.flat()
    planes = []
    for shape, plane_class, plane_scale, dc, ac in (
        (y_shape, PLANE_LUMA, 1, DC_LUMA, AC_LUMA),
        (c_shape, PLANE_CHROMA, scale, DC_CHROMA, AC_CHROMA),
        (c_shape, PLANE_CHROMA, scale, DC_CHROMA, AC_CHROMA),
    ):
        nby, nbx = shape[0] // BLOCK, shape[1] // BLOCK
        zz = _decode_plane_blocks(reader, nby * nbx, dc, ac)
        raster = zz[:, _ZIGZAG_FLAT].reshape(nby, nbx, BLOCK, BLOCK)
        ids = grid.block_region_ids(shape, plane_scale)
        steps = _plane_q_steps(flat_levels[ids], tables, plane_class)
        coeffs = raster.astype(np.float64) * steps
        plane = idct_plane(coeffs)
        planes.append(np.clip(np.rint(plane), 0, 255).astype(np.uint8))

    frame = Frame(
        width=width,
        height=height,
        y=planes[0],
        u=planes[1],
        v=planes[2],
        frame_id=frame_id,
        subsampling=subsampling,
    )
    return frame, strategy
