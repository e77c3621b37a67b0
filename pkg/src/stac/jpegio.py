"""Baseline JFIF export for uniform strategies.

The custom container exists because per-region table indices exceed
JPEG's four-table limit; when every region uses the same level the frame
is expressible as a plain baseline JPEG, which this module emits for
interoperability with standard viewers.  The DCT scaling used by the
codec equals the JPEG FDCT, so tables carry over unchanged.
"""

from __future__ import annotations

import struct

import numpy as np

from .codec import (
    AC_CHROMA,
    AC_LUMA,
    DC_CHROMA,
    DC_LUMA,
    BitWriter,
    _AC_CHROMA_SPEC,
    _AC_LUMA_SPEC,
    _DC_CHROMA_SPEC,
    _DC_LUMA_SPEC,
    _category,
    _encode_value_bits,
)
from .dct import BLOCK, dct_plane, quantize
from .frame import SUBSAMPLING_420, Frame
from .tables import QuantTable


class _StuffedBitWriter(BitWriter):
    """JPEG entropy stream: every 0xFF byte is followed by a 0x00 stuff."""

    def write(self, value: int, nbits: int) -> None:
        if nbits == 0:
            return
        self.acc = (self.acc << nbits) | (value & ((1 << nbits) - 1))
        self.nbits += nbits
        while self.nbits >= 8:
            self.nbits -= 8
            byte = (self.acc >> self.nbits) & 0xFF
            self.out.append(byte)
            if byte == 0xFF:
                self.out.append(0x00)
        self.acc &= (1 << self.nbits) - 1

    def getvalue(self) -> bytes:
        if self.nbits:
            pad = 8 - self.nbits
            self.write((1 << pad) - 1, pad)
        return bytes(self.out)


def _marker(tag: int, payload: bytes = b"") -> bytes:
    if not payload:
        return struct.pack(">BB", 0xFF, tag)
    return struct.pack(">BBH", 0xFF, tag, len(payload) + 2) + payload


def _dqt(table_id: int, table: QuantTable) -> bytes:
    return _marker(0xDB, bytes([table_id]) + bytes(int(q) for q in table.steps))


def _dht(table_class: int, table_id: int, spec) -> bytes:
    bits, values = spec
    payload = bytes([(table_class << 4) | table_id])
    payload += bytes(bits) + bytes(values)
    return _marker(0xC4, payload)


def _pad_to(plane: np.ndarray, h: int, w: int) -> np.ndarray:
    return np.pad(plane, ((0, h - plane.shape[0]), (0, w - plane.shape[1])),
                  mode="edge")


def _encode_component(writer, blocks, dc_table, ac_table, prev_dc):
    for blk in blocks:
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
                c, l = ac_table.encode_map[0xF0]
                writer.write(c, l)
                run -= 16
            size = _category(v)
            c, l = ac_table.encode_map[(run << 4) | size]
            writer.write(c, l)
            writer.write(_encode_value_bits(v, size), size)
            run = 0
        if run:
            c, l = ac_table.encode_map[0x00]
            writer.write(c, l)
    return prev_dc


def export_jpeg(frame: Frame, luma_table: QuantTable,
                chroma_table: QuantTable | None = None) -> bytes:
    """Serialize the frame as a baseline JFIF stream with the given tables."""
    chroma_table = chroma_table or luma_table
    sub420 = frame.subsampling == SUBSAMPLING_420
    hv = (2, 2) if sub420 else (1, 1)
    mcu_w = BLOCK * hv[0]
    mcu_h = BLOCK * hv[1]
    mcus_x = -(-frame.width // mcu_w)
    mcus_y = -(-frame.height // mcu_h)

    y = _pad_to(frame.y, mcus_y * mcu_h, mcus_x * mcu_w)
    ch, cw = mcus_y * BLOCK, mcus_x * BLOCK
    if sub420:
        u = _pad_to(frame.u, ch, cw)
        v = _pad_to(frame.v, ch, cw)
    else:
        u = _pad_to(frame.u, mcus_y * mcu_h, mcus_x * mcu_w)
        v = _pad_to(frame.v, mcus_y * mcu_h, mcus_x * mcu_w)

    from .dct import ZIGZAG

    zz_cols = np.array([r * BLOCK + c for r, c in ZIGZAG])

    def quantized_zz(plane, table):
        coeffs = dct_plane(plane)
        q = quantize(coeffs, table.raster())
        nby, nbx = q.shape[:2]
        return q.reshape(nby, nbx, 64)[..., zz_cols]

    zz_y = quantized_zz(y, luma_table)
    zz_u = quantized_zz(u, chroma_table)
    zz_v = quantized_zz(v, chroma_table)

    out = bytearray()
    out += _marker(0xD8)  # SOI
    out += _marker(0xE0, b"JFIF\x00\x01\x01\x00\x00\x01\x00\x01\x00\x00")
    out += _dqt(0, luma_table)
    out += _dqt(1, chroma_table)
    sof = struct.pack(">BHHB", 8, frame.height, frame.width, 3)
    sof += bytes([1, (hv[0] << 4) | hv[1], 0])
    sof += bytes([2, 0x11, 1])
    sof += bytes([3, 0x11, 1])
    out += _marker(0xC0, sof)
    out += _dht(0, 0, _DC_LUMA_SPEC)
    out += _dht(1, 0, _AC_LUMA_SPEC)
    out += _dht(0, 1, _DC_CHROMA_SPEC)
    out += _dht(1, 1, _AC_CHROMA_SPEC)
    sos = bytes([3, 1, 0x00, 2, 0x11, 3, 0x11, 0, 63, 0])
    out += _marker(0xDA, sos)

    writer = _StuffedBitWriter()
    dc = [0, 0, 0]
    for my in range(mcus_y):
        for mx in range(mcus_x):
            y_blocks = [
                zz_y[my * hv[1] + by, mx * hv[0] + bx]
                for by in range(hv[1])
                for bx in range(hv[0])
            ]
            dc[0] = _encode_component(writer, y_blocks, DC_LUMA, AC_LUMA, dc[0])
            dc[1] = _encode_component(writer, [zz_u[my, mx]], DC_CHROMA,
                                      AC_CHROMA, dc[1])
            dc[2] = _encode_component(writer, [zz_v[my, mx]], DC_CHROMA,
                                      AC_CHROMA, dc[2])
    out += writer.getvalue()
    out += _marker(0xD9)  # EOI
    return bytes(out)
