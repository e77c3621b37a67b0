"""Wire protocol, reference edge server, links and the device run loop.

Every message is framed as

    magic "STWP" | version u16 | tag u8 | body_len u32 | body

little-endian throughout, so streams are self-delimiting.  The edge holds
the oracle and the table set: per offloaded keyframe it decodes, computes
the fake gradient on the decoded pixels, converts to coefficient
gradients, runs the per-region level selection and feeds back the
segmentation (run-length coded) plus the packed strategy.

The loopback link drives a server instance in-process through the exact
serialized byte path, which keeps tests deterministic and byte-accurate.
"""

from __future__ import annotations

import socket
import socketserver
import struct
from dataclasses import dataclass, field

import numpy as np

from . import codec, temporal
from .errors import (
    DigestMismatch,
    LinkLost,
    OracleFailure,
    ProtocolError,
    StacError,
    TruncatedStream,
)
from .flow import FlowParams, SegmentationMap
from .frame import SUBSAMPLING_420, SUBSAMPLING_444, Frame
from .metrics import mean_iou
from .sensitivity import fake_gradient, pixel_to_coeff_gradients
from .strategy import StrategyMap, select_levels
from .tables import DIGEST_BYTES, QuantTableSet, RegionGrid

WIRE_MAGIC = b"STWP"
WIRE_VERSION = 1
_FRAME_HEADER = struct.Struct("<4sHBI")

TAG_HELLO = 1
TAG_HELLO_ACK = 2
TAG_OFFLOAD = 3
TAG_FEEDBACK = 4
TAG_ERROR = 5

ACK_OK = 0
ACK_DIGEST_MISMATCH = 1

MODE_STAC = "stac"
MODE_UNIFORM = "uniform"
MODE_PER_FRAME = "per-frame"


@dataclass(frozen=True)
class SessionHello:
    digest: bytes
    width: int
    height: int
    subsampling: str
    region_w: int
    region_h: int
    level_count: int


@dataclass(frozen=True)
class HelloAck:
    status: int


@dataclass(frozen=True)
class OffloadMsg:
    frame_id: int
    bitstream: bytes

    @property
    def byte_count(self) -> int:
        return len(serialize(self))


@dataclass(frozen=True)
class FeedbackMsg:
    frame_id: int
    segmentation: SegmentationMap
    strategy: StrategyMap


@dataclass(frozen=True)
class ErrorMsg:
    frame_id: int
    message: str


def rle_encode_labels(classes: np.ndarray) -> bytes:
    """Row-major (class u8, run u16) pairs; runs longer than 65535 split."""
    flat = np.asarray(classes, dtype=np.uint8).reshape(-1)
    h, w = classes.shape
    out = bytearray(struct.pack("<III", w, h, 0))
    boundaries = np.nonzero(np.diff(flat))[0] + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [flat.size]])
    n_runs = 0
    for s, e in zip(starts, ends):
        cls = int(flat[s])
        length = int(e - s)
        while length > 0:
            run = min(length, 0xFFFF)
            out += struct.pack("<BH", cls, run)
            length -= run
            n_runs += 1
    struct.pack_into("<I", out, 8, n_runs)
    return bytes(out)


def rle_decode_labels(data: bytes, offset: int = 0
                      ) -> tuple[np.ndarray, int]:
    if len(data) < offset + 12:
        raise TruncatedStream("RLE header truncated")
    w, h, n_runs = struct.unpack_from("<III", data, offset)
    pos = offset + 12
    if len(data) < pos + 3 * n_runs:
        raise TruncatedStream("RLE runs truncated")
    flat = np.empty(h * w, dtype=np.uint8)
    at = 0
    for _ in range(n_runs):
        cls, run = struct.unpack_from("<BH", data, pos)
        pos += 3
        if at + run > flat.size:
            raise ProtocolError("RLE runs overflow the map")
        flat[at : at + run] = cls
        at += run
    if at != flat.size:
        raise ProtocolError("RLE runs do not cover the map")
    return flat.reshape(h, w), pos


def _body(msg) -> tuple[int, bytes]:
    if isinstance(msg, SessionHello):
        sub = 1 if msg.subsampling == SUBSAMPLING_420 else 0
        return TAG_HELLO, struct.pack(
            f"<{DIGEST_BYTES}sIIBBBB", msg.digest, msg.width, msg.height,
            sub, msg.region_w, msg.region_h, msg.level_count,
        )
    if isinstance(msg, HelloAck):
        return TAG_HELLO_ACK, struct.pack("<B", msg.status)
    if isinstance(msg, OffloadMsg):
        return TAG_OFFLOAD, struct.pack("<I", msg.frame_id) + msg.bitstream
    if isinstance(msg, FeedbackMsg):
        ry, rx = msg.strategy.levels.shape
        body = struct.pack("<IHHBB", msg.frame_id, rx, ry,
                           msg.strategy.region_w, msg.strategy.region_h)
        body += msg.strategy.pack()
        body += rle_encode_labels(msg.segmentation.classes)
        return TAG_FEEDBACK, body
    if isinstance(msg, ErrorMsg):
        raw = msg.message.encode("utf-8")
        return TAG_ERROR, struct.pack("<I", msg.frame_id) + raw
    raise ProtocolError(f"cannot serialize {type(msg).__name__}")


def serialize(msg) -> bytes:
    tag, body = _body(msg)
    return _FRAME_HEADER.pack(WIRE_MAGIC, WIRE_VERSION, tag, len(body)) + body


def deserialize(data: bytes, offset: int = 0):
    """Parse one message; returns (message, bytes_consumed)."""
    if len(data) < offset + _FRAME_HEADER.size:
        raise TruncatedStream("wire frame header truncated")
    magic, version, tag, body_len = _FRAME_HEADER.unpack_from(data, offset)
    if magic != WIRE_MAGIC:
        raise ProtocolError("bad wire magic")
    if version != WIRE_VERSION:
        raise ProtocolError(f"unsupported wire version {version}")
    start = offset + _FRAME_HEADER.size
    if len(data) < start + body_len:
        raise TruncatedStream("wire frame body truncated")
    body = data[start : start + body_len]
    consumed = _FRAME_HEADER.size + body_len

    if tag == TAG_HELLO:
        digest, w, h, sub, rw, rh, levels = struct.unpack_from(
            f"<{DIGEST_BYTES}sIIBBBB", body, 0
        )
        return SessionHello(
            digest, w, h,
            SUBSAMPLING_420 if sub == 1 else SUBSAMPLING_444,
            rw, rh, levels,
        ), consumed
    if tag == TAG_HELLO_ACK:
        return HelloAck(struct.unpack_from("<B", body, 0)[0]), consumed
    if tag == TAG_OFFLOAD:
        (frame_id,) = struct.unpack_from("<I", body, 0)
        return OffloadMsg(frame_id, body[4:]), consumed
    if tag == TAG_FEEDBACK:
        frame_id, rx, ry, rw, rh = struct.unpack_from("<IHHBB", body, 0)
        pos = 10
        packed_len = (rx * ry + 1) // 2
        strategy = StrategyMap.unpack(body[pos : pos + packed_len],
                                      (ry, rx), rw, rh)
        pos += packed_len
        classes, _ = rle_decode_labels(body, pos)
        return FeedbackMsg(frame_id, SegmentationMap(classes, frame_id),
                           strategy), consumed
    if tag == TAG_ERROR:
        (frame_id,) = struct.unpack_from("<I", body, 0)
        return ErrorMsg(frame_id, body[4:].decode("utf-8")), consumed
    raise ProtocolError(f"unknown message tag {tag}")


@dataclass
class SessionStats:
    up_bytes: int = 0
    down_bytes: int = 0
    frames_served: int = 0


class EdgeSession:
    """Per-connection server logic: hello gate, then offload -> feedback."""

    def __init__(self, oracle, tables: QuantTableSet, b: float):
        self.oracle = oracle
        self.tables = tables
        self.b = b
        self.grid: RegionGrid | None = None
        self.ready = False
        self.closed = False
        self.stats = SessionStats()

    def handle_bytes(self, request: bytes) -> bytes:
        msg, _ = deserialize(request)
        self.stats.up_bytes += len(request)
        reply = self._dispatch(msg)
        raw = serialize(reply)
        self.stats.down_bytes += len(raw)
        return raw

    def _dispatch(self, msg):
        if isinstance(msg, SessionHello):
            if msg.digest != self.tables.digest():
                self.closed = True
                return HelloAck(ACK_DIGEST_MISMATCH)
            if msg.level_count != self.tables.level_count:
                self.closed = True
                return HelloAck(ACK_DIGEST_MISMATCH)
            self.grid = RegionGrid(msg.region_w, msg.region_h)
            self.ready = True
            return HelloAck(ACK_OK)
        if not self.ready or self.closed:
            self.closed = True
            raise ProtocolError("offload before successful hello")
        if isinstance(msg, OffloadMsg):
            return self._serve_offload(msg)
        raise ProtocolError(f"unexpected message {type(msg).__name__}")

    def _serve_offload(self, msg: OffloadMsg):
        try:
            frame, _ = codec.decode_frame(msg.bitstream, self.tables)
        except DigestMismatch:
            self.closed = True
            raise
        try:
            grad, seg = fake_gradient(frame, self.oracle)
            gs = pixel_to_coeff_gradients(grad)
            strategy = select_levels(gs, self.tables, self.b, self.grid)
        except OracleFailure as exc:
            return ErrorMsg(msg.frame_id, str(exc))
        self.stats.frames_served += 1
        return FeedbackMsg(msg.frame_id, seg.with_id(msg.frame_id), strategy)


class LoopbackLink:
    """In-process link that still round-trips every byte of the protocol."""

    def __init__(self, oracle, tables: QuantTableSet, b: float):
        self.session = EdgeSession(oracle, tables, b)
        self.up_bytes = 0
        self.down_bytes = 0

    def request(self, msg):
        raw = serialize(msg)
        self.up_bytes += len(raw)
        reply_raw = self.session.handle_bytes(raw)
        self.down_bytes += len(reply_raw)
        reply, _ = deserialize(reply_raw)
        return reply

    def close(self):
        pass


class TcpLink:
    """Blocking client over a TCP byte stream."""

    def __init__(self, host: str, port: int, timeout: float = 30.0):
        try:
            self.sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise LinkLost(f"connect failed: {exc}") from exc
        self.up_bytes = 0
        self.down_bytes = 0

    def _read_exact(self, n: int) -> bytes:
        buf = b""
        while len(buf) < n:
            chunk = self.sock.recv(n - len(buf))
            if not chunk:
                raise LinkLost("connection closed by peer")
            buf += chunk
        return buf

    def request(self, msg):
        try:
            raw = serialize(msg)
            self.sock.sendall(raw)
            self.up_bytes += len(raw)
            head = self._read_exact(_FRAME_HEADER.size)
            _, _, _, body_len = _FRAME_HEADER.unpack(head)
            body = self._read_exact(body_len)
        except OSError as exc:
            raise LinkLost(f"link I/O failed: {exc}") from exc
        self.down_bytes += len(head) + len(body)
        reply, _ = deserialize(head + body)
        return reply

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass


class _EdgeHandler(socketserver.BaseRequestHandler):
    def handle(self):
        srv = self.server
        session = EdgeSession(srv.oracle, srv.tables, srv.b)
        srv.sessions.append(session)
        try:
            while not session.closed:
                head = self._read_exact(_FRAME_HEADER.size)
                if head is None:
                    return
                _, _, _, body_len = _FRAME_HEADER.unpack(head)
                body = self._read_exact(body_len)
                if body is None:
                    return
                try:
                    reply = session.handle_bytes(head + body)
                except StacError:
                    return
                self.request.sendall(reply)
        except OSError:
            return

    def _read_exact(self, n: int):
        buf = b""
        while len(buf) < n:
            try:
                chunk = self.request.recv(n - len(buf))
            except OSError:
                return None
            if not chunk:
                return None
            buf += chunk
        return buf


class EdgeServer(socketserver.ThreadingTCPServer):
    """TCP edge server; one session per connection, sessions independent."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address, oracle, tables: QuantTableSet, b: float):
        super().__init__(address, _EdgeHandler)
        self.oracle = oracle
        self.tables = tables
        self.b = b
        self.sessions: list[EdgeSession] = []


def edge_serve(host: str, port: int, oracle, tables: QuantTableSet,
               b: float) -> EdgeServer:
    """Bind and return a server; call serve_forever() (or use as context)."""
    return EdgeServer((host, port), oracle, tables, b)


@dataclass
class RunRow:
    frame_id: int
    is_keyframe: bool
    psnr: float | None
    uplink_bytes: int
    cumulative_kbps: float
    miou: float | None = None


@dataclass
class RunReport:
    """Per-frame rows plus exact byte accounting for one device run."""

    mode: str
    b: float
    fps: float
    rows: list = field(default_factory=list)
    segmentations: list = field(default_factory=list)
    up_bytes: int = 0
    down_bytes: int = 0
    setup_bytes: int = 0
    offload_count: int = 0
    link_lost: bool = False

    @property
    def frame_count(self) -> int:
        return len(self.rows)

    @property
    def duration_s(self) -> float:
        return self.frame_count / self.fps if self.frame_count else 0.0

    @property
    def uplink_kbps(self) -> float:
        if not self.frame_count:
            return 0.0
        return self.up_bytes * 8.0 / 1000.0 / self.duration_s

    @property
    def offloaded_fps(self) -> float:
        if not self.frame_count:
            return 0.0
        return self.offload_count / self.duration_s

    def to_csv(self) -> str:
        lines = ["# stac-run-csv v1"]
        lines.append("frame_id,is_keyframe,psnr,uplink_bytes,cumulative_kbps,miou")
        for r in self.rows:
            p = "" if r.psnr is None else f"{r.psnr:.4f}"
            m = "" if r.miou is None else f"{r.miou:.6f}"
            lines.append(
                f"{r.frame_id},{int(r.is_keyframe)},{p},{r.uplink_bytes},"
                f"{r.cumulative_kbps:.4f},{m}"
            )
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class DeviceConfig:
    tables: QuantTableSet
    b: float
    mode: str = MODE_STAC
    thr: float = temporal.DEFAULT_PSNR_THRESHOLD
    fps: float = 17.0
    grid: RegionGrid = RegionGrid()
    mid_level: int | None = None
    uniform_level: int | None = None
    flow_params: FlowParams = FlowParams()

    def resolved_uniform_level(self) -> int:
        if self.uniform_level is not None:
            return self.uniform_level
        if self.tables.b_levels:
            diffs = [abs(bl - self.b) for bl in self.tables.b_levels]
            return int(np.argmin(diffs)) + 1
        return temporal.middle_level(self.tables.level_count)


def _parse_mode(mode: str) -> tuple[str, int | None]:
    if mode.startswith(MODE_UNIFORM + ":"):
        return MODE_UNIFORM, int(mode.split(":", 1)[1])
    if mode in (MODE_STAC, MODE_UNIFORM, MODE_PER_FRAME):
        return mode, None
    raise ValueError(f"unknown mode {mode!r}")


def device_run(frames, link, config: DeviceConfig, truth=None) -> RunReport:
    """Drive the temporal scheme over a frame sequence through a link.

    ``frames`` is a sequence of Frame with consecutive frame ids; ``truth``
    an optional parallel list of SegmentationMap for per-frame mIoU.
    """
    frames = list(frames)
    mode, explicit_level = _parse_mode(config.mode)
    report = RunReport(mode=config.mode, b=config.b, fps=config.fps)
    if not frames:
        return report

    tables = config.tables
    grid = config.grid
    first = frames[0]
    uniform_level = explicit_level or config.resolved_uniform_level()
    regions_shape = grid.regions_shape(first.y.shape)

    def uniform_map() -> StrategyMap:
        return StrategyMap.uniform(uniform_level, regions_shape,
                                   grid.region_w, grid.region_h)

    hello = SessionHello(
        digest=tables.digest(),
        width=first.width,
        height=first.height,
        subsampling=first.subsampling,
        region_w=grid.region_w,
        region_h=grid.region_h,
        level_count=tables.level_count,
    )
    down_before = link.down_bytes
    try:
        ack = link.request(hello)
        report.setup_bytes = len(serialize(hello)) + len(serialize(ack))
        if not isinstance(ack, HelloAck) or ack.status != ACK_OK:
            raise LinkLost("session refused: table-set digest mismatch")
    except LinkLost:
        report.link_lost = True
        return report

    thr = np.inf if mode == MODE_PER_FRAME else config.thr
    state, (f1, strat1) = temporal.init(
        first,
        mid_level=config.mid_level,
        grid=grid,
        level_count=tables.level_count,
        thr=thr,
        flow_params=config.flow_params,
    )
    if mode != MODE_STAC:
        strat1 = uniform_map()

    def offload_and_apply(frame: Frame, strategy: StrategyMap) -> int:
        bits = codec.encode_frame(frame, strategy, tables)
        msg = OffloadMsg(frame.frame_id, bits)
        sent = len(serialize(msg))
        reply = link.request(msg)
        if isinstance(reply, ErrorMsg):
            raise OracleFailure(reply.message)
        fb_strategy = reply.strategy if mode == MODE_STAC else uniform_map()
        temporal.handle_feedback(state, reply.segmentation, fb_strategy,
                                 reply.frame_id)
        report.offload_count += 1
        return sent

    def add_row(frame, is_key, p, sent, seg):
        report.up_bytes += sent
        elapsed = len(report.rows) + 1
        kbps = report.up_bytes * 8.0 / 1000.0 / (elapsed / config.fps)
        miou = None
        if truth is not None:
            t = truth[len(report.rows)]
            miou = mean_iou(
                seg.classes[: frame.height, : frame.width],
                t.classes[: frame.height, : frame.width],
                class_count=int(max(seg.classes.max(), t.classes.max())) + 1,
            )
        report.rows.append(
            RunRow(frame.frame_id, is_key, p, sent, kbps, miou)
        )
        report.segmentations.append(seg)

    try:
        sent = offload_and_apply(f1, strat1)
        first_seg = state.seg_cache.with_id(first.frame_id)
        add_row(first, True, None, sent, first_seg)
        for frame in frames[1:]:
            outcome = temporal.step(state, frame)
            sent = 0
            if outcome.offload is not None:
                off_frame, off_strategy = outcome.offload
                if mode != MODE_STAC:
                    off_strategy = uniform_map()
                sent = offload_and_apply(off_frame, off_strategy)
            add_row(frame, outcome.is_keyframe, outcome.propagated_psnr,
                    sent, outcome.segmentation)
    except LinkLost:
        report.link_lost = True
    # feedback bytes only: session setup is accounted separately
    ack_bytes = report.setup_bytes - len(serialize(hello))
    report.down_bytes = link.down_bytes - down_before - ack_bytes
    return report
