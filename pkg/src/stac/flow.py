"""Dense optical flow, flow composition and frame/label/strategy warping.

The flow estimator is a coarse-to-fine patch-based inverse search followed
by weighted densification: an image pyramid (x2 downscale per level) is
walked from coarse to fine, 8x8 patches on a stride-4 grid are aligned
with inverse-compositional Gauss-Newton iterations (at most 12 per patch),
and per-pixel flow is the residual-weighted average of the patches
covering the pixel.  No variational refinement pass is applied.

Flow semantics are backward: a field gamma with src_id=a, dst_id=b maps a
pixel p in frame b's coordinates to its source location p + gamma(p) in
frame a, so warping frame a through gamma produces frame b's view.
Validity means the source location lands inside the frame; invalid pixels
are flagged, never silently zeroed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .dct import BLOCK
from .errors import BadMagic, ChainMismatch, DimensionMismatch
from .frame import Frame
from .strategy import StrategyMap
from .tables import RegionGrid

PSNR_CAP = 99.0
FLO_MAGIC = 202021.25  # spells "PIEH" in little-endian float32


@dataclass(frozen=True)
class SegmentationMap:
    """Per-pixel class ids at padded luma resolution."""

    classes: np.ndarray
    frame_id: int = 0

    def __post_init__(self):
        c = np.asarray(self.classes, dtype=np.uint8)
        c.setflags(write=False)
        object.__setattr__(self, "classes", c)

    def with_id(self, frame_id: int) -> "SegmentationMap":
        return SegmentationMap(self.classes, frame_id)


@dataclass(frozen=True)
class FlowField:
    """Per-pixel backward displacement with a source-in-bounds mask."""

    dx: np.ndarray
    dy: np.ndarray
    valid: np.ndarray
    src_id: int = 0
    dst_id: int = 0

    def __post_init__(self):
        dx = np.ascontiguousarray(self.dx, dtype=np.float32)
        dy = np.ascontiguousarray(self.dy, dtype=np.float32)
        valid = np.ascontiguousarray(self.valid, dtype=bool)
        if dx.shape != dy.shape or dx.shape != valid.shape:
            raise DimensionMismatch("flow components must share dims")
        for a in (dx, dy, valid):
            a.setflags(write=False)
        object.__setattr__(self, "dx", dx)
        object.__setattr__(self, "dy", dy)
        object.__setattr__(self, "valid", valid)

    @property
    def shape(self) -> tuple[int, int]:
        return self.dx.shape

    @staticmethod
    def zero(shape: tuple[int, int], src_id: int = 0, dst_id: int = 0
             ) -> "FlowField":
        z = np.zeros(shape, dtype=np.float32)
        return FlowField(z, z.copy(), np.ones(shape, dtype=bool), src_id, dst_id)

    @staticmethod
    def constant(shape: tuple[int, int], dx: float, dy: float,
                 src_id: int = 0, dst_id: int = 0) -> "FlowField":
        h, w = shape
        fx = np.full(shape, dx, dtype=np.float32)
        fy = np.full(shape, dy, dtype=np.float32)
        xs = np.arange(w)[None, :] + dx
        ys = np.arange(h)[:, None] + dy
        valid = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
        return FlowField(fx, fy, np.broadcast_to(valid, shape), src_id, dst_id)


@dataclass(frozen=True)
class FlowParams:
    levels: int = 4
    patch_size: int = 8
    stride: int = 4
    iterations: int = 12
    min_update: float = 0.01
    forward_backward_check: bool = False
    fb_threshold: float = 1.0


def _bilinear(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample img at float coords, clamped at the borders."""
    h, w = img.shape
    x = np.clip(x, 0.0, w - 1.0)
    y = np.clip(y, 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def _downsample_2x(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    if h % 2 or w % 2:
        img = np.pad(img, ((0, h % 2), (0, w % 2)), mode="edge")
    return (img[0::2, 0::2] + img[0::2, 1::2]
            + img[1::2, 0::2] + img[1::2, 1::2]) / 4.0


def _patch_positions(size: int, patch: int, stride: int) -> np.ndarray:
    if size <= patch:
        return np.array([0], dtype=np.int64)
    pos = list(range(0, size - patch + 1, stride))
    if pos[-1] != size - patch:
        pos.append(size - patch)
    return np.array(pos, dtype=np.int64)


def _level_flow(i_tpl: np.ndarray, i_src: np.ndarray, init_u: np.ndarray,
                init_v: np.ndarray, params: FlowParams
                ) -> tuple[np.ndarray, np.ndarray]:
    """One pyramid level: patch inverse search plus densification.

    i_tpl is the frame the flow is expressed in (templates), i_src the
    frame being sampled; init_u/v are dense initial flows at this level.
    """
    h, w = i_tpl.shape
    p = min(params.patch_size, h, w)
    ys = _patch_positions(h, p, params.stride)
    xs = _patch_positions(w, p, params.stride)
    gy0, gx0 = np.meshgrid(ys, xs, indexing="ij")
    px = gx0.reshape(-1)
    py = gy0.reshape(-1)
    n = px.size

    off = np.arange(p, dtype=np.float64)
    oy, ox = np.meshgrid(off, off, indexing="ij")
    tx = px[:, None, None] + ox[None]
    ty = py[:, None, None] + oy[None]

    tpl = i_tpl[ty.astype(np.int64), tx.astype(np.int64)]
    grad_y, grad_x = np.gradient(i_tpl)
    gx = grad_x[ty.astype(np.int64), tx.astype(np.int64)]
    gy = grad_y[ty.astype(np.int64), tx.astype(np.int64)]

    hxx = np.sum(gx * gx, axis=(1, 2))
    hxy = np.sum(gx * gy, axis=(1, 2))
    hyy = np.sum(gy * gy, axis=(1, 2))
    det = hxx * hyy - hxy * hxy
    solvable = det > 1e-9
    det_safe = np.where(solvable, det, 1.0)
    inv00 = hyy / det_safe
    inv01 = -hxy / det_safe
    inv11 = hxx / det_safe

    cx = px + (p - 1) / 2.0
    cy = py + (p - 1) / 2.0
    u = _bilinear(init_u, cx, cy)
    v = _bilinear(init_v, cx, cy)

    best_u, best_v = u.copy(), v.copy()
    best_err = np.full(n, np.inf)
    active = solvable.copy()
    for _ in range(params.iterations):
        if not active.any():
            break
        res = _bilinear(i_src, tx + u[:, None, None], ty + v[:, None, None]) - tpl
        err = np.mean(res * res, axis=(1, 2))
        improved = err < best_err
        best_err = np.where(improved, err, best_err)
        best_u = np.where(improved, u, best_u)
        best_v = np.where(improved, v, best_v)
        active &= improved
        bu = np.sum(gx * res, axis=(1, 2))
        bv = np.sum(gy * res, axis=(1, 2))
        du = inv00 * bu + inv01 * bv
        dv = inv01 * bu + inv11 * bv
        u = np.where(active, u - du, u)
        v = np.where(active, v - dv, v)
        active &= np.hypot(du, dv) >= params.min_update

    # patches that never produced a finite error keep their initialization
    missing = ~np.isfinite(best_err)
    if missing.any():
        res = _bilinear(i_src, tx + best_u[:, None, None],
                        ty + best_v[:, None, None]) - tpl
        best_err = np.where(missing, np.mean(res * res, axis=(1, 2)), best_err)

    weights = 1.0 / np.maximum(best_err, 1e-3)
    weights = np.where(solvable, weights, 1e-6)
    acc_u = np.zeros((h, w))
    acc_v = np.zeros((h, w))
    acc_w = np.zeros((h, w))
    iy = ty.astype(np.int64)
    ix = tx.astype(np.int64)
    wp = np.broadcast_to(weights[:, None, None], iy.shape)
    np.add.at(acc_u, (iy, ix), wp * best_u[:, None, None])
    np.add.at(acc_v, (iy, ix), wp * best_v[:, None, None])
    np.add.at(acc_w, (iy, ix), wp)
    acc_w = np.maximum(acc_w, 1e-12)
    return acc_u / acc_w, acc_v / acc_w


def compute_flow(prev: Frame, cur: Frame,
                 params: FlowParams = FlowParams()) -> FlowField:
    """Backward flow from cur to prev on the luma plane; deterministic."""
    if prev.y.shape != cur.y.shape:
        raise DimensionMismatch("frames must share dims")
    tpl_pyr = [cur.y.astype(np.float64)]
    src_pyr = [prev.y.astype(np.float64)]
    levels = params.levels
    while levels > 1 and min(tpl_pyr[-1].shape) // 2 >= params.patch_size:
        if len(tpl_pyr) == levels:
            break
        tpl_pyr.append(_downsample_2x(tpl_pyr[-1]))
        src_pyr.append(_downsample_2x(src_pyr[-1]))

    u = np.zeros(tpl_pyr[-1].shape)
    v = np.zeros(tpl_pyr[-1].shape)
    for lvl in range(len(tpl_pyr) - 1, -1, -1):
        if lvl < len(tpl_pyr) - 1:
            h, w = tpl_pyr[lvl].shape
            gy, gx = np.mgrid[0:h, 0:w]
            u = _bilinear(u, gx / 2.0, gy / 2.0) * 2.0
            v = _bilinear(v, gx / 2.0, gy / 2.0) * 2.0
        u, v = _level_flow(tpl_pyr[lvl], src_pyr[lvl], u, v, params)

    h, w = cur.y.shape
    gy, gx = np.mgrid[0:h, 0:w]
    sx = gx + u
    sy = gy + v
    valid = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    if params.forward_backward_check:
        back = compute_flow(
            cur, prev,
            FlowParams(params.levels, params.patch_size, params.stride,
                       params.iterations, params.min_update, False),
        )
        rx = _bilinear(back.dx.astype(np.float64), sx, sy)
        ry = _bilinear(back.dy.astype(np.float64), sx, sy)
        valid &= np.hypot(u + rx, v + ry) <= params.fb_threshold
    return FlowField(u, v, valid,
                     src_id=prev.frame_id, dst_id=cur.frame_id)


def compose_flow(f1: FlowField, f2: FlowField) -> FlowField:
    """Chain f1 (a->b) with f2 (b->c) into a single a->c field."""
    if f1.dst_id != f2.src_id:
        raise ChainMismatch(
            f"cannot chain flow into {f1.dst_id} with flow from {f2.src_id}"
        )
    if f1.shape != f2.shape:
        raise DimensionMismatch("flow fields must share dims")
    h, w = f2.shape
    gy, gx = np.mgrid[0:h, 0:w]
    qx = gx + f2.dx.astype(np.float64)
    qy = gy + f2.dy.astype(np.float64)
    dx = f2.dx + _bilinear(f1.dx.astype(np.float64), qx, qy).astype(np.float32)
    dy = f2.dy + _bilinear(f1.dy.astype(np.float64), qx, qy).astype(np.float32)
    in_bounds = (qx >= 0) & (qx <= w - 1) & (qy >= 0) & (qy <= h - 1)
    v1 = _bilinear(f1.valid.astype(np.float64), qx, qy) > 0.999
    return FlowField(dx, dy, f2.valid & in_bounds & v1, f1.src_id, f2.dst_id)


def _fill_invalid_nearest(values: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Replace invalid entries with the value of the nearest valid pixel."""
    if valid.all():
        return values
    if not valid.any():
        return values
    _, (iy, ix) = ndimage.distance_transform_edt(~valid, return_indices=True)
    return values[iy, ix]


def _sample_coords(flow: FlowField) -> tuple[np.ndarray, np.ndarray]:
    h, w = flow.shape
    gy, gx = np.mgrid[0:h, 0:w]
    return gx + flow.dx.astype(np.float64), gy + flow.dy.astype(np.float64)


def warp_frame(src: Frame, flow: FlowField) -> Frame:
    """Backward-bilinear warp; invalid pixels filled from the nearest valid."""
    if src.y.shape != flow.shape:
        raise DimensionMismatch("flow dims must match the luma plane")
    sx, sy = _sample_coords(flow)
    y = _bilinear(src.y.astype(np.float64), sx, sy)
    y = _fill_invalid_nearest(y, flow.valid)
    y = np.clip(np.rint(y), 0, 255).astype(np.uint8)

    planes = [y]
    for plane in (src.u, src.v):
        if src.subsampling == "444":
            c = _bilinear(plane.astype(np.float64), sx, sy)
            c = _fill_invalid_nearest(c, flow.valid)
        else:
            ch, cw = plane.shape
            cgy, cgx = np.mgrid[0:ch, 0:cw]
            # luma-plane coordinates of chroma sample centers
            lx = 2.0 * cgx + 0.5
            ly = 2.0 * cgy + 0.5
            cdx = _bilinear(flow.dx.astype(np.float64), lx, ly) / 2.0
            cdy = _bilinear(flow.dy.astype(np.float64), lx, ly) / 2.0
            cvalid = _bilinear(flow.valid.astype(np.float64), lx, ly) > 0.999
            c = _bilinear(plane.astype(np.float64), cgx + cdx, cgy + cdy)
            c = _fill_invalid_nearest(c, cvalid)
        planes.append(np.clip(np.rint(c), 0, 255).astype(np.uint8))

    return Frame(src.width, src.height, planes[0], planes[1], planes[2],
                 flow.dst_id, src.subsampling)


def warp_labels(seg: SegmentationMap, flow: FlowField) -> SegmentationMap:
    """Nearest-neighbor backward warp of class ids; closed under class set."""
    if seg.classes.shape != flow.shape:
        raise DimensionMismatch("flow dims must match the segmentation map")
    sx, sy = _sample_coords(flow)
    h, w = flow.shape
    ix = np.clip(np.floor(sx + 0.5), 0, w - 1).astype(np.int64)
    iy = np.clip(np.floor(sy + 0.5), 0, h - 1).astype(np.int64)
    out = seg.classes[iy, ix]
    out = _fill_invalid_nearest(out, flow.valid)
    return SegmentationMap(out, flow.dst_id)


def warp_strategy(strategy: StrategyMap, flow: FlowField,
                  grid: RegionGrid) -> StrategyMap:
    """Trace region centers backward and adopt the source region's level.

    Unresolved regions (invalid or out-of-bounds trace) copy the nearest
    resolved region's level, by Euclidean center distance with row-major
    tie-break; if nothing resolves, everything copies region (0, 0) of the
    source strategy.
    """
    shape = flow.shape
    expected = grid.regions_shape(shape)
    if strategy.levels.shape != expected:
        raise DimensionMismatch(
            f"strategy grid {strategy.levels.shape} != flow grid {expected}"
        )
    ry, rx = expected
    h, w = shape
    src_levels = strategy.flat()
    n = ry * rx
    centers = np.array(
        [grid.region_center(r, shape) for r in range(n)], dtype=np.float64
    )
    cx, cy = centers[:, 0], centers[:, 1]
    dx = _bilinear(flow.dx.astype(np.float64), cx, cy)
    dy = _bilinear(flow.dy.astype(np.float64), cx, cy)
    ok = _bilinear(flow.valid.astype(np.float64), cx, cy) > 0.999
    tx = cx + dx
    ty = cy + dy
    ok &= (tx >= 0) & (tx <= w - 1) & (ty >= 0) & (ty <= h - 1)

    out = np.zeros(n, dtype=np.int64)
    resolved_ids = np.nonzero(ok)[0]
    for r in resolved_ids:
        out[r] = src_levels[grid.region_of_point(tx[r], ty[r], shape)]
    if resolved_ids.size == 0:
        out[:] = src_levels[0]
    elif resolved_ids.size < n:
        for r in np.nonzero(~ok)[0]:
            d = np.hypot(cx[resolved_ids] - cx[r], cy[resolved_ids] - cy[r])
            # row-major tie-break: argmin picks the first of equal distances
            out[r] = out[resolved_ids[np.argmin(d)]]
    return StrategyMap(out.reshape(ry, rx), grid.region_w, grid.region_h)


def psnr(a: Frame, b: Frame) -> float:
    """Luma PSNR over the logical area, capped at 99.0 dB."""
    if (a.width, a.height) != (b.width, b.height):
        raise DimensionMismatch("frames must share logical dims")
    ya = a.y_logical().astype(np.float64)
    yb = b.y_logical().astype(np.float64)
    mse = float(np.mean((ya - yb) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(255.0**2 / mse), PSNR_CAP)


def write_flo(path, flow: FlowField) -> None:
    """Middlebury .flo interchange file (no validity mask)."""
    h, w = flow.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<fii", FLO_MAGIC, w, h))
        data = np.stack([flow.dx, flow.dy], axis=-1).astype("<f4")
        f.write(data.tobytes())


def read_flo(path, src_id: int = 0, dst_id: int = 0) -> FlowField:
    data = Path(path).read_bytes()
    magic, w, h = struct.unpack_from("<fii", data, 0)
    if abs(magic - FLO_MAGIC) > 1e-3:
        raise BadMagic("not a .flo file")
    arr = np.frombuffer(data, dtype="<f4", count=h * w * 2, offset=12)
    arr = arr.reshape(h, w, 2)
    gy, gx = np.mgrid[0:h, 0:w]
    sx = gx + arr[..., 0]
    sy = gy + arr[..., 1]
    valid = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    return FlowField(arr[..., 0], arr[..., 1], valid, src_id, dst_id)
