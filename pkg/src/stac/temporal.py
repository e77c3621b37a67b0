"""Device-side temporal adaptation: cache, propagate, trigger, ingest.

The device caches the last acknowledged keyframe's segmentation, strategy
and raw pixels.  Every new frame extends a composed flow chain from that
keyframe, emits the propagated segmentation, and compares the propagated
keyframe pixels against the actual frame; when that PSNR drops below the
threshold the frame is offloaded as a new keyframe with the propagated
strategy.  Cached entities are only replaced when edge feedback arrives,
so propagation keeps running against the stale cache while offloads are
in flight.

DeviceState is single-writer: callers must serialize step() and
handle_feedback() (an ordered mailbox, typically the transport loop).  No
internal locking is provided or needed under that contract.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import FeedbackMissing, UnknownKeyframe
from .flow import (
    FlowField,
    FlowParams,
    SegmentationMap,
    compose_flow,
    compute_flow,
    psnr,
    warp_frame,
    warp_labels,
    warp_strategy,
)
from .frame import Frame
from .strategy import StrategyMap
from .tables import RegionGrid

DEFAULT_PSNR_THRESHOLD = 26.0


def middle_level(level_count: int) -> int:
    """1-based mid ladder level used for the very first keyframe."""
    return max(1, level_count // 2)


@dataclass(frozen=True)
class StepOutcome:
    """Per-frame result: always a segmentation, an offload when triggered."""

    segmentation: SegmentationMap
    offload: tuple[Frame, StrategyMap] | None
    propagated_psnr: float
    is_keyframe: bool

    def __post_init__(self):
        if self.is_keyframe != (self.offload is not None):
            raise ValueError("offload must be present iff is_keyframe")


@dataclass
class DeviceState:
    """Mutable device cache; see the module docstring for the contract."""

    grid: RegionGrid
    level_count: int
    thr: float = DEFAULT_PSNR_THRESHOLD
    flow_params: FlowParams = FlowParams()
    # a fresh trigger while an offload is pending still offloads by default
    offload_while_pending: bool = True

    keyframe_id: int | None = None
    seg_cache: SegmentationMap | None = None
    strat_cache: StrategyMap | None = None
    frame_cache: Frame | None = None
    chain: FlowField | None = None
    last_frame: Frame | None = None
    pending: list = field(default_factory=list)
    pending_frames: dict = field(default_factory=dict)
    step_flows: dict = field(default_factory=dict)
    offloaded_ids: list = field(default_factory=list)


def init(first: Frame, mid_level: int | None = None,
         grid: RegionGrid | None = None, level_count: int = 16,
         thr: float = DEFAULT_PSNR_THRESHOLD,
         flow_params: FlowParams = FlowParams(),
         offload_while_pending: bool = True
         ) -> tuple[DeviceState, tuple[Frame, StrategyMap]]:
    """Start a session: the first frame always offloads at the mid level."""
    grid = grid or RegionGrid()
    level = mid_level if mid_level is not None else middle_level(level_count)
    shape = grid.regions_shape(first.y.shape)
    strategy = StrategyMap.uniform(level, shape, grid.region_w, grid.region_h)
    state = DeviceState(
        grid=grid,
        level_count=level_count,
        thr=thr,
        flow_params=flow_params,
        offload_while_pending=offload_while_pending,
    )
    state.last_frame = first
    state.pending.append(first.frame_id)
    state.pending_frames[first.frame_id] = first
    state.offloaded_ids.append(first.frame_id)
    return state, (first, strategy)


def step(state: DeviceState, frame: Frame) -> StepOutcome:
    """Process one captured frame; see Alg.-style contract in module doc."""
    if state.seg_cache is None or state.keyframe_id is None:
        raise FeedbackMissing("no edge feedback received yet")
    step_flow = compute_flow(state.last_frame, frame, state.flow_params)
    state.step_flows[frame.frame_id] = step_flow
    state.chain = (
        step_flow if state.chain is None else compose_flow(state.chain, step_flow)
    )
    state.last_frame = frame

    segmentation = warp_labels(state.seg_cache, state.chain).with_id(frame.frame_id)
    propagated = warp_frame(state.frame_cache, state.chain)
    p = psnr(propagated, frame)

    offload = None
    if p < state.thr and (state.offload_while_pending or not state.pending):
        strategy = warp_strategy(state.strat_cache, state.chain, state.grid)
        offload = (frame, strategy)
        state.pending.append(frame.frame_id)
        state.pending_frames[frame.frame_id] = frame
        state.offloaded_ids.append(frame.frame_id)
    return StepOutcome(
        segmentation=segmentation,
        offload=offload,
        propagated_psnr=p,
        is_keyframe=offload is not None,
    )


def handle_feedback(state: DeviceState, seg: SegmentationMap,
                    strategy: StrategyMap, keyframe_id: int) -> bool:
    """Ingest edge feedback; returns True when the cache was updated.

    Duplicate feedback is a no-op; feedback for a keyframe superseded by a
    newer offload is discarded (stale-cache rule stays in force until the
    newest keyframe's feedback lands).
    """
    if keyframe_id == state.keyframe_id:
        return False
    if keyframe_id not in state.pending:
        raise UnknownKeyframe(f"no pending offload for frame {keyframe_id}")
    newest = max(state.offloaded_ids)
    if keyframe_id < newest:
        state.pending.remove(keyframe_id)
        state.pending_frames.pop(keyframe_id, None)
        return False

    state.keyframe_id = keyframe_id
    state.seg_cache = seg
    state.strat_cache = strategy
    state.frame_cache = state.pending_frames.pop(keyframe_id)
    state.pending = [p for p in state.pending if p > keyframe_id]

    # rebase the composed chain onto the new keyframe from retained segments
    chain = None
    last_id = state.last_frame.frame_id if state.last_frame else keyframe_id
    for fid in sorted(state.step_flows):
        if fid <= keyframe_id or fid > last_id:
            continue
        seg_flow = state.step_flows[fid]
        chain = seg_flow if chain is None else compose_flow(chain, seg_flow)
    state.chain = chain
    state.step_flows = {
        fid: fl for fid, fl in state.step_flows.items() if fid > keyframe_id
    }
    return True
