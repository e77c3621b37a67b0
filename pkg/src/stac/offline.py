"""Offline stage: calibrate frequency gradients, search the loss budget,
and produce the table-set ladder used online.

Everything here runs at the edge ahead of time, on calibration frames that
need not overlap the content served online.
"""

from __future__ import annotations

import numpy as np

from . import codec
from .frame import Frame
from .metrics import mean_iou, pixel_accuracy
from .sensitivity import (
    FrequencyGradients,
    average_frequency_gradients,
    fake_gradient,
    pixel_to_coeff_gradients,
)
from .strategy import (
    StrategyMap,
    UpperboundLadder,
    b_search_grid,
    generate_table_levels,
    search_max_upperbound,
)
from .tables import QuantTableSet, RegionGrid


def corpus_frequency_gradients(frames, oracle) -> FrequencyGradients:
    """Fake-gradient calibration: average |g_s| over a frame corpus."""
    maps = []
    for f in frames:
        gm, _ = fake_gradient(f, oracle)
        maps.append(pixel_to_coeff_gradients(gm))
    return average_frequency_gradients(maps)


def coefficient_count(frame: Frame) -> int:
    """Total DCT coefficients across planes.

    This is the M handed to table generation: it makes a table sized for
    budget b realize a whole-frame worst case of about b when a frame's
    gradients match the calibration averages, so the uniform baseline and
    the per-region selection work against the same realized budget.
    """
    return frame.y.size + frame.u.size + frame.v.size


def uniform_table_set(gbar: FrequencyGradients, b: float, m: int
                      ) -> QuantTableSet:
    """Single-table set sized for exactly budget b (the uniform baseline)."""
    return generate_table_levels(gbar, UpperboundLadder(b, (b,)), m)


def evaluate_uniform_accuracy(frames, truth, oracle, gbar: FrequencyGradients,
                              b: float, metric: str = "pixel",
                              region_grid: RegionGrid | None = None) -> float:
    """Mean accuracy of the oracle on frames compressed with the b-budget
    uniform table."""
    grid = region_grid or RegionGrid()
    m = coefficient_count(frames[0])
    tset = uniform_table_set(gbar, b, m)
    shape = grid.regions_shape(frames[0].y.shape)
    strat = StrategyMap.uniform(1, shape, grid.region_w, grid.region_h)
    scores = []
    for f, t in zip(frames, truth):
        decoded, _ = codec.decode_frame(codec.encode_frame(f, strat, tset), tset)
        _, pred = oracle.predict(decoded)
        if metric == "miou":
            scores.append(mean_iou(pred.classes, t.classes, oracle.class_count))
        else:
            scores.append(pixel_accuracy(pred.classes, t.classes))
    return float(np.mean(scores))


def search_upperbound_for_accuracy(frames, truth, oracle,
                                   gbar: FrequencyGradients,
                                   accuracy_target: float,
                                   b_lo: float = 1.0, b_hi: float = 1e4,
                                   metric: str = "pixel") -> float:
    """Largest budget B on the geometric grid meeting the accuracy target."""
    grid = b_search_grid(b_lo, b_hi)
    cache: dict[float, float] = {}

    def evaluate(b: float) -> float:
        if b not in cache:
            cache[b] = evaluate_uniform_accuracy(frames, truth, oracle, gbar,
                                                 b, metric)
        return cache[b]

    return search_max_upperbound(evaluate, grid, accuracy_target)


def build_table_set(gbar: FrequencyGradients, b: float, m: int, *,
                    level_count: int = 16, span: float = 8.0
                    ) -> tuple[QuantTableSet, UpperboundLadder]:
    """The shipped offline artifact: L-level ladder centered on budget b."""
    ladder = UpperboundLadder.geometric(b, level_count, span)
    return generate_table_levels(gbar, ladder, m), ladder
