"""Offline table-ladder generation and online per-region level selection.

The offline stage turns frequency-averaged gradient magnitudes into an
L-level ladder of quantization tables, one ladder per plane class, where
level l is sized for loss budget B_l via

    q_n = round(2 * B_l / (M * gbar_n)),  clamped to [1, 255].

The online stage scores, for every region of a frame's block grid, the
worst-case loss increment of every ladder level,

    dQ_max = sum over region coefficients of |g_s| * q / 2,

and picks the level whose increment is closest to the region's share of
the total budget B (ties go to the coarser level).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .dct import BLOCK
from .errors import (
    EmptyCorpus,
    EmptyLadder,
    NonDivisible,
    RegionOutOfBounds,
    Unsatisfiable,
)
from .tables import MAX_LEVELS, PLANE_CHROMA, PLANE_LUMA, QuantTable, QuantTableSet, RegionGrid


@dataclass(frozen=True)
class UpperboundLadder:
    """Total loss budget B plus the ascending per-level budgets {B_l}."""

    total: float
    levels: tuple

    def __post_init__(self):
        if not self.levels:
            raise EmptyLadder("ladder needs at least one level")
        lv = tuple(float(b) for b in self.levels)
        if any(b <= 0 for b in lv):
            raise ValueError("budgets must be positive")
        if any(b >= a for b, a in zip(lv, lv[1:])):
            raise ValueError("budgets must be strictly increasing")
        if not lv[0] <= self.total <= lv[-1]:
            raise ValueError("total budget must lie within the ladder")
        object.__setattr__(self, "levels", lv)

    @staticmethod
    def geometric(total: float, level_count: int = MAX_LEVELS,
                  span: float = 8.0) -> "UpperboundLadder":
        """Geometric ladder from total/span to total*span."""
        if level_count < 1:
            raise EmptyLadder("ladder needs at least one level")
        if level_count == 1:
            return UpperboundLadder(total, (total,))
        lv = np.geomspace(total / span, total * span, level_count)
        return UpperboundLadder(total, tuple(float(b) for b in lv))


@dataclass(frozen=True)
class StrategyMap:
    """One 1-based ladder-level index per region, row-major grid."""

    levels: np.ndarray
    region_w: int = 3
    region_h: int = 3

    def __post_init__(self):
        lv = np.asarray(self.levels, dtype=np.int64)
        if lv.ndim != 2:
            raise ValueError("levels must be a 2D (regions_y, regions_x) grid")
        if lv.size == 0 or lv.min() < 1 or lv.max() > MAX_LEVELS:
            raise ValueError(f"levels must lie in [1, {MAX_LEVELS}]")
        lv = lv.astype(np.uint8)
        lv.setflags(write=False)
        object.__setattr__(self, "levels", lv)

    @property
    def r_max(self) -> int:
        return int(self.levels.size)

    @property
    def grid(self) -> RegionGrid:
        return RegionGrid(self.region_w, self.region_h)

    def flat(self) -> np.ndarray:
        return self.levels.reshape(-1)

    @staticmethod
    def uniform(level: int, regions_shape: tuple[int, int],
                region_w: int = 3, region_h: int = 3) -> "StrategyMap":
        return StrategyMap(
            np.full(regions_shape, level, dtype=np.int64), region_w, region_h
        )

    def pack(self) -> bytes:
        """4 bits per region, row-major; region 2k in the low nibble."""
        flat = self.flat().astype(np.uint8) - 1
        if flat.size % 2:
            flat = np.concatenate([flat, np.zeros(1, dtype=np.uint8)])
        return bytes(flat[0::2] | (flat[1::2] << 4))

    @staticmethod
    def unpack(data: bytes, regions_shape: tuple[int, int],
               region_w: int = 3, region_h: int = 3) -> "StrategyMap":
        ry, rx = regions_shape
        n = ry * rx
        if len(data) < (n + 1) // 2:
            raise ValueError("packed strategy shorter than region count")
        raw = np.frombuffer(data, dtype=np.uint8, count=(n + 1) // 2)
        flat = np.empty(2 * raw.size, dtype=np.uint8)
        flat[0::2] = raw & 0x0F
        flat[1::2] = raw >> 4
        return StrategyMap(
            flat[:n].reshape(ry, rx).astype(np.int64) + 1, region_w, region_h
        )


def generate_table_levels(gbar, ladder: UpperboundLadder, m: int) -> QuantTableSet:
    """Build the L-level table set from frequency-averaged gradients.

    ``m`` is the frame pixel count the budgets refer to.  A zero average
    gradient means the frequency never affects the loss, so it gets the
    coarsest step.
    """
    if m <= 0:
        raise ValueError("pixel count must be positive")
    if not ladder.levels:
        raise EmptyLadder("empty upperbound ladder")

    def ladder_for(g64: np.ndarray) -> tuple:
        g = np.asarray(g64, dtype=np.float64)
        tables = []
        for b in ladder.levels:
            with np.errstate(divide="ignore"):
                q = np.floor(2.0 * b / (m * g) + 0.5)
            q = np.where(g <= 0, 255.0, np.clip(q, 1, 255))
            tables.append(QuantTable(q.astype(np.int64)))
        return tuple(tables)

    return QuantTableSet(
        luma=ladder_for(gbar.luma),
        chroma=ladder_for(gbar.chroma),
        b_levels=tuple(ladder.levels),
    )


def b_search_grid(lo: float, hi: float, points_per_decade: int = 25) -> np.ndarray:
    """Geometric grid of candidate budgets, 25 points per decade."""
    if not 0 < lo < hi:
        raise ValueError("need 0 < lo < hi")
    decades = math.log10(hi / lo)
    n = max(2, int(round(decades * points_per_decade)) + 1)
    return np.geomspace(lo, hi, n)


def search_max_upperbound(evaluate_accuracy, grid: np.ndarray,
                          accuracy_target: float) -> float:
    """Largest grid budget whose measured accuracy stays >= the target.

    ``evaluate_accuracy(b)`` measures task accuracy after compressing with
    the uniform single table sized for budget ``b``.  Accuracy is assumed
    non-increasing in ``b``; the search is a monotone bisection for the
    rightmost satisfying grid point.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 0:
        raise EmptyLadder("empty search grid")
    if evaluate_accuracy(float(grid[-1])) >= accuracy_target:
        return float(grid[-1])
    if evaluate_accuracy(float(grid[0])) < accuracy_target:
        raise Unsatisfiable(
            f"accuracy target {accuracy_target} fails even at budget {grid[0]}"
        )
    lo, hi = 0, grid.size - 1  # pred(lo) True, pred(hi) False
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if evaluate_accuracy(float(grid[mid])) >= accuracy_target:
            lo = mid
        else:
            hi = mid
    return float(grid[lo])


def _abs_blocks(plane_grads: np.ndarray) -> np.ndarray:
    h, w = plane_grads.shape
    return np.abs(
        plane_grads.reshape(h // BLOCK, BLOCK, w // BLOCK, BLOCK).swapaxes(1, 2)
    )


def block_level_losses(gs, tables: QuantTableSet, grid: RegionGrid):
    """Per-region worst-case loss for every ladder level.

    Returns (losses, coeff_counts): ``losses`` has shape (r_max, L) with
    losses[r, l-1] the worst-case increment of region r under level l,
    summed over all planes; ``coeff_counts`` counts the coefficients of
    every plane assigned to each region (used for the budget shares).
    """
    levels = tables.level_count
    r_max = grid.r_max(gs.y.shape)
    losses = np.zeros((r_max, levels), dtype=np.float64)
    counts = np.zeros(r_max, dtype=np.int64)

    planes = ((gs.y, PLANE_LUMA, 1), (gs.u, PLANE_CHROMA, gs.chroma_scale),
              (gs.v, PLANE_CHROMA, gs.chroma_scale))
    for plane, plane_class, scale in planes:
        absg = _abs_blocks(plane)
        q_stack = np.stack(
            [tables.table_for(l, plane_class).raster() for l in
             range(1, levels + 1)]
        )
        # (nby, nbx, L): sum |g| * q / 2 over each block
        block_losses = np.tensordot(absg, q_stack / 2.0, axes=([2, 3], [1, 2]))
        ids = grid.block_region_ids(plane.shape, scale).reshape(-1)
        np.add.at(losses, ids, block_losses.reshape(-1, levels))
        np.add.at(counts, ids, 64)
    return losses, counts


def region_shares(b: float, counts: np.ndarray) -> np.ndarray:
    """Budget share per region, proportional to its coefficient count.

    Equal-size regions get exactly B / r_max; partial edge regions get a
    share scaled by how many coefficients they actually contain.  Shares
    always sum to B.
    """
    total = counts.sum()
    return b * (counts / total)


def region_worst_case_loss(gs, region_id: int, grid: RegionGrid,
                           table: QuantTable,
                           chroma_table: QuantTable | None = None) -> float:
    """Worst-case loss increment of one region under one table pair."""
    r_max = grid.r_max(gs.y.shape)
    if not 0 <= region_id < r_max:
        raise RegionOutOfBounds(f"region {region_id} outside [0, {r_max})")
    tset = QuantTableSet.single(table, chroma_table)
    losses, _ = block_level_losses(gs, tset, grid)
    return float(losses[region_id, 0])


def select_levels(gs, tables: QuantTableSet, b: float,
                  grid: RegionGrid | None = None) -> StrategyMap:
    """Pick, per region, the level whose loss increment is nearest its share.

    Ties break toward the larger (coarser) level, which costs fewer bits at
    the same loss distance.
    """
    grid = grid or RegionGrid()
    losses, counts = block_level_losses(gs, tables, grid)
    shares = region_shares(b, counts)
    dist = np.abs(losses - shares[:, None])
    # argmin returns the first minimum; reversing picks the last (coarsest)
    levels = tables.level_count - np.argmin(dist[:, ::-1], axis=1)
    shape = grid.regions_shape(gs.y.shape)
    return StrategyMap(levels.reshape(shape), grid.region_w, grid.region_h)


def optimal_steps(gs, b: float) -> tuple:
    """Ideal unclamped per-coefficient steps q_i = 2B / (M |g_i|).

    Analysis tool only: returns (steps_y, steps_u, steps_v) float arrays
    shaped like the gradient planes, with +inf where the gradient is zero.
    M is the total coefficient count of the map, so the achieved worst-case
    loss sum(|g| q / 2) equals B exactly when no gradient is zero.
    """
    if b <= 0:
        raise ValueError("budget must be positive")
    m = sum(p.size for p in (gs.y, gs.u, gs.v))
    out = []
    for plane in (gs.y, gs.u, gs.v):
        g = np.abs(np.asarray(plane, dtype=np.float64))
        with np.errstate(divide="ignore"):
            out.append(np.where(g > 0, 2.0 * b / (m * g), np.inf))
    return tuple(out)


def achieved_loss(gs, steps: tuple) -> float:
    """sum(|g| q / 2) over all planes; zero-gradient terms contribute 0."""
    total = 0.0
    for plane, q in zip((gs.y, gs.u, gs.v), steps):
        g = np.abs(np.asarray(plane, dtype=np.float64))
        mask = g > 0
        total += float(np.sum(g[mask] * q[mask]) / 2.0)
    return total


def expectation_ratio(m: int, r_max: int) -> float:
    """Ratio of expected compression objectives without/with equal
    per-region budget shares, for M coefficients split into r_max regions.

    Computed as the exact rational

        [(2M - r)(2M - 2r) ... M]^r / [(2M - 1)(2M - 2) ... M]

    which is < 1 whenever r > 1 and exactly 1 for r = 1.
    """
    if m < 1 or r_max < 1:
        raise ValueError("m and r_max must be >= 1")
    if m % r_max:
        raise NonDivisible(f"r_max {r_max} must divide m {m}")
    num = 1
    for j in range(1, m // r_max + 1):
        num *= 2 * m - j * r_max
    den = 1
    for k in range(m, 2 * m):
        den *= k
    return float(Fraction(num**r_max, den))


def expectation_ratio_monte_carlo(m: int, r_max: int, samples: int = 1_000_000,
                                  seed: int = 0) -> float:
    """Monte-Carlo estimate of the same ratio over uniform simplex draws."""
    if m % r_max:
        raise NonDivisible(f"r_max {r_max} must divide m {m}")
    rng = np.random.default_rng(seed)
    # E1: budgets uniform on the whole simplex sum(d) = 1
    d = rng.dirichlet(np.ones(m), size=samples)
    e1 = float(np.mean(np.prod(d, axis=1)))
    # E2: each region independently uniform on its own sub-simplex
    per = m // r_max
    prod = np.ones(samples)
    for _ in range(r_max):
        dr = rng.dirichlet(np.ones(per), size=samples) / r_max
        prod *= np.prod(dr, axis=1)
    e2 = float(np.mean(prod))
    return e1 / e2
