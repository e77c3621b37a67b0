"""Acceptance suite: one test per release criterion, stated tolerances.

Run with ``pytest tests/test_acceptance.py -v -s`` to see one line per
criterion with the achieved numbers.
"""

import itertools
import time

import numpy as np
import pytest

from stac import codec, offline, temporal, transport
from stac.dct import dequantize, quantize
from stac.flow import compute_flow, psnr
from stac.frame import Frame
from stac.sensitivity import (
    CoeffGradientMap,
    fake_gradient,
    pixel_to_coeff_gradients,
)
from stac.strategy import (
    StrategyMap,
    achieved_loss,
    expectation_ratio,
    expectation_ratio_monte_carlo,
    optimal_steps,
    select_levels,
)
from stac.synth import (
    moving_shapes_sequence,
    sharp_texture,
    smooth_texture,
    static_sequence,
)
from stac.tables import QuantTable, QuantTableSet, RegionGrid
from stac.toyseg import ToySegmenter

from test_strategy import brute_force_levels


def _report(name, detail):
    print(f"[ACCEPT] {name}: PASS ({detail})")


def test_criterion_optimal_steps(rng):
    t0 = time.perf_counter()
    # exactness: achieved worst case equals the budget
    worst_rel = 0.0
    for _ in range(10):
        gs = CoeffGradientMap(
            rng.normal(size=(16, 16)), rng.normal(size=(8, 8)),
            rng.normal(size=(8, 8)), frame_id=0, chroma_scale=2,
        )
        b = float(rng.uniform(0.5, 100.0))
        steps = optimal_steps(gs, b)
        worst_rel = max(worst_rel, abs(achieved_loss(gs, steps) - b) / b)
    assert worst_rel < 1e-9

    # brute-force grid optimizer agreement for M <= 6
    worst_dev = 0.0
    for m in (2, 3, 4, 5, 6):
        g = np.abs(rng.normal(size=m)) + 0.05
        b = 3.0
        units = 4 * m
        unit = b / units
        best_obj, best_d = -np.inf, None
        for cuts in itertools.combinations(range(1, units), m - 1):
            edges = (0,) + cuts + (units,)
            d = np.diff(edges) * unit
            obj = float(np.sum(np.log2(2.0 * d / g)))
            if obj > best_obj:
                best_obj, best_d = obj, d
        grid_q = 2.0 * best_d / g
        analytic = 2.0 * b / (m * g)
        worst_dev = max(worst_dev, float(np.abs(grid_q - analytic).max()))
    assert worst_dev < 1e-6
    elapsed = time.perf_counter() - t0
    assert elapsed < 1.0
    _report("optimality",
            f"loss rel err {worst_rel:.2e}, grid dev {worst_dev:.2e}, "
            f"{elapsed:.2f}s")


def test_criterion_expectation_theorem():
    t0 = time.perf_counter()
    assert expectation_ratio(2, 2) == 2.0 / 3.0
    diffs = []
    for m, r in ((4, 2), (8, 2), (8, 4)):
        closed = expectation_ratio(m, r)
        mc = expectation_ratio_monte_carlo(m, r, samples=1_000_000, seed=11)
        rel = abs(mc - closed) / closed
        diffs.append((m, r, rel))
        assert rel < 0.05, (m, r, closed, mc)
    for m in (2, 4, 8, 16):
        for r in (2, 4, 8, 16):
            if r <= m and m % r == 0:
                assert expectation_ratio(m, r) < 1.0
    elapsed = time.perf_counter() - t0
    assert elapsed < 10.0
    worst = max(d[2] for d in diffs)
    _report("expectation-theorem",
            f"(2,2) exact 2/3, MC rel diff <= {worst:.3%}, {elapsed:.1f}s")


def test_criterion_selection_matches_exhaustive(rng):
    t0 = time.perf_counter()
    steps = (3, 9, 27, 81)
    tabs = tuple(QuantTable.uniform(s) for s in steps)
    tables = QuantTableSet(luma=tabs, chroma=tabs,
                           b_levels=tuple(float(s) for s in steps))
    grid = RegionGrid(3, 3)
    for i in range(20):
        gs = CoeffGradientMap(
            rng.normal(size=(32, 32)), rng.normal(size=(16, 16)),
            rng.normal(size=(16, 16)), frame_id=i, chroma_scale=2,
        )
        b = float(rng.uniform(10.0, 5000.0))
        got = select_levels(gs, tables, b, grid)
        expect = brute_force_levels(gs, tables, b, grid)
        assert np.array_equal(got.levels, expect), i
    elapsed = time.perf_counter() - t0
    assert elapsed < 5.0
    _report("selection-vs-exhaustive", f"20 fixtures, L=4, {elapsed:.1f}s")


def test_criterion_codec_soundness(rng):
    s = np.arange(-1024, 1025, dtype=np.float64)
    for q in range(1, 256):
        rec = dequantize(quantize(s, q), q)
        assert np.abs(s - rec).max() <= q / 2.0 + 1e-12

    tabs = tuple(QuantTable.uniform(q) for q in (4, 16, 48))
    tables = QuantTableSet(luma=tabs, chroma=tabs,
                           b_levels=(1.0, 4.0, 12.0))
    grid = RegionGrid(3, 3)
    checked = 0
    for sub in ("420", "444"):
        for seed in (1, 2):
            r = np.random.default_rng(seed)
            f = Frame.from_rgb(r.integers(0, 256, (48, 64, 3)).astype(np.uint8),
                               frame_id=seed, subsampling=sub)
            shape = grid.regions_shape(f.y.shape)
            r_max = shape[0] * shape[1]
            off = codec._HEADER.size + (r_max + 1) // 2 + 4
            for level in (1, 2, 3):
                multi = codec.encode_frame(
                    f, StrategyMap.uniform(level, shape), tables)
                single = codec.encode_frame(
                    f, StrategyMap.uniform(1, shape),
                    QuantTableSet.single(tables.luma[level - 1]))
                assert multi[off:] == single[off:]
                checked += 1
    _report("codec-soundness",
            f"exhaustive |ds|<=q/2 sweep, {checked} uniform-vs-single matches")


def test_criterion_flow_accuracy():
    t0 = time.perf_counter()
    epes = []
    for seed in range(5):
        tex = smooth_texture(64 + 32, 96 + 32, seed, sigma=1.5)
        prev = Frame.from_gray(tex[16:80, 16:112], frame_id=1)
        cur = Frame.from_gray(tex[18:82, 19:115], frame_id=2)
        field = compute_flow(prev, cur)
        epes.append(float(np.hypot(field.dx - 3, field.dy - 2).mean()))
        assert epes[-1] < 0.5, seed
    f = Frame.from_gray(sharp_texture(64, 96, 3), frame_id=1)
    zero = compute_flow(f, f.with_id(2))
    zero_mag = float(np.hypot(zero.dx, zero.dy).mean())
    assert zero_mag < 0.05
    elapsed = time.perf_counter() - t0
    assert elapsed < 10.0
    _report("flow-accuracy",
            f"mean EPE {max(epes):.3f}px, static {zero_mag:.4f}px, "
            f"{elapsed:.1f}s")


def _scripted_session(frames, thr):
    grid = RegionGrid(3, 3)
    from stac.flow import SegmentationMap

    state, (f1, strat) = temporal.init(frames[0], grid=grid, thr=thr)
    seg = SegmentationMap(np.zeros(f1.y.shape, dtype=np.uint8), f1.frame_id)
    temporal.handle_feedback(state, seg, strat, f1.frame_id)
    rows = []
    for f in frames[1:]:
        out = temporal.step(state, f)
        rows.append((f.frame_id, out.propagated_psnr, out.is_keyframe))
        if out.is_keyframe:
            temporal.handle_feedback(
                state,
                SegmentationMap(np.zeros(f.y.shape, dtype=np.uint8), f.frame_id),
                strat, f.frame_id)
    return rows


def test_criterion_temporal_trigger():
    # scripted drop: offload exactly at the first frame under 26 dB
    frames, _ = moving_shapes_sequence(30, 96, 64, seed=6)
    rows = _scripted_session(frames, thr=26.0)
    below = [fid for fid, p, _ in rows if p < 26.0]
    keyframes = [fid for fid, _, key in rows if key]
    assert below, "fixture must cross the threshold"
    assert keyframes[0] == below[0]
    for fid, p, key in rows:
        if fid < keyframes[0]:
            assert p >= 26.0 and not key

    static = static_sequence(10, 96, 64, seed=1)
    rows = _scripted_session(static, thr=26.0)
    assert not any(key for _, _, key in rows)  # only the init offload

    rows = _scripted_session(frames[:8], thr=np.inf)
    assert all(key for _, _, key in rows)
    _report("temporal-trigger",
            f"first crossing at frame {keyframes[0]}, static 1 offload, "
            f"thr=inf all offload")


def test_criterion_end_to_end_direction(toy):
    t0 = time.perf_counter()
    frames, labels = moving_shapes_sequence(60, 96, 64, seed=0)
    gbar = offline.corpus_frequency_gradients(frames[:4], toy)
    m = offline.coefficient_count(frames[0])
    b0 = gbar.luma.mean() * m * 16.0
    tables, ladder = offline.build_table_set(gbar, b0, m)
    b = float(ladder.levels[8])  # exactly on the ladder: equal budgets

    reports = {}
    for mode in ("stac", "uniform"):
        link = transport.LoopbackLink(toy, tables, b)
        cfg = transport.DeviceConfig(tables=tables, b=b, mode=mode,
                                     thr=26.0, fps=17.0)
        reports[mode] = transport.device_run(frames, link, cfg, truth=labels)

    stac_r, uni_r = reports["stac"], reports["uniform"]
    assert [r.frame_id for r in stac_r.rows if r.is_keyframe] == [
        r.frame_id for r in uni_r.rows if r.is_keyframe
    ], "keyframe schedule must be identical across modes"
    assert stac_r.uplink_kbps <= uni_r.uplink_kbps
    saving = 100.0 * (1.0 - stac_r.uplink_kbps / uni_r.uplink_kbps)
    miou_s = float(np.mean([r.miou for r in stac_r.rows]))
    miou_u = float(np.mean([r.miou for r in uni_r.rows]))
    elapsed = time.perf_counter() - t0
    assert elapsed < 60.0
    _report("end-to-end-direction",
            f"uplink saving {saving:.2f}% at equal B={b:.1f} "
            f"({stac_r.uplink_kbps:.2f} vs {uni_r.uplink_kbps:.2f} Kbps, "
            f"mIoU {miou_s:.4f} vs {miou_u:.4f}, "
            f"{stac_r.offload_count} keyframes), {elapsed:.1f}s")


def test_criterion_gradient_correctness(toy):
    frames, _ = moving_shapes_sequence(2, 48, 32, seed=9)
    f = frames[0]
    gm, pred = fake_gradient(f, toy)
    planes = [p.astype(np.float64) for p in f.planes]
    grads = [gm.y, gm.u, gm.v]
    rng = np.random.default_rng(5)
    h = 1e-3
    probes = 0
    worst = 0.0
    while probes < 120:
        p = int(rng.integers(0, 3))
        i = int(rng.integers(0, planes[p].shape[0]))
        j = int(rng.integers(0, planes[p].shape[1]))
        bumped = [q.copy() for q in planes]
        bumped[p][i, j] += h
        lp = toy.loss_at(tuple(bumped), pred)
        bumped[p][i, j] -= 2 * h
        lm = toy.loss_at(tuple(bumped), pred)
        fd = (lp - lm) / (2 * h)
        an = float(grads[p][i, j])
        rel = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
        worst = max(worst, rel)
        assert rel < 1e-4, (p, i, j, fd, an)
        probes += 1
    _report("gradient-correctness",
            f"{probes} probes, worst rel err {worst:.2e}")


def test_criterion_transport_equivalence(toy, shapes10, calibrated):
    frames, _ = shapes10
    _, tables, _, b = calibrated
    grid = RegionGrid(3, 3)
    shape = grid.regions_shape(frames[0].y.shape)
    link = transport.LoopbackLink(toy, tables, b)
    hello = transport.SessionHello(tables.digest(), frames[0].width,
                                   frames[0].height, "420", 3, 3,
                                   tables.level_count)
    assert link.request(hello).status == transport.ACK_OK
    sent_bytes = 0
    recv_bytes = 0
    for f in frames[:3]:
        bits = codec.encode_frame(f, StrategyMap.uniform(8, shape), tables)
        msg = transport.OffloadMsg(f.frame_id, bits)
        sent_bytes += len(transport.serialize(msg))
        reply = link.request(msg)
        recv_bytes += len(transport.serialize(reply))
        decoded, _ = codec.decode_frame(bits, tables)
        grad, seg = fake_gradient(decoded, toy)
        expect = select_levels(pixel_to_coeff_gradients(grad), tables, b, grid)
        assert np.array_equal(reply.strategy.levels, expect.levels)
        assert np.array_equal(reply.segmentation.classes, seg.classes)
    hello_bytes = len(transport.serialize(hello))
    ack_bytes = len(transport.serialize(transport.HelloAck(transport.ACK_OK)))
    assert link.up_bytes == hello_bytes + sent_bytes
    assert link.down_bytes == ack_bytes + recv_bytes
    assert link.session.stats.up_bytes == link.up_bytes
    assert link.session.stats.down_bytes == link.down_bytes
    _report("transport-equivalence",
            f"3 keyframes, {sent_bytes}B up / {recv_bytes}B down, "
            f"accounting exact")
