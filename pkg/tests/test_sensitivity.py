import numpy as np
import pytest

from stac import codec
from stac.dct import DCT_MATRIX, raster_to_zigzag
from stac.errors import DimensionMismatch, EmptyCorpus, OracleFailure
from stac.flow import SegmentationMap
from stac.frame import Frame
from stac.sensitivity import (
    CoeffGradientMap,
    FrequencyGradients,
    PixelGradientMap,
    average_frequency_gradients,
    coeff_to_pixel_gradients,
    fake_gradient,
    pixel_to_coeff_gradients,
    read_gradient_map,
    write_gradient_map,
)
from stac.strategy import StrategyMap, UpperboundLadder, generate_table_levels
from stac.tables import RegionGrid
from stac.toyseg import ToySegmenter


def _pixel_map(y, u=None, v=None, scale=2):
    if u is None:
        h, w = y.shape
        pad8 = lambda n: max(8, -(-n // 2 // 8) * 8)
        u = np.zeros((pad8(h), pad8(w)))
        v = u.copy()
    return PixelGradientMap(y, u, v, frame_id=1, chroma_scale=scale)


def test_constant_gradient_block_goes_to_dc():
    gm = _pixel_map(np.full((8, 8), 0.25))
    gs = pixel_to_coeff_gradients(gm)
    assert gs.y[0, 0] == pytest.approx(8 * 0.25, rel=1e-6)
    rest = gs.y.copy()
    rest[0, 0] = 0
    assert np.abs(rest).max() < 1e-7


def test_unit_impulse_maps_to_basis_column():
    y = np.zeros((8, 8))
    y[0, 0] = 1.0
    gs = pixel_to_coeff_gradients(_pixel_map(y))
    expect = np.outer(DCT_MATRIX[:, 0], DCT_MATRIX[:, 0])
    assert np.abs(gs.y - expect).max() < 1e-7


def test_conversion_is_an_isometry(rng):
    y = rng.normal(size=(32, 40))
    gs = pixel_to_coeff_gradients(_pixel_map(y))
    for by in range(4):
        for bx in range(5):
            sl = np.s_[by * 8 : by * 8 + 8, bx * 8 : bx * 8 + 8]
            assert np.linalg.norm(gs.y[sl]) == pytest.approx(
                np.linalg.norm(y[sl]), rel=1e-6
            )


def test_conversion_invertible(rng):
    y = rng.normal(size=(16, 16)).astype(np.float32)
    gm = _pixel_map(y)
    back = coeff_to_pixel_gradients(pixel_to_coeff_gradients(gm))
    assert np.abs(back.y - gm.y).max() < 1e-5


def test_conversion_rejects_unpadded():
    with pytest.raises(DimensionMismatch):
        _pixel_map(np.zeros((10, 10)))


def test_finite_difference_on_coefficients(toy, shapes10):
    """dQ/ds via chain rule vs central differences directly on a coefficient."""
    frames, _ = shapes10
    f = frames[0]
    gm, pred = fake_gradient(f, toy)
    gs = pixel_to_coeff_gradients(gm)

    rng = np.random.default_rng(7)
    h = 1e-3
    base_y = f.y.astype(np.float64)
    planes = (base_y, f.u.astype(np.float64), f.v.astype(np.float64))
    for _ in range(10):
        by, bx = rng.integers(0, 4), rng.integers(0, 4)
        u, v = rng.integers(0, 8), rng.integers(0, 8)
        # perturb one DCT coefficient: add h * (its pixel-domain basis image)
        basis = np.outer(DCT_MATRIX[u], DCT_MATRIX[v])
        bump = np.zeros_like(base_y)
        bump[by * 8 : by * 8 + 8, bx * 8 : bx * 8 + 8] = basis
        lp = toy.loss_at((base_y + h * bump, planes[1], planes[2]), pred)
        lm = toy.loss_at((base_y - h * bump, planes[1], planes[2]), pred)
        fd = (lp - lm) / (2 * h)
        an = gs.y[by * 8 + u, bx * 8 + v]
        assert abs(fd - an) <= 1e-4 * max(abs(fd), abs(an), 1e-6)


def test_fake_gradient_zero_at_exact_onehot():
    # zero kernels plus a huge class-0 bias saturate softmax to exactly 1
    seg = ToySegmenter(np.zeros((3, 3, 5, 5)), np.array([900.0, 0.0, 0.0]))
    f = Frame.from_gray(np.full((16, 16), 77, dtype=np.uint8))
    gm, labels = fake_gradient(f, seg)
    assert (labels.classes == 0).all()
    assert np.abs(gm.y).max() == 0.0
    assert np.abs(gm.u).max() == 0.0
    loss, _ = seg.loss_and_gradient(f, labels)
    assert loss == 0.0


def test_fake_gradient_idempotent_bit_for_bit(toy, shapes10):
    frames, _ = shapes10
    f = frames[1]
    gm1, labels1 = fake_gradient(f, toy)
    loss2, gm2 = toy.loss_and_gradient(f, labels1)
    assert np.array_equal(gm1.y, gm2.y)
    assert np.array_equal(gm1.u, gm2.u)
    assert np.array_equal(gm1.v, gm2.v)


def test_fake_gradient_wraps_oracle_errors(toy):
    class Broken:
        class_count = 3

        def predict(self, frame):
            raise RuntimeError("boom")

        def loss_and_gradient(self, frame, labels):
            raise RuntimeError("boom")

    f = Frame.from_gray(np.zeros((8, 8), dtype=np.uint8))
    with pytest.raises(OracleFailure):
        fake_gradient(f, Broken())


def test_fake_slope_tracks_actual_loss_better_than_raw_gradient(toy, shapes10):
    """Increasingly coarse tables: the fake-label linearization at the
    compressed point predicts the measured loss slope better than the raw
    frame's actual-label gradient does."""
    frames, labels = shapes10
    f = frames[0]
    truth = labels[0]
    grid = RegionGrid(3, 3)
    shape = grid.regions_shape(f.y.shape)

    gbar_src = pixel_to_coeff_gradients(fake_gradient(f, toy)[0])
    gbar = average_frequency_gradients([gbar_src])
    m = f.y.size + f.u.size + f.v.size
    scale = gbar.luma.mean() * m

    def coeffs_of(frame):
        from stac.dct import blocks_to_plane, dct_plane

        return [blocks_to_plane(dct_plane(p)) for p in frame.planes]

    base_coeffs = coeffs_of(f)
    raw_gs = pixel_to_coeff_gradients(toy.loss_and_gradient(f, truth)[1])
    actual_loss_raw = toy.loss_at(
        tuple(p.astype(np.float64) for p in f.planes), truth)

    points = []
    for qmid in (6.0, 10.0, 16.0):
        tset = generate_table_levels(
            gbar, UpperboundLadder(scale * qmid / 2, (scale * qmid / 2,)), m)
        smap = StrategyMap.uniform(1, shape)
        dec, _ = codec.decode_frame(codec.encode_frame(f, smap, tset), tset)
        dec_coeffs = coeffs_of(dec)
        ds = sum(
            float(np.abs(a - b).sum())
            for a, b in zip(base_coeffs, dec_coeffs)
        )
        actual_q = toy.loss_at(
            tuple(p.astype(np.float64) for p in dec.planes), truth)
        # linearized predictions of the loss increase from the coefficient error
        raw_pred = sum(
            float(np.abs(g.astype(np.float64) * (a - b)).sum())
            for g, a, b in zip(
                (raw_gs.y, raw_gs.u, raw_gs.v), base_coeffs, dec_coeffs)
        )
        fake_gm, fake_labels = fake_gradient(dec, toy)
        fake_gs = pixel_to_coeff_gradients(fake_gm)
        fake_base = toy.loss_at(
            tuple(p.astype(np.float64) for p in dec.planes), fake_labels)
        fake_pred = sum(
            float(np.abs(g.astype(np.float64) * (a - b)).sum())
            for g, a, b in zip(
                (fake_gs.y, fake_gs.u, fake_gs.v), base_coeffs, dec_coeffs)
        )
        actual_rise = actual_q - actual_loss_raw
        points.append((ds, actual_rise, raw_pred, fake_pred))

    # compare slope errors against the measured loss-vs-|ds| slope
    fake_err = np.mean(
        [abs(fp / ds - ar / ds) for ds, ar, _, fp in points])
    raw_err = np.mean(
        [abs(rp / ds - ar / ds) for ds, ar, rp, _ in points])
    assert fake_err < raw_err


def test_average_frequency_gradients_constant():
    y = np.full((16, 16), 0.5)
    u = np.full((8, 8), 0.5)
    gm = CoeffGradientMap(y, u, u.copy(), frame_id=0, chroma_scale=2)
    gbar = average_frequency_gradients([gm])
    assert np.allclose(gbar.luma, 0.5)
    assert np.allclose(gbar.chroma, 0.5)


def test_average_frequency_gradients_matches_naive_loop(rng):
    maps = []
    for i in range(2):
        maps.append(
            CoeffGradientMap(
                rng.normal(size=(16, 24)),
                rng.normal(size=(8, 16)),
                rng.normal(size=(8, 16)),
                frame_id=i,
                chroma_scale=2,
            )
        )
    gbar = average_frequency_gradients(maps)

    sums = {"luma": np.zeros(64), "chroma": np.zeros(64)}
    counts = {"luma": 0, "chroma": 0}
    for gm in maps:
        for plane, cls in ((gm.y, "luma"), (gm.u, "chroma"), (gm.v, "chroma")):
            for by in range(plane.shape[0] // 8):
                for bx in range(plane.shape[1] // 8):
                    blk = np.abs(
                        plane[by * 8 : by * 8 + 8, bx * 8 : bx * 8 + 8]
                    ).astype(np.float64)
                    sums[cls] += raster_to_zigzag(blk)
                    counts[cls] += 1
    assert np.allclose(gbar.luma, sums["luma"] / counts["luma"], atol=1e-9)
    assert np.allclose(gbar.chroma, sums["chroma"] / counts["chroma"], atol=1e-9)


def test_average_frequency_gradients_zero_and_empty():
    z = CoeffGradientMap(np.zeros((8, 8)), np.zeros((8, 8)), np.zeros((8, 8)),
                         frame_id=0, chroma_scale=1)
    gbar = average_frequency_gradients([z])
    assert (gbar.luma == 0).all() and (gbar.chroma == 0).all()
    with pytest.raises(EmptyCorpus):
        average_frequency_gradients([])


def test_sgrd_roundtrip(tmp_path, rng):
    gm = PixelGradientMap(
        rng.normal(size=(16, 24)).astype(np.float32),
        rng.normal(size=(8, 16)).astype(np.float32),
        rng.normal(size=(8, 16)).astype(np.float32),
        frame_id=42,
        chroma_scale=2,
    )
    path = tmp_path / "g.sgrd"
    write_gradient_map(path, gm)
    back = read_gradient_map(path)
    assert back.frame_id == 42
    assert back.chroma_scale == 2
    assert np.array_equal(back.y, gm.y)
    assert np.array_equal(back.u, gm.u)
    assert np.array_equal(back.v, gm.v)


def test_sfrq_roundtrip(tmp_path, rng):
    gbar = FrequencyGradients(np.abs(rng.normal(size=64)),
                              np.abs(rng.normal(size=64)))
    path = tmp_path / "g.sfrq"
    gbar.save(path)
    back = FrequencyGradients.load(path)
    assert np.array_equal(back.luma, gbar.luma)
    assert np.array_equal(back.chroma, gbar.chroma)
