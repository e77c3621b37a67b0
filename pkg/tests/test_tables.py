import numpy as np
import pytest

from stac.errors import BadMagic, TruncatedStream
from stac.strategy import StrategyMap
from stac.tables import QuantTable, QuantTableSet, RegionGrid


def test_quant_table_validation():
    with pytest.raises(ValueError):
        QuantTable(np.zeros(64, dtype=np.int64))
    with pytest.raises(ValueError):
        QuantTable(np.full(64, 256, dtype=np.int64))
    t = QuantTable.uniform(17)
    assert t.raster().shape == (8, 8)
    assert (t.raster() == 17).all()


def test_table_set_requires_monotone_ladder():
    up = (QuantTable.uniform(4), QuantTable.uniform(8))
    down = (QuantTable.uniform(8), QuantTable.uniform(4))
    QuantTableSet(luma=up, chroma=up)
    with pytest.raises(ValueError):
        QuantTableSet(luma=down, chroma=down)


def test_table_set_level_cap():
    many = tuple(QuantTable.uniform(i + 1) for i in range(17))
    with pytest.raises(ValueError):
        QuantTableSet(luma=many, chroma=many)


def test_stbl_roundtrip_and_digest(tmp_path):
    luma = tuple(QuantTable.uniform(q) for q in (3, 9, 27))
    chroma = tuple(QuantTable.uniform(q) for q in (2, 8, 30))
    ts = QuantTableSet(luma=luma, chroma=chroma, b_levels=(1.0, 3.0, 9.0))
    path = tmp_path / "t.stbl"
    ts.save(path)
    ts2 = QuantTableSet.load(path)
    assert ts2.level_count == 3
    assert ts2.b_levels == (1.0, 3.0, 9.0)
    assert ts.digest() == ts2.digest()
    for a, b in zip(ts.luma + ts.chroma, ts2.luma + ts2.chroma):
        assert np.array_equal(a.steps, b.steps)


def test_stbl_rejects_garbage(tmp_path):
    with pytest.raises(BadMagic):
        QuantTableSet.deserialize(b"NOPE" + bytes(300))
    with pytest.raises(TruncatedStream):
        QuantTableSet.deserialize(b"STBL\x01\x00\x02\x00" + bytes(10))


def test_region_grid_shapes():
    grid = RegionGrid(3, 3)
    # 96x64 luma: 12x8 blocks -> 4x3 regions
    assert grid.regions_shape((64, 96)) == (3, 4)
    assert grid.r_max((64, 96)) == 12
    # trailing partial regions at the edges
    assert grid.regions_shape((80, 104)) == (4, 5)


def test_region_grid_block_ids_luma():
    grid = RegionGrid(3, 3)
    ids = grid.block_region_ids((64, 96))
    assert ids.shape == (8, 12)
    assert ids[0, 0] == 0 and ids[0, 3] == 1 and ids[3, 0] == 4
    assert ids.max() == 11


def test_region_grid_chroma_colocation():
    grid = RegionGrid(3, 3)
    ids = grid.block_region_ids((32, 48), chroma_scale=2)
    # chroma block (0, 2) sits at luma block (0, 4) -> region column 1
    assert ids[0, 2] == 1
    assert ids.max() <= grid.r_max((64, 96)) - 1


def test_region_centers_and_point_lookup():
    grid = RegionGrid(3, 3)
    shape = (64, 96)
    cx, cy = grid.region_center(0, shape)
    assert (cx, cy) == (11.5, 11.5)
    assert grid.region_of_point(cx, cy, shape) == 0
    assert grid.region_of_point(95.0, 63.0, shape) == 11


def test_strategy_pack_unpack_roundtrip(rng):
    levels = rng.integers(1, 17, (5, 7))
    smap = StrategyMap(levels, 3, 3)
    packed = smap.pack()
    assert len(packed) == (35 + 1) // 2
    back = StrategyMap.unpack(packed, (5, 7), 3, 3)
    assert np.array_equal(back.levels, smap.levels)


def test_strategy_pack_is_four_bits_per_region():
    smap = StrategyMap(np.full((1, 5), 16, dtype=np.int64), 3, 3)
    assert len(smap.pack()) == 3
