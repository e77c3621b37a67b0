import io

import numpy as np
import pytest

PIL = pytest.importorskip("PIL.Image")

from stac.flow import psnr
from stac.frame import Frame
from stac.jpegio import export_jpeg
from stac.synth import smooth_texture
from stac.tables import QuantTable


def _frame(sub):
    rgb = np.stack(
        [smooth_texture(48, 64, s, sigma=2.0) for s in (1, 2, 3)], axis=-1
    )
    return Frame.from_rgb(rgb, frame_id=1, subsampling=sub)


@pytest.mark.parametrize("sub", ["420", "444"])
def test_exported_jpeg_decodes_in_pillow(sub):
    f = _frame(sub)
    data = export_jpeg(f, QuantTable.uniform(6), QuantTable.uniform(10))
    img = PIL.open(io.BytesIO(data))
    assert img.size == (f.width, f.height)
    decoded = np.asarray(img.convert("RGB"))
    ref = f.to_rgb()
    mse = float(np.mean((decoded.astype(float) - ref.astype(float)) ** 2))
    assert 10 * np.log10(255**2 / max(mse, 1e-9)) > 28.0


def test_exported_jpeg_matches_own_decode_closely():
    f = _frame("420")
    table = QuantTable.uniform(8)
    data = export_jpeg(f, table)
    img = PIL.open(io.BytesIO(data))
    arr = np.asarray(img.convert("YCbCr"))[..., 0]
    got = Frame.from_gray(arr, frame_id=1)
    assert psnr(got, f) > 30.0
