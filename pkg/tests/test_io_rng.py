import numpy as np
import pytest

from roughsde import rng
from roughsde.io import FormatError, dumps_arrays, load_arrays, loads_arrays, path_to_csv, save_arrays
from roughsde.timegrid import make_grid


def test_binary_roundtrip(tmp_path, grid64):
    Y = np.random.default_rng(0).standard_normal((3, 65, 2))
    save_arrays(tmp_path / "a.bin", grid64, Y=Y, s=np.array(2.5))
    g, arrs = load_arrays(tmp_path / "a.bin")
    assert g.same_as(grid64)
    np.testing.assert_array_equal(arrs["Y"], Y)
    assert arrs["s"].shape == () and float(arrs["s"]) == 2.5


def test_binary_header_layout(grid64):
    blob = dumps_arrays(grid64)
    assert blob[:8] == b"RSDEBIN1"
    assert int.from_bytes(blob[8:12], "little") == 1


@pytest.mark.parametrize("blob", [b"nope", b"RSDEBIN1\x01\x00\x00\x00\x01"])
def test_binary_corrupt(blob):
    with pytest.raises(FormatError):
        loads_arrays(blob)


def test_csv_export():
    g = make_grid(1.0, 2)
    txt = path_to_csv(g, np.arange(6.0).reshape(2, 3, 1))
    lines = txt.strip().split("\n")
    assert lines[0] == "sample,t,v0"
    assert lines[1] == "0,0.0,0.0" and lines[-1] == "1,1.0,5.0"


def test_streams_prefix_stable(grid64):
    a = rng.brownian_increments(grid64, 10, 2, seed=5)
    b = rng.brownian_increments(grid64, 40, 2, seed=5)
    np.testing.assert_array_equal(a, b[:10])
    c = rng.brownian_increments(grid64, 30, 2, seed=5, first_sample=10)
    np.testing.assert_array_equal(b[10:], c)


def test_streams_differ_by_name_and_seed(grid64):
    a = rng.brownian_increments(grid64, 4, seed=1, name="B")
    assert not np.array_equal(a, rng.brownian_increments(grid64, 4, seed=1, name="rough"))
    assert not np.array_equal(a, rng.brownian_increments(grid64, 4, seed=2, name="B"))


def test_brownian_variance():
    g = make_grid(1.0, 16)
    dB = rng.brownian_increments(g, 4000, seed=3)
    var = dB.var(axis=0).mean()
    assert var == pytest.approx(1 / 16, rel=0.05)


def test_cumulative():
    x = np.ones((2, 3, 1))
    np.testing.assert_array_equal(rng.cumulative(x)[0, :, 0], [0, 1, 2, 3])
