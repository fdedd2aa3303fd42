from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from camgeo.errors import FormatError
from camgeo.io import read_depth, read_image, read_mask, read_pfm, read_ply, write_depth, write_image, write_mask, write_pfm, write_ply
from camgeo.photometric import DepthMap


@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.floats(-1e6, 1e6, width=32)))
def test_pfm_roundtrip_gray(tmp_path_factory, a):
    p = tmp_path_factory.mktemp("pfm") / "a.pfm"
    write_pfm(p, a)
    assert np.array_equal(read_pfm(p), a.astype(np.float64))


def test_pfm_color_and_orientation(tmp_path, rng):
    a = rng.uniform(size=(3, 5, 3)).astype(np.float32)
    write_pfm(tmp_path / "c.pfm", a)
    assert np.array_equal(read_pfm(tmp_path / "c.pfm"), a)
    # rows are stored bottom-up
    g = np.array([[1.0, 2.0], [3.0, 4.0]])
    write_pfm(tmp_path / "g.pfm", g)
    body = (tmp_path / "g.pfm").read_bytes().split(b"\n", 3)[3]
    assert np.frombuffer(body, "<f4").tolist() == [3, 4, 1, 2]


def test_pfm_errors(tmp_path):
    (tmp_path / "x.pfm").write_bytes(b"P6\n1 1\n")
    with pytest.raises(FormatError):
        read_pfm(tmp_path / "x.pfm")
    (tmp_path / "y.pfm").write_bytes(b"Pf\n4 4\n-1.0\n\x00")
    with pytest.raises(FormatError, match="too short"):
        read_pfm(tmp_path / "y.pfm")
    with pytest.raises(FormatError):
        write_pfm(tmp_path / "z.pfm", np.zeros((2, 2, 2)))


def test_image_and_mask_roundtrip(tmp_path, rng):
    img = rng.integers(0, 256, (4, 6, 3)) / 255.0
    write_image(tmp_path / "i.png", img)
    assert np.allclose(read_image(tmp_path / "i.png"), img)
    m = rng.uniform(size=(4, 6)) > 0.5
    write_mask(tmp_path / "m.png", m)
    assert np.array_equal(read_mask(tmp_path / "m.png"), m)


def test_depth_files(tmp_path):
    d = DepthMap(np.array([[1.2346, 0.0], [7.5, 60.0]]), np.array([[True, False], [True, True]]))
    write_depth(tmp_path / "d.pfm", d)
    back = read_depth(tmp_path / "d.pfm")
    assert np.array_equal(back.valid, d.valid)
    assert np.allclose(back.depth[d.valid], d.depth[d.valid], rtol=1e-7)
    write_depth(tmp_path / "d.png", d)
    mm = read_depth(tmp_path / "d.png")
    assert mm.depth[0, 0] == pytest.approx(1.235) and not mm.valid[0, 1]
    assert not read_depth(tmp_path / "d.pfm", d_max=10.0).valid[1, 1]
    with pytest.raises(FormatError):
        write_depth(tmp_path / "d.tif", d)


def test_ply_roundtrip(tmp_path, rng):
    P = rng.normal(size=(20, 3)).astype(np.float32).astype(np.float64)
    C = rng.integers(0, 256, (20, 3)) / 255.0
    write_ply(tmp_path / "c.ply", P, C)
    P2, C2 = read_ply(tmp_path / "c.ply")
    assert np.array_equal(P2, P) and np.allclose(C2, C)
    (tmp_path / "bad.ply").write_bytes(b"hello")
    with pytest.raises(FormatError):
        read_ply(tmp_path / "bad.ply")
