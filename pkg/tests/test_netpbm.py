import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from relseg.errors import DatasetIOError, ValidationError
from relseg.netpbm import read_pbm, read_pgm, write_pbm, write_pgm

shapes = st.tuples(st.integers(1, 19), st.integers(1, 19))


def test_pbm_bytes_by_hand(tmp_path):
    path = tmp_path / "m.pbm"
    write_pbm(path, [[1, 0, 1], [0, 0, 0]])
    assert path.read_bytes() == b"P4\n3 2\n" + bytes([0b10100000, 0])


def test_pgm_bytes_by_hand(tmp_path):
    path = tmp_path / "i.pgm"
    write_pgm(path, [[0.0, 1.0]])
    assert path.read_bytes() == b"P5\n2 1\n65535\n\x00\x00\xff\xff"


@settings(max_examples=40, deadline=None)
@given(shapes.flatmap(lambda s: arrays(bool, s)))
def test_pbm_round_trip_bit_exact(tmp_path_factory, mask):
    path = tmp_path_factory.mktemp("pbm") / "m.pbm"
    write_pbm(path, mask)
    back = read_pbm(path)
    assert back.dtype == bool and np.array_equal(back, mask)


@settings(max_examples=40, deadline=None)
@given(shapes.flatmap(lambda s: arrays(np.float64, s, elements=st.floats(0, 1))))
def test_pgm_round_trip_within_one_level(tmp_path_factory, image):
    path = tmp_path_factory.mktemp("pgm") / "i.pgm"
    write_pgm(path, image)
    assert np.max(np.abs(read_pgm(path) - image)) <= 1 / 65535


def test_8bit_pgm(tmp_path):
    path = tmp_path / "i.pgm"
    write_pgm(path, [[0.0, 0.5, 1.0]], maxval=255)
    assert path.read_bytes().endswith(bytes([0, 128, 255]))
    np.testing.assert_allclose(read_pgm(path), [[0, 128 / 255, 1]])


def test_header_comments_are_skipped(tmp_path):
    path = tmp_path / "c.pbm"
    path.write_bytes(b"P4\n# made by hand\n2 1\n" + bytes([0b01000000]))
    assert read_pbm(path).tolist() == [[False, True]]


def test_pillow_reads_what_we_write(tmp_path):
    Image = pytest.importorskip("PIL.Image")
    mask = np.random.default_rng(0).random((5, 11)) > 0.5
    write_pbm(tmp_path / "m.pbm", mask)
    with Image.open(tmp_path / "m.pbm") as im:
        # PIL mode "1": 0 is black, and PBM stores set pixels as black
        assert np.array_equal(~np.asarray(im, dtype=bool), mask)
    image = np.random.default_rng(1).random((4, 6))
    write_pgm(tmp_path / "i.pgm", image)
    with Image.open(tmp_path / "i.pgm") as im:
        assert np.array_equal(np.asarray(im, dtype=np.int64), np.round(image * 65535).astype(np.int64))


def test_errors_name_the_path(tmp_path):
    missing = tmp_path / "nope.pbm"
    with pytest.raises(DatasetIOError, match="nope.pbm"):
        read_pbm(missing)
    bad = tmp_path / "bad.pgm"
    bad.write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(DatasetIOError, match="bad.pgm"):
        read_pgm(bad)
    short = tmp_path / "short.pbm"
    short.write_bytes(b"P4\n9 3\n\x00")
    with pytest.raises(DatasetIOError, match="short.pbm"):
        read_pbm(short)


def test_out_of_range_image_rejected(tmp_path):
    with pytest.raises(ValidationError):
        write_pgm(tmp_path / "x.pgm", [[1.5]])
