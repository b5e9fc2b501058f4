import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spineseg.volume_io import (
    SizeMismatchError, Volume, VolumeFormatError, as_mask, load_volume, read_pgm,
    save_mask, save_volume, slice_frame,
)


def write_header(path, dims, dtype="u8", data_file="v.vraw", spacing="1 1 1"):
    path.write_text(
        f"dims = {dims}\nspacing_mm = {spacing}\ndtype = {dtype}\n"
        f"data_file = {data_file}\nbyte_order = little\n"
    )


def test_load_reads_x_fastest(tmp_path):
    write_header(tmp_path / "v.vhdr", "2 2 1")
    (tmp_path / "v.vraw").write_bytes(bytes([0, 1, 2, 3]))
    v = load_volume(tmp_path / "v.vhdr")
    assert (v.width, v.height, v.depth) == (2, 2, 1)
    assert v.value(1, 0, 0) == 1
    assert v.value(0, 1, 0) == 2


def test_load_size_mismatch(tmp_path):
    write_header(tmp_path / "v.vhdr", "3 3 2")
    (tmp_path / "v.vraw").write_bytes(bytes(17))
    with pytest.raises(SizeMismatchError):
        load_volume(tmp_path / "v.vhdr")


def test_load_missing_and_malformed(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_volume(tmp_path / "nope.vhdr")
    write_header(tmp_path / "v.vhdr", "2 two 1")
    (tmp_path / "v.vraw").write_bytes(bytes(4))
    with pytest.raises(VolumeFormatError):
        load_volume(tmp_path / "v.vhdr")
    write_header(tmp_path / "w.vhdr", "2 2 1", dtype="f64")
    with pytest.raises(VolumeFormatError):
        load_volume(tmp_path / "w.vhdr")


def test_big_endian_rejected(tmp_path):
    (tmp_path / "v.vhdr").write_text(
        "dims = 1 1 1\nspacing_mm = 1 1 1\ndtype = u8\ndata_file = v.vraw\nbyte_order = big\n"
    )
    (tmp_path / "v.vraw").write_bytes(b"\x00")
    with pytest.raises(VolumeFormatError):
        load_volume(tmp_path / "v.vhdr")


def test_raw_bytes_are_little_endian(tmp_path):
    v = Volume(np.array([[[1, -2]]], dtype=np.int16), (1, 1, 1))
    save_volume(v, tmp_path / "v.vhdr")
    assert (tmp_path / "v.vraw").read_bytes() == b"\x01\x00\xfe\xff"


def test_round_trip_i16(tmp_path):
    rng = np.random.default_rng(0)
    values = rng.integers(-32768, 32767, (4, 8, 8), dtype=np.int16)
    v = Volume(values, (0.5, 0.5, 2.0))
    save_volume(v, tmp_path / "v.vhdr")
    back = load_volume(tmp_path / "v.vhdr")
    assert back.values.tobytes() == values.tobytes()
    assert back.spacing == (0.5, 0.5, 2.0)


@settings(max_examples=30, deadline=None)
@given(
    dtype=st.sampled_from(["u8", "i16", "f32"]),
    dims=st.tuples(st.integers(1, 5), st.integers(1, 6), st.integers(1, 7)),
    seed=st.integers(0, 2**32 - 1),
    spacing=st.tuples(*[st.floats(0.01, 10.0)] * 3),
)
def test_round_trip_bit_exact(tmp_path_factory, dtype, dims, seed, spacing):
    rng = np.random.default_rng(seed)
    d, h, w = dims
    if dtype == "f32":
        values = rng.standard_normal((d, h, w)).astype(np.float32)
    elif dtype == "i16":
        values = rng.integers(-32768, 32767, (d, h, w), dtype=np.int16)
    else:
        values = rng.integers(0, 255, (d, h, w), dtype=np.uint8)
    path = tmp_path_factory.mktemp("rt") / "v.vhdr"
    save_volume(Volume(values, spacing), path)
    back = load_volume(path)
    assert back.values.dtype == values.dtype
    assert back.values.tobytes() == values.tobytes()
    assert back.spacing == spacing


def test_volume_invariants():
    with pytest.raises(ValueError):
        Volume(np.zeros((1, 2, 2), np.uint8), (1, 0, 1))
    with pytest.raises(ValueError):
        Volume(np.zeros((0, 2, 2), np.uint8))
    with pytest.raises(VolumeFormatError):
        Volume(np.zeros((1, 2, 2), np.float64))


def test_save_mask_zero_raw(tmp_path):
    mask = as_mask(np.zeros((1, 4, 4)))
    save_mask(mask, tmp_path / "m.vhdr")
    assert (tmp_path / "m.vraw").read_bytes() == bytes(16)


def test_save_mask_pgm_scaling(tmp_path):
    labels = np.array([[[1, 2], [3, 4]]], dtype=np.uint8)
    files = save_mask(as_mask(labels, alphabet=(1, 2, 3, 4)), tmp_path / "lm.vhdr", pgm=True)
    assert [f.name for f in files] == ["lm_0000.pgm"]
    img = read_pgm(files[0])
    assert img.tolist() == [[63, 126], [189, 252]]


def test_save_mask_rejects_bad_alphabet(tmp_path):
    with pytest.raises(ValueError):
        save_mask(Volume(np.array([[[0, 7]]], np.uint8)), tmp_path / "m.vhdr", alphabet=(0, 1))
    with pytest.raises(ValueError):
        as_mask(np.array([[[0, 2]]]))


def test_mask_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    mask = as_mask(rng.integers(0, 2, (3, 9, 7)))
    save_mask(mask, tmp_path / "m.vhdr")
    assert np.array_equal(load_volume(tmp_path / "m.vhdr").values, mask.values)


def test_slice_frame_whole_volume():
    v = Volume(np.arange(6, dtype=np.uint8).reshape(1, 2, 3))
    f = slice_frame(v, 0)
    assert f.frame_index == 0
    assert np.array_equal(f.values, v.values[0])


def test_slice_frame_out_of_range():
    v = Volume(np.zeros((2, 3, 3), np.uint8))
    with pytest.raises(IndexError):
        slice_frame(v, 2)
    with pytest.raises(IndexError):
        slice_frame(v, -1)


def test_slice_frame_matches_indexing_and_is_a_copy():
    rng = np.random.default_rng(1)
    v = Volume(rng.integers(0, 255, (3, 5, 5), dtype=np.uint8))
    f = slice_frame(v, 2)
    for y in range(5):
        for x in range(5):
            assert f.values[y, x] == v.value(x, y, 2)
    before = v.values.copy()
    f.values[:] = 0
    assert np.array_equal(v.values, before)
