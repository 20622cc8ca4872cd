import numpy as np
import numpy.testing as npt
import pytest

from boxseg.volume import (
    DTYPE_NUMPY,
    SliceBox,
    SliceBoxSet,
    SoftLabelVolume,
    Volume,
    VolumeShape,
    binarize,
    connected_components,
    load_box_set,
    load_volume,
    save_box_set,
    save_volume,
)

from conftest import bfs_components


def test_shape_invariants():
    assert VolumeShape(2, 3, 4).voxels == 24
    with pytest.raises(ValueError):
        VolumeShape(0, 3, 4)
    with pytest.raises(ValueError):
        VolumeShape(2, -1, 4)


def test_volume_validation():
    with pytest.raises(ValueError):
        Volume.from_array(np.zeros((2, 2)), "uint8-label")  # not 3D
    with pytest.raises(ValueError):
        Volume.from_array(np.full((1, 1, 1), 2, dtype=np.uint8), "uint8-label")
    with pytest.raises(ValueError):
        Volume.from_array(np.full((1, 1, 1), 1.5, dtype=np.float32), "float32-soft")
    with pytest.raises(ValueError):
        Volume.from_array(np.zeros((1, 1, 1), np.int16), "int16-HU", spacing_mm=(0, 1, 1))
    with pytest.raises(ValueError):
        Volume.from_array(np.zeros((1, 1, 1), np.int16), "weird-dtype")


def test_load_identity_decode(tmp_path):
    header = tmp_path / "v.json"
    header.write_text(
        '{"shape":[2,2,2],"dtype":"uint8-label","spacing_mm":[1,1,1],"data_file":"v.raw"}'
    )
    (tmp_path / "v.raw").write_bytes(b"\x01" * 8)
    vol = load_volume(header)
    npt.assert_array_equal(vol.data, np.ones((2, 2, 2), dtype=np.uint8))


def test_load_length_mismatch(tmp_path):
    header = tmp_path / "v.json"
    header.write_text(
        '{"shape":[2,2,2],"dtype":"uint8-label","spacing_mm":[1,1,1],"data_file":"v.raw"}'
    )
    (tmp_path / "v.raw").write_bytes(b"\x01" * 7)
    with pytest.raises(ValueError, match="length mismatch"):
        load_volume(header)


def test_load_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_volume(tmp_path / "nope.json")


def test_save_single_zero_label(tmp_path):
    vol = Volume.from_array(np.zeros((1, 1, 1), dtype=np.uint8), "uint8-label")
    save_volume(vol, tmp_path / "z")
    assert (tmp_path / "z.raw").read_bytes() == b"\x00"


def test_save_records_spacing(tmp_path):
    vol = Volume.from_array(np.zeros((1, 1, 1), dtype=np.int16), "int16-HU", (5.0, 0.8, 0.8))
    save_volume(vol, tmp_path / "s")
    reloaded = load_volume(tmp_path / "s.json")
    assert reloaded.spacing_mm == (5.0, 0.8, 0.8)


@pytest.mark.parametrize("dtype", sorted(DTYPE_NUMPY))
def test_roundtrip_bit_exact(tmp_path, rng, dtype):
    shape = (3, 5, 4)
    if dtype == "int16-HU":
        data = rng.integers(-1024, 1024, size=shape, dtype=np.int16)
    elif dtype == "uint8-label":
        data = rng.integers(0, 2, size=shape, dtype=np.uint8)
    else:
        data = rng.random(size=shape, dtype=np.float32)
    vol = Volume.from_array(data, dtype, (2.5, 0.7, 0.7))
    save_volume(vol, tmp_path / "rt")
    back = load_volume(tmp_path / "rt.json")
    assert back.dtype == dtype
    assert back.data.tobytes() == vol.data.tobytes()


def test_binarize_strict_greater():
    soft = SoftLabelVolume(np.array([[[0.2, 0.5, 0.7]]], dtype=np.float32))
    npt.assert_array_equal(binarize(soft, 0.5).data, [[[0, 0, 1]]])


def test_binarize_all_zero():
    soft = SoftLabelVolume(np.zeros((2, 2, 2), dtype=np.float32))
    assert binarize(soft, 0.5).data.sum() == 0


def test_binarize_threshold_domain():
    soft = SoftLabelVolume(np.zeros((1, 1, 1), dtype=np.float32))
    for bad in (0.0, 1.0, -0.2, 1.5):
        with pytest.raises(ValueError):
            binarize(soft, bad)


def test_binarize_matches_elementwise_oracle(rng):
    data = rng.random((4, 8, 8), dtype=np.float32)
    soft = SoftLabelVolume(data)
    for th in (0.25, 0.5, 0.75):
        expected = np.array([[[1 if v > th else 0 for v in row] for row in sl] for sl in data])
        npt.assert_array_equal(binarize(soft, th).data, expected)


def test_binarize_monotone_in_threshold(rng):
    soft = SoftLabelVolume(rng.random((3, 6, 6), dtype=np.float32))
    lo = binarize(soft, 0.3).data
    hi = binarize(soft, 0.7).data
    assert np.all(hi <= lo)


def test_connected_components_4_vs_8():
    grid = np.array([[1, 0], [0, 1]], dtype=np.uint8)
    _, sizes4 = connected_components(grid, 4)
    assert sorted(sizes4[1:]) == [1, 1]
    labels8, sizes8 = connected_components(grid, 8)
    assert sizes8[1:].tolist() == [2]
    assert labels8[0, 0] == labels8[1, 1] == 1


def test_connected_components_empty_and_ids():
    labels, sizes = connected_components(np.zeros((3, 3), dtype=np.uint8), 4)
    assert labels.sum() == 0 and sizes.tolist() == [0]
    grid = np.array([[1, 1, 0, 1], [0, 0, 0, 1]], dtype=np.uint8)
    labels, sizes = connected_components(grid, 4)
    # raster-scan order: top-left blob is component 1
    assert labels[0, 0] == 1 and labels[0, 3] == 2
    assert sizes.tolist() == [0, 2, 2]


def test_connected_components_match_bfs_oracle(rng):
    for conn in (4, 8):
        for _ in range(25):
            grid = (rng.random((32, 32)) < 0.4).astype(np.uint8)
            labels, sizes = connected_components(grid, conn)
            ref_labels, ref_sizes = bfs_components(grid, conn)
            # identical partition up to relabelling; raster order makes it exact
            npt.assert_array_equal(labels, ref_labels)
            npt.assert_array_equal(sizes, ref_sizes)
            assert sizes[1:].sum() == grid.sum()


def test_boxset_validation_and_io(tmp_path):
    shape = VolumeShape(4, 16, 16)
    boxes = SliceBoxSet(
        shape,
        {
            1: [SliceBox(1, 2, 2, 5, 5)],
            2: [SliceBox(2, 0, 0, 3, 6), SliceBox(2, 5, 8, 9, 15)],
        },
    )
    path = save_box_set(boxes, tmp_path / "boxes.json")
    back = load_box_set(path)
    assert back.shape == shape
    assert back.boxes[2][1].col_max == 15
    with pytest.raises(ValueError, match="disjoint"):
        SliceBoxSet(shape, {0: [SliceBox(0, 0, 0, 4, 4), SliceBox(0, 2, 2, 6, 6)]})
    with pytest.raises(ValueError):
        SliceBoxSet(shape, {0: [SliceBox(0, 0, 0, 20, 4)]})
    with pytest.raises(ValueError):
        SliceBoxSet(shape, {9: [SliceBox(9, 0, 0, 1, 1)]})


def test_soft_label_volume_range():
    with pytest.raises(ValueError):
        SoftLabelVolume(np.full((1, 1, 1), 1.2, dtype=np.float32))
    soft = SoftLabelVolume(np.full((1, 1, 1), 0.5, dtype=np.float32))
    vol = soft.to_volume((2.0, 1.0, 1.0))
    assert vol.dtype == "float32-soft"
    assert SoftLabelVolume.from_volume(vol).data[0, 0, 0] == 0.5
