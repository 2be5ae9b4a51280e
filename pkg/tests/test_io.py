import numpy as np
import pytest

from mambadfuse.data import DatasetError, PairDataset, load_pair_dirs, match_pairs, synthetic_dataset
from mambadfuse.images import UnsupportedImageError, list_images, read_gray, read_image, to_uint8, write_image
from mambadfuse.metrics import en, sf


@pytest.mark.parametrize("ext", [".png", ".pgm"])
def test_gray_roundtrip_is_exact_on_8bit_grid(tmp_path, ext):
    img = np.random.default_rng(0).integers(0, 256, (7, 9)) / 255.0
    write_image(tmp_path / f"g{ext}", img)
    np.testing.assert_array_equal(read_image(tmp_path / f"g{ext}"), img)


@pytest.mark.parametrize("ext", [".png", ".ppm"])
def test_rgb_roundtrip(tmp_path, ext):
    img = np.random.default_rng(1).integers(0, 256, (3, 5, 6)) / 255.0
    write_image(tmp_path / f"c{ext}", img)
    np.testing.assert_array_equal(read_image(tmp_path / f"c{ext}"), img)


def test_read_gray_reduces_rgb_to_luma(tmp_path):
    img = np.zeros((3, 2, 2))
    img[0] = 1.0
    write_image(tmp_path / "red.png", img)
    np.testing.assert_allclose(read_gray(tmp_path / "red.png"), 0.299, atol=1e-12)


def test_sixteen_bit_pgm_rejected(tmp_path):
    p = tmp_path / "deep.pgm"
    p.write_bytes(b"P5\n# comment\n2 2\n65535\n" + bytes(8))
    with pytest.raises(UnsupportedImageError, match="maxval 65535"):
        read_image(p)


def test_write_rejects_bad_input(tmp_path):
    with pytest.raises(UnsupportedImageError):
        write_image(tmp_path / "x.jpg", np.zeros((4, 4)))
    with pytest.raises(UnsupportedImageError):
        write_image(tmp_path / "x.png", np.zeros((2, 4, 4)))


def test_to_uint8_clips_and_rounds():
    assert to_uint8(np.array([-0.5, 0.4 / 255, 0.6 / 255, 1.5])).tolist() == [0, 0, 1, 255]
    assert to_uint8(np.array([0.2])).tolist() == [51]


def test_list_images_sorted_and_filtered(tmp_path):
    for n in ("b.png", "a.pgm", "notes.txt"):
        (tmp_path / n).write_bytes(b"")
    assert [p.name for p in list_images(tmp_path)] == ["a.pgm", "b.png"]
    assert list_images(tmp_path / "missing") == []


def test_match_pairs_and_load(tmp_path):
    da, db = tmp_path / "ir", tmp_path / "vis"
    da.mkdir()
    db.mkdir()
    for n in ("01", "02", "03"):
        write_image(da / f"{n}.png", np.full((4, 4), 0.2))
    for n in ("02", "01", "09"):
        write_image(db / f"{n}.png", np.full((4, 4), 0.6))
    pairs, unmatched = match_pairs(da, db)
    assert [p[0].stem for p in pairs] == ["01", "02"] and unmatched == ["03", "09"]
    with pytest.raises(DatasetError, match="03, 09"):
        load_pair_dirs(da, db)
    with pytest.warns(UserWarning):
        ds = load_pair_dirs(da, db, allow_partial=True)
    assert ds.names == ["01", "02"] and len(ds) == 2


def test_misaligned_pair_rejected(tmp_path):
    with pytest.raises(DatasetError, match="scene"):
        PairDataset([np.zeros((4, 4))], [np.zeros((4, 5))], ["scene"])
    with pytest.raises(DatasetError):
        PairDataset([np.zeros((4, 4))], [])
    with pytest.raises(DatasetError):
        load_pair_dirs(tmp_path / "a", tmp_path / "b")


def test_synthetic_dataset_properties():
    ds = synthetic_dataset(4, 64, seed=3)
    again = synthetic_dataset(4, 64, seed=3)
    for a, b, a2 in zip(ds.a, ds.b, again.a):
        assert a.shape == b.shape == (64, 64)
        assert a.min() >= 0 and a.max() <= 1 and b.min() >= 0 and b.max() <= 1
        assert np.array_equal(a, a2)
        # the visible-like view is the textured one
        assert sf(b) > sf(a) and en(b) > 5.0
    same = synthetic_dataset(2, 32, identical=True)
    assert all(np.array_equal(a, b) for a, b in zip(same.a, same.b))
    assert ds.subset([2, 0]).names == ["pair002", "pair000"]
    with pytest.raises(DatasetError):
        synthetic_dataset(0)
