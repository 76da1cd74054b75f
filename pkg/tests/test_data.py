import gzip

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from cisunet import data as D


def test_label_map():
    assert len(D.LABEL_NAMES) == 15
    assert D.class_name(0) == "background" and D.class_name(1) == "Aorta"
    assert D.class_name(14) == "RIIA" and D.class_name(20) == "class_20"


def test_nifti_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    img = D.Volume.from_spacing(rng.normal(size=(5, 6, 7)).astype(np.float32), (0.7, 0.8, 2.5),
                                origin=(-10.0, 3.0, 1.0))
    lbl = D.Volume.from_spacing(rng.integers(0, 15, (5, 6, 7)), (0.7, 0.8, 2.5), is_label=True)
    D.write_volume(img, tmp_path / "img.nii.gz")
    D.write_volume(lbl, tmp_path / "lbl.nii")
    back = D.read_volume(tmp_path / "img.nii.gz")
    assert np.array_equal(back.data, img.data)
    assert np.allclose(back.affine, img.affine)
    back_lbl = D.read_volume(tmp_path / "lbl.nii", is_label=True)
    assert back_lbl.data.dtype == np.int16 and np.array_equal(back_lbl.data, lbl.data)
    assert np.allclose(back_lbl.spacing, (0.7, 0.8, 2.5))


def test_writes_are_byte_stable(tmp_path):
    vol = D.Volume.from_spacing(np.arange(27, dtype=np.float32).reshape(3, 3, 3))
    D.write_volume(vol, tmp_path / "a.nii.gz")
    D.write_volume(vol, tmp_path / "b.nii.gz")
    assert (tmp_path / "a.nii.gz").read_bytes() == (tmp_path / "b.nii.gz").read_bytes()


def test_corrupt_files_raise(tmp_path):
    bad = tmp_path / "bad.nii.gz"
    bad.write_bytes(gzip.compress(b"not a nifti header" * 30))
    with pytest.raises(D.VolumeReadError):
        D.read_volume(bad)
    with pytest.raises(D.VolumeReadError):
        D.read_volume(tmp_path / "missing.nii.gz")


def test_non_integral_labels_rejected(tmp_path):
    D.write_volume(D.Volume.from_spacing(np.full((2, 2, 2), 0.5, np.float32)), tmp_path / "x.nii")
    with pytest.raises(D.VolumeReadError, match="integral"):
        D.read_volume(tmp_path / "x.nii", is_label=True)


def test_resampling_arithmetic():
    assert D.resampled_shape((512, 512, 100), (0.875, 0.875, 3.0), 1.5) == (299, 299, 200)
    vol = D.Volume.from_spacing(np.zeros((30, 15, 8), np.float32), (0.5, 1.0, 2.0))
    out = D.resample(vol, 1.5)
    assert out.shape == (10, 10, 11)
    assert np.allclose(out.spacing, 1.5)
    assert np.allclose(out.origin, vol.origin)


def test_resample_identity_is_exact():
    rng = np.random.default_rng(1)
    vol = D.Volume.from_spacing(rng.normal(size=(4, 4, 4)).astype(np.float32), (1.5,) * 3)
    assert np.array_equal(D.resample(vol, 1.5).data, vol.data)


def test_linear_resampling_preserves_ramps():
    x = np.arange(20, dtype=np.float32)[:, None, None] * np.ones((1, 4, 4), np.float32)
    out = D.resample(D.Volume.from_spacing(x, (1.0, 1.5, 1.5)), 1.5)
    # voxel i of the output sits at 1.5 * i mm of the input
    assert np.allclose(out.data[:12, 0, 0], 1.5 * np.arange(12), atol=1e-5)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.3, 3.0), st.floats(0.3, 3.0), st.floats(0.3, 3.0))
def test_label_sets_never_grow(seed, sx, sy, sz):
    rng = np.random.default_rng(seed)
    lbl = D.Volume.from_spacing(rng.integers(0, 6, (9, 7, 5)), (sx, sy, sz), is_label=True)
    out = D.resample(lbl, 1.5)
    assert set(np.unique(out.data)) <= set(np.unique(lbl.data))
    back = D.restore_geometry(out, lbl)
    assert back.shape == lbl.shape
    assert set(np.unique(back.data)) <= set(np.unique(lbl.data))


def test_restore_geometry_round_trip_on_integer_factor():
    rng = np.random.default_rng(2)
    lbl = D.Volume.from_spacing(rng.integers(0, 4, (6, 6, 6)), (1.5,) * 3, is_label=True)
    fine = D.resample(lbl, 0.75)
    assert fine.shape == (12, 12, 12)
    assert np.array_equal(D.restore_geometry(fine, lbl).data, lbl.data)


def test_normalize_intensity():
    vol = D.Volume.from_spacing(np.array([-1000.0, -175.0, 37.5, 250.0, 3000.0]).reshape(5, 1, 1))
    out = D.normalize_intensity(vol).data.ravel()
    assert np.allclose(out, [0.0, 0.0, 0.5, 1.0, 1.0])
    with pytest.raises(ValueError):
        D.normalize_intensity(vol, (1.0, 1.0))


def _two_blob_case():
    label = np.zeros((32, 32, 32), np.int16)
    label[10:14, 10:14, 10:14] = 1
    image = np.random.default_rng(0).normal(size=label.shape).astype(np.float32)
    return image, label


def test_pos_neg_balance():
    image, label = _two_blob_case()
    patches = D.crop_pos_neg(image, label, (8, 8, 8), (1, 1), np.random.default_rng(3),
                             num_samples=4000)
    frac = np.mean([p.foreground_draw for p in patches])
    assert abs(frac - 0.5) < 0.02
    for p in patches[:200]:
        assert p.image.shape == (8, 8, 8) and p.label.shape == (8, 8, 8)
        if p.foreground_draw:
            assert (p.label > 0).any()


def test_foreground_only_ratio():
    image, label = _two_blob_case()
    patches = D.crop_pos_neg(image, label, (8, 8, 8), (1, 0), np.random.default_rng(4),
                             num_samples=100)
    assert all(p.foreground_draw and (p.label > 0).any() for p in patches)


def test_fallback_when_no_foreground(caplog):
    image = np.zeros((8, 8, 8), np.float32)
    label = np.zeros((8, 8, 8), np.int16)
    patches = D.crop_pos_neg(image, label, (4, 4, 4), (1, 0), np.random.default_rng(5),
                             num_samples=3, source="empty")
    assert all(p.fallback and not p.foreground_draw for p in patches)
    assert "empty" in caplog.text


def test_small_volumes_are_padded():
    image = np.ones((5, 20, 20), np.float32)
    label = np.zeros((5, 20, 20), np.int16)
    label[2, 10, 10] = 1
    (patch,) = D.crop_pos_neg(image, label, (16, 16, 16), (1, 0), np.random.default_rng(6))
    assert patch.image.shape == (16, 16, 16)
    assert patch.pad == (5, 0, 0)
    with pytest.raises(ValueError):
        D.crop_pos_neg(image, label[:4], (4, 4, 4))


def test_phantom_is_deterministic_and_well_formed():
    img_a, lbl_a = D.synthetic_phantom(11, 64, 3)
    img_b, lbl_b = D.synthetic_phantom(11, 64, 3)
    assert np.array_equal(img_a.data, img_b.data) and np.array_equal(lbl_a.data, lbl_b.data)
    assert set(np.unique(lbl_a.data)) == {0, 1, 2}
    assert np.allclose(lbl_a.spacing, 1.5)
    means = [img_a.data[lbl_a.data == c].mean() for c in range(3)]
    assert means[0] < means[1] < means[2]


def test_phantom_foreground_and_connectivity():
    six = ndimage.generate_binary_structure(3, 1)
    fractions = []
    for seed in range(20):
        _, lbl = D.synthetic_phantom(seed, 48, 4)
        fg = lbl.data > 0
        fractions.append(fg.mean())
        assert ndimage.label(fg, structure=six)[1] == 1
        assert ndimage.label(lbl.data == 1, structure=six)[1] == 1
    assert 0.01 < min(fractions) and max(fractions) < 0.1


def test_phantom_argument_checks():
    with pytest.raises(ValueError):
        D.synthetic_phantom(0, 16)
    with pytest.raises(ValueError):
        D.synthetic_phantom(0, 64, 1)


def test_dataset_layout(tmp_path):
    for cid in ("a", "b"):
        img, lbl = D.synthetic_phantom(0, 32, 2)
        D.write_volume(img, tmp_path / "images" / f"{cid}.nii.gz")
        D.write_volume(lbl, tmp_path / "labels" / f"{cid}.nii.gz")
    D.write_volume(img, tmp_path / "images" / "orphan.nii.gz")
    assert D.list_cases(tmp_path) == ["a", "b"]
    with pytest.raises(FileNotFoundError):
        D.case_paths(tmp_path, "orphan")
