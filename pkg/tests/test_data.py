import numpy as np
import pytest

from tpmamba.data import (
    AugmentConfig,
    VolumeRecord,
    augment,
    gen_synth,
    list_dataset,
    load_record,
    make_synthetic_record,
    preprocess,
    read_rvol,
    resample,
    write_rvol,
)
from tpmamba.errors import InputError


# ---------------------------------------------------------------------------
# RVOL format


def test_rvol_round_trip_f32(tmp_path, rng):
    arr = rng.standard_normal((4, 5, 6)).astype(np.float32)
    path = tmp_path / "vol.img.rvol"
    write_rvol(path, arr, (1.0, 2.0, 3.0))
    back, spacing = read_rvol(path)
    np.testing.assert_array_equal(back, arr)
    assert spacing == (1.0, 2.0, 3.0)


def test_rvol_round_trip_u8(tmp_path, rng):
    arr = rng.integers(0, 4, (3, 4, 5)).astype(np.uint8)
    path = tmp_path / "lab.lbl.rvol"
    write_rvol(path, arr, (1.0, 1.0, 1.0))
    back, _ = read_rvol(path)
    np.testing.assert_array_equal(back, arr)


def test_rvol_bad_magic(tmp_path):
    path = tmp_path / "bad.rvol"
    path.write_bytes(b"NOPE" + b"\x00" * 40)
    with pytest.raises(InputError, match="not an RVOL"):
        read_rvol(path)


def test_rvol_truncated(tmp_path, rng):
    arr = rng.standard_normal((4, 4, 4)).astype(np.float32)
    path = tmp_path / "t.img.rvol"
    write_rvol(path, arr, (1, 1, 1))
    blob = path.read_bytes()
    path.write_bytes(blob[:-8])
    with pytest.raises(InputError, match="truncated"):
        read_rvol(path)


# ---------------------------------------------------------------------------
# preprocessing


def test_preprocess_hu_anchors():
    vox = np.full((2, 2, 2), -300.0, dtype=np.float32)
    vox[0, 0, 0] = 25.0
    vox[0, 0, 1] = 250.0
    vox[0, 1, 0] = 500.0
    rec = preprocess(VolumeRecord(voxels=vox, spacing=(1, 1, 1)))
    assert rec.voxels[1, 1, 1] == 0.0  # -300 clipped to -200
    assert rec.voxels[0, 0, 0] == 0.5  # (25+200)/450
    assert rec.voxels[0, 0, 1] == 1.0
    assert rec.voxels[0, 1, 0] == 1.0  # clipped from above


def test_preprocess_resamples_to_isotropic(rng):
    vox = rng.uniform(-200, 250, (10, 8, 8)).astype(np.float32)
    labels = rng.integers(0, 2, (10, 8, 8)).astype(np.uint8)
    rec = preprocess(VolumeRecord(voxels=vox, spacing=(2.0, 1.0, 1.0), labels=labels))
    assert rec.voxels.shape == (20, 8, 8)
    assert rec.labels.shape == (20, 8, 8)
    assert rec.spacing == (1.0, 1.0, 1.0)


def test_preprocess_idempotent(rng):
    vox = rng.uniform(-400, 400, (6, 6, 6)).astype(np.float32)
    once = preprocess(VolumeRecord(voxels=vox, spacing=(1.5, 1.0, 1.0)))
    twice = preprocess(once)
    np.testing.assert_array_equal(once.voxels, twice.voxels)
    assert once.spacing == twice.spacing


def test_preprocess_rejects_bad_spacing(rng):
    with pytest.raises(InputError):
        VolumeRecord(voxels=np.zeros((2, 2, 2), dtype=np.float32), spacing=(0.0, 1, 1))


def test_resample_nearest_keeps_labels_integral(rng):
    labels = rng.integers(0, 5, (6, 6, 6)).astype(np.uint8)
    out = resample(labels, (1.5, 1.5, 1.5), "nearest")
    assert out.dtype == np.uint8
    assert set(np.unique(out)) <= set(np.unique(labels))


# ---------------------------------------------------------------------------
# augmentation


def _unit_record(rng, shape=(96, 96, 96)):
    vox = rng.uniform(0, 1, shape).astype(np.float32)
    labels = rng.integers(0, 2, shape).astype(np.uint8)
    return VolumeRecord(voxels=vox, spacing=(1, 1, 1), labels=labels)


def test_augment_disabled_is_identity(rng):
    rec = _unit_record(rng, (96, 96, 96))
    cfg = AugmentConfig(crop=(96, 96, 96), flip=False, contrast=False, scale_jitter=False)
    out = augment(rec, np.random.default_rng(0), cfg)
    np.testing.assert_array_equal(out.voxels, rec.voxels)
    np.testing.assert_array_equal(out.labels, rec.labels)


def test_double_flip_is_identity(rng):
    vox = rng.uniform(0, 1, (4, 4, 4)).astype(np.float32)
    flipped = np.flip(np.flip(vox, axis=1), axis=1)
    np.testing.assert_array_equal(flipped, vox)


def test_augment_contrast_gamma_one_identity(rng):
    rec = _unit_record(rng, (40, 40, 40))

    class FixedRng:
        def uniform(self, lo, hi):
            return 1.0  # gamma = 1

        def integers(self, lo, hi):
            return 0

        def random(self):
            return 1.0  # never flip

    cfg = AugmentConfig(crop=(40, 40, 40), flip=True, contrast=True, scale_jitter=False)
    out = augment(rec, FixedRng(), cfg)
    np.testing.assert_allclose(out.voxels, rec.voxels, atol=1e-6)


def test_augment_crop_and_pad(rng):
    rec = _unit_record(rng, (20, 50, 50))
    cfg = AugmentConfig(crop=(32, 32, 32), flip=False, contrast=False, scale_jitter=False)
    out = augment(rec, np.random.default_rng(3), cfg)
    assert out.voxels.shape == (32, 32, 32)
    assert out.labels.shape == (32, 32, 32)


def test_augment_labels_follow_voxels(rng):
    vox = np.zeros((40, 40, 40), dtype=np.float32)
    labels = np.zeros((40, 40, 40), dtype=np.uint8)
    vox[10:20, 5:15, 25:35] = 1.0
    labels[10:20, 5:15, 25:35] = 1
    rec = VolumeRecord(voxels=vox, spacing=(1, 1, 1), labels=labels)
    cfg = AugmentConfig(crop=(32, 32, 32), flip=True, contrast=False, scale_jitter=False)
    out = augment(rec, np.random.default_rng(9), cfg)
    # label mask must still coincide with the bright voxels
    np.testing.assert_array_equal(out.labels == 1, out.voxels > 0.5)


# ---------------------------------------------------------------------------
# synthetic data


def test_gen_synth_deterministic(tmp_path):
    d1, d2 = tmp_path / "a", tmp_path / "b"
    gen_synth(2, (32, 32, 32), 3, seed=5, out_dir=d1)
    gen_synth(2, (32, 32, 32), 3, seed=5, out_dir=d2)
    for name in ("case000.img.rvol", "case000.lbl.rvol", "case001.img.rvol"):
        assert (d1 / name).read_bytes() == (d2 / name).read_bytes()


def test_gen_synth_class_fractions(rng):
    rec = make_synthetic_record((48, 48, 48), 3, np.random.default_rng(0))
    total = rec.labels.size
    for k in (1, 2):
        assert (rec.labels == k).sum() >= 0.01 * total


def test_gen_synth_intensity_range_and_dims(tmp_path):
    gen_synth(1, (32, 32, 32), 2, seed=1, out_dir=tmp_path)
    rec = load_record(tmp_path / "case000.img.rvol", tmp_path / "case000.lbl.rvol")
    assert rec.voxels.shape == rec.labels.shape
    assert rec.voxels.min() >= -200.0
    assert rec.voxels.max() <= 300.0
    assert rec.voxels.max() > 250.0  # clipping is exercised downstream


def test_gen_synth_validates_args(tmp_path):
    with pytest.raises(InputError):
        gen_synth(1, (16, 16, 16), 2, 0, tmp_path)
    with pytest.raises(InputError):
        gen_synth(1, (32, 32, 32), 1, 0, tmp_path)


def test_list_dataset_pairs(tmp_path):
    gen_synth(2, (32, 32, 32), 2, seed=0, out_dir=tmp_path)
    pairs = list_dataset(tmp_path)
    assert len(pairs) == 2
    assert all(lab is not None for _, lab in pairs)
    with pytest.raises(InputError):
        list_dataset(tmp_path / "missing")
