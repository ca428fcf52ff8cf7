import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssmae3d.data import (AugmentConfig, SyntheticSpec, VolumeFile, VolumeFormatError, augment, bias_field,
                          center_of_mass, class_counts, gamma_transform, generate_synthetic, load_dataset,
                          perturb, preprocess, read_header, read_manifest, read_volume, write_dataset,
                          write_manifest, write_volume)


# ---- volume files ------------------------------------------------------------------

def test_volume_roundtrip_bit_exact(tmp_path):
    data = np.random.default_rng(0).normal(size=(2, 3, 4, 5)).astype(np.float32)
    write_volume(tmp_path / "v.mv3d", VolumeFile(data, {"idh": 1, "codel": 0}))
    back = read_volume(tmp_path / "v.mv3d")
    assert back.data.tobytes() == data.tobytes()
    assert back.labels == {"idh": 1, "codel": 0}


def test_volume_layout_by_hand(tmp_path):
    data = np.arange(24, dtype=np.float32).reshape(1, 2, 3, 4)
    write_volume(tmp_path / "v.mv3d", data)
    buf = (tmp_path / "v.mv3d").read_bytes()
    assert buf[:4] == b"MV3D"
    assert struct.unpack_from("<HH4I", buf, 4) == (1, 1, 1, 2, 3, 4)
    np.testing.assert_array_equal(np.frombuffer(buf, "<f4", 24, 24), np.arange(24))
    assert len(buf) == 24 + 96


def test_truncated_payload_names_lengths(tmp_path):
    p = tmp_path / "v.mv3d"
    write_volume(p, np.ones((1, 4, 4, 4), np.float32))
    p.write_bytes(p.read_bytes()[:-10])
    with pytest.raises(VolumeFormatError, match=r"expected 256 bytes, found 246"):
        read_volume(p)


def test_bad_magic_reports_offset(tmp_path):
    p = tmp_path / "v.mv3d"
    write_volume(p, np.ones((1, 2, 2, 2), np.float32))
    p.write_bytes(b"NOPE" + p.read_bytes()[4:])
    with pytest.raises(VolumeFormatError, match="offset 0"):
        read_volume(p)


def test_header_only_inspection(tmp_path):
    p = tmp_path / "v.mv3d"
    write_volume(p, np.ones((3, 7, 8, 9), np.float32))
    # keep the header only: a payload read would fail, the header read must not
    p.write_bytes(p.read_bytes()[:24])
    assert read_header(p) == (3, 7, 8, 9)
    with pytest.raises(VolumeFormatError):
        read_volume(p)


def test_manifest_roundtrip(tmp_path):
    write_manifest(tmp_path / "m.tsv", [("a.mv3d", "idh", 1), ("b.mv3d", "1p19q", 0)])
    rows = read_manifest(tmp_path / "m.tsv")
    assert [(r[1], r[2]) for r in rows] == [("idh", 1), ("1p19q", 0)]
    assert len(read_manifest(tmp_path / "m.tsv", "idh")) == 1
    (tmp_path / "bad.tsv").write_text("only two\tfields\n")
    with pytest.raises(VolumeFormatError):
        read_manifest(tmp_path / "bad.tsv")


# ---- preprocessing ------------------------------------------------------------------

def test_preprocess_identity_when_target_sized():
    v = np.zeros((2, 8, 8, 8))
    v[:, 2:6, 2:6, 2:6] = np.random.default_rng(1).random((2, 4, 4, 4)) + 1
    v[:, 3:5, 3:5, 3:5] = 2.0  # keep the mass centred
    v = (v + v[:, ::-1, ::-1, ::-1]) / 2
    out = preprocess(v, (8, 8, 8))
    np.testing.assert_allclose(out, (v - v.min()) * 255 / (v.max() - v.min()))


def test_constant_volume_centre_and_empty_volume():
    np.testing.assert_allclose(center_of_mass(np.ones((1, 5, 7, 9))), [2, 3, 4])
    np.testing.assert_allclose(center_of_mass(np.zeros((1, 5, 7, 9))), [2, 3, 4])


def test_point_mass_crop_index_oracle():
    v = np.zeros((1, 64, 64, 64))
    v[0, 10, 20, 30] = 1.0
    out = preprocess(v, (16, 16, 16))
    assert out.shape == (1, 16, 16, 16)
    assert np.argwhere(out[0] == 255).tolist() == [[8, 8, 8]]
    # clamped at the borders
    v = np.zeros((1, 64, 64, 64))
    v[0, 2, 60, 30] = 1.0
    out = preprocess(v, (16, 16, 16))
    assert np.argwhere(out[0] == 255).tolist() == [[2, 12, 8]]


def test_preprocess_pads_with_background():
    v = np.ones((1, 10, 10, 10))
    v[0, 0, 0, 0] = 3.0
    out = preprocess(v, (16, 16, 16))
    assert out.shape == (1, 16, 16, 16)
    assert out[0, :3].max() == 0 and out[0, 13:].max() == 0
    assert out.max() == 255


@settings(max_examples=30, deadline=None)
@given(shape=st.tuples(st.integers(1, 20), st.integers(1, 20), st.integers(1, 20)),
       seed=st.integers(0, 2**31))
def test_preprocess_range_and_size(shape, seed):
    v = np.random.default_rng(seed).random((2,) + shape) * 1000
    out = preprocess(v, (12, 12, 12))
    assert out.shape == (2, 12, 12, 12)
    assert out.min() >= 0 and out.max() <= 255


# ---- augmentation and perturbation ---------------------------------------------------------

def test_identity_augmentation():
    v = np.random.default_rng(2).random((2, 6, 6, 6)) * 255
    cfg = AugmentConfig(p_affine=1, max_deg=0, scale=0, p_noise=1, noise_std=0, p_gamma=1, gamma_range=(1, 1))
    np.testing.assert_array_equal(augment(v, cfg, 0), v)


def test_gamma_formula():
    np.testing.assert_array_equal(gamma_transform(np.array([0.0, 127.5, 255.0]), 1.0), [0.0, 127.5, 255.0])
    assert gamma_transform(np.array([127.5]), 2.0)[0] == pytest.approx(63.75, rel=1e-14)


def test_augment_deterministic_per_seed():
    v = np.random.default_rng(3).random((1, 8, 8, 8)) * 255
    cfg = AugmentConfig(p_affine=1, p_noise=1, p_gamma=1)
    a, b, c = augment(v, cfg, 5), augment(v, cfg, 5), augment(v, cfg, 6)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, c)


def test_zero_perturbations_are_identity():
    v = np.random.default_rng(4).random((2, 6, 7, 8))
    assert perturb(v, "rotation", 0.0).tobytes() == v.tobytes()
    assert perturb(v, "bias_field", 0.0).tobytes() == v.tobytes()
    np.testing.assert_array_equal(bias_field((3, 3, 3), 0.0), 1.0)


def test_rotation_90_swaps_bar_axes():
    v = np.zeros((1, 9, 9, 9))
    v[0, 4, 4, 1:8] = 1.0  # bar along x
    r = perturb(v, "rotation", 90.0, axis=0)
    expect = np.zeros_like(v)
    expect[0, 4, 1:8, 4] = 1.0  # bar along y
    np.testing.assert_array_equal(r, expect)
    w = np.random.default_rng(5).random((2, 6, 8, 8))
    # index-permutation oracle: out[z, y', x'] = in[z, x', N - 1 - y']
    np.testing.assert_allclose(perturb(w, "rotation", 90.0, axis=0), np.rot90(w, 1, axes=(2, 3)), atol=1e-12)


def test_bias_field_bounded_polynomial():
    f = bias_field((5, 6, 7), 0.5, seed=1)
    # 20 monomials of degree <= 3, each bounded by 0.5 on [-1, 1]^3
    assert np.all(np.abs(np.log(f)) <= 20 * 0.5)
    assert not np.allclose(f, 1.0)
    with pytest.raises(ValueError):
        perturb(np.ones((1, 2, 2, 2)), "blur", 1.0)


# ---- synthetic data ------------------------------------------------------------------

def test_separable_by_mean_intensity():
    spec = SyntheticSpec(n=60, dims=(16, 16, 16), texture=0.0, brain_jitter=0.0, noise=0.0,
                         offsets=((0.0, 0.0), (80.0, 80.0)), seed=7)
    items = generate_synthetic(spec)
    means = np.array([v.data.mean() for v, _ in items])
    labels = np.array([y for _, y in items])
    thresholds = np.sort(means)
    best = max(np.mean((means > t) == labels) for t in thresholds)
    assert best >= 0.99


def test_same_seed_same_bytes(tmp_path):
    spec = SyntheticSpec(n=6, dims=(8, 8, 8), seed=3)
    write_dataset(tmp_path / "a", generate_synthetic(spec))
    write_dataset(tmp_path / "b", generate_synthetic(spec))
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
    X, y = load_dataset(tmp_path / "a")
    assert X.shape == (6, 2, 8, 8, 8) and set(y) <= {0, 1}


def test_label_balance_exact():
    assert class_counts(10, (0.3, 0.7)) == [3, 7]
    assert class_counts(7, (0.5, 0.5)) == [4, 3]
    spec = SyntheticSpec(n=10, dims=(8, 8, 8), proportions=(0.3, 0.7))
    assert sorted(y for _, y in generate_synthetic(spec)).count(0) == 3


def test_class_conditional_parameters_differ():
    for spec in (SyntheticSpec(), SyntheticSpec.harder()):
        assert spec.offsets[0] != spec.offsets[1] or spec.class_tissue[0] != spec.class_tissue[1]
    with pytest.raises(ValueError):
        SyntheticSpec(offsets=((1.0, 2.0),))
