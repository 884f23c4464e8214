"""Synthetic generator, long-tail subsampling, augmentations, CSV round trips."""

import numpy as np
import pytest

from ncc.data import (
    AugmentSpec, Dataset, SyntheticSpec, augment, gen_vmf_mixture,
    load_csv, make_long_tailed, save_csv,
)


def test_mixture_shapes_labels_and_unit_rows():
    spec = SyntheticSpec(num_classes=3, ambient_dim=8, kappa=30.0, per_class=40, seed=1)
    ds, means = gen_vmf_mixture(spec)
    assert ds.features.shape == (120, 8)
    assert means.shape == (3, 8)
    np.testing.assert_allclose(np.linalg.norm(ds.features, axis=1), 1.0, atol=1e-9)
    np.testing.assert_array_equal(np.bincount(ds.labels), [40, 40, 40])
    np.testing.assert_array_equal(ds.ids, np.arange(120))


def test_mean_separation_guard_holds():
    for seed in range(5):
        spec = SyntheticSpec(num_classes=4, ambient_dim=32, kappa=50.0, per_class=5, seed=seed)
        _, means = gen_vmf_mixture(spec)
        gram = np.abs(means @ means.T)
        np.fill_diagonal(gram, 0.0)
        assert gram.max() < 0.5


def test_two_means_on_circle_respect_guard():
    spec = SyntheticSpec(num_classes=2, ambient_dim=2, kappa=10.0, per_class=3, seed=0)
    _, means = gen_vmf_mixture(spec)
    assert abs(means[0] @ means[1]) < 0.5


def test_infeasible_separation_raises():
    # 40 directions cannot be pairwise separated on the circle
    spec = SyntheticSpec(num_classes=40, ambient_dim=2, kappa=5.0, per_class=1, seed=0)
    with pytest.raises(ValueError, match="attempts"):
        gen_vmf_mixture(spec)


def test_high_kappa_recovers_means():
    spec = SyntheticSpec(num_classes=3, ambient_dim=16, kappa=200.0, per_class=250, seed=2)
    ds, means = gen_vmf_mixture(spec)
    for c in range(3):
        emp = ds.features[ds.labels == c].mean(axis=0)
        emp /= np.linalg.norm(emp)
        assert emp @ means[c] > 0.99


def test_generator_is_deterministic():
    spec = SyntheticSpec(num_classes=2, ambient_dim=4, kappa=20.0, per_class=10, seed=3)
    a, ma = gen_vmf_mixture(spec)
    b, mb = gen_vmf_mixture(spec)
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(ma, mb)


def test_per_class_kappa_and_counts():
    spec = SyntheticSpec(num_classes=2, ambient_dim=6, kappa=(10.0, 400.0),
                         per_class=(30, 7), seed=4)
    ds, means = gen_vmf_mixture(spec)
    assert len(ds) == 37
    np.testing.assert_array_equal(np.bincount(ds.labels), [30, 7])
    # the concentrated class hugs its mean far more tightly
    spread0 = (ds.features[ds.labels == 0] @ means[0]).mean()
    spread1 = (ds.features[ds.labels == 1] @ means[1]).mean()
    assert spread1 > spread0


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(num_classes=0, ambient_dim=4)
    with pytest.raises(ValueError):
        SyntheticSpec(num_classes=2, ambient_dim=1)
    with pytest.raises(ValueError):
        SyntheticSpec(num_classes=2, ambient_dim=4, kappa=-1.0)
    with pytest.raises(ValueError):
        SyntheticSpec(num_classes=2, ambient_dim=4, per_class=(5, 5, 5))


def test_long_tail_counts_follow_exponential_profile():
    spec = SyntheticSpec(num_classes=10, ambient_dim=8, kappa=20.0, per_class=500, seed=5)
    ds, _ = gen_vmf_mixture(spec)
    lt = make_long_tailed(ds, ratio=0.1, seed=0)
    counts = np.bincount(lt.labels)
    assert counts[0] == 500
    assert counts[-1] == 50
    ratios = counts[1:] / counts[:-1]
    assert (ratios <= 1.0 + 1e-9).all()
    got = counts.min() / counts.max()
    assert got == pytest.approx(0.1, abs=0.01)


def test_long_tail_ratio_one_is_identity():
    spec = SyntheticSpec(num_classes=3, ambient_dim=4, kappa=15.0, per_class=20, seed=6)
    ds, _ = gen_vmf_mixture(spec)
    same = make_long_tailed(ds, ratio=1.0, seed=9)
    np.testing.assert_array_equal(same.features, ds.features)
    np.testing.assert_array_equal(same.labels, ds.labels)


def test_long_tail_keeps_at_least_one_per_class():
    spec = SyntheticSpec(num_classes=5, ambient_dim=4, kappa=15.0, per_class=3, seed=7)
    ds, _ = gen_vmf_mixture(spec)
    lt = make_long_tailed(ds, ratio=0.01, seed=1)
    assert (np.bincount(lt.labels, minlength=5) >= 1).all()


def test_long_tail_validation():
    spec = SyntheticSpec(num_classes=2, ambient_dim=4, per_class=5, seed=8)
    ds, _ = gen_vmf_mixture(spec)
    with pytest.raises(ValueError):
        make_long_tailed(ds, ratio=0.0, seed=0)
    unlabeled = Dataset(features=ds.features, labels=None, ids=ds.ids)
    with pytest.raises(ValueError):
        make_long_tailed(unlabeled, ratio=0.5, seed=0)


def test_augment_identity_when_all_knobs_off():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(10, 6))
    spec = AugmentSpec(noise_std=0.0, mask_prob=0.0, scale_range=(1.0, 1.0))
    out = augment(x, spec, np.random.default_rng(1))
    np.testing.assert_array_equal(out, x)


def test_augment_masking_rate_and_scale_bounds():
    rng = np.random.default_rng(2)
    x = np.ones((2000, 50))
    spec = AugmentSpec(noise_std=0.0, mask_prob=0.3, scale_range=(1.0, 1.0))
    out = augment(x, spec, rng)
    zero_rate = (out == 0).mean()
    assert abs(zero_rate - 0.3) < 0.01

    spec2 = AugmentSpec(noise_std=0.0, mask_prob=0.0, scale_range=(0.5, 2.0))
    out2 = augment(x, spec2, np.random.default_rng(3))
    row_scale = out2[:, 0]
    assert (row_scale >= 0.5).all() and (row_scale <= 2.0).all()
    np.testing.assert_allclose(out2, row_scale[:, None] * x, atol=1e-15)


def test_augment_noise_magnitude():
    rng = np.random.default_rng(4)
    x = np.zeros((5000, 8))
    spec = AugmentSpec(noise_std=0.2, mask_prob=0.0, scale_range=(1.0, 1.0))
    out = augment(x, spec, rng)
    assert abs(out.std() - 0.2) < 0.01


def test_augment_deterministic_given_rng():
    x = np.random.default_rng(5).normal(size=(4, 3))
    spec = AugmentSpec()
    a = augment(x, spec, np.random.default_rng(6))
    b = augment(x, spec, np.random.default_rng(6))
    np.testing.assert_array_equal(a, b)


def test_augment_spec_validation():
    with pytest.raises(ValueError):
        AugmentSpec(noise_std=-0.1)
    with pytest.raises(ValueError):
        AugmentSpec(mask_prob=1.0)
    with pytest.raises(ValueError):
        AugmentSpec(scale_range=(0.0, 1.0))
    with pytest.raises(ValueError):
        AugmentSpec(scale_range=(2.0, 1.0))


def test_csv_roundtrip_labeled_bitwise(tmp_path):
    ds = Dataset(features=np.array([[0.1, -1.5e-7], [2.0 / 3.0, 1e300]]),
                 labels=np.array([4, 0]), ids=np.arange(2))
    path = tmp_path / "two.csv"
    save_csv(path, ds)
    back = load_csv(path)
    np.testing.assert_array_equal(back.features, ds.features)
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert path.read_text().splitlines()[0] == "label,f0,f1"


def test_csv_roundtrip_unlabeled(tmp_path):
    ds = Dataset(features=np.random.default_rng(7).normal(size=(5, 3)),
                 labels=None, ids=np.arange(5))
    path = tmp_path / "plain.csv"
    save_csv(path, ds)
    back = load_csv(path)
    assert back.labels is None
    np.testing.assert_array_equal(back.features, ds.features)
    assert path.read_text().splitlines()[0] == "f0,f1,f2"


def test_csv_errors_carry_line_numbers(tmp_path):
    ragged = tmp_path / "ragged.csv"
    ragged.write_text("label,f0,f1\n0,1.0,2.0\n1,3.0\n")
    with pytest.raises(ValueError, match="line 3"):
        load_csv(ragged)

    bad_cell = tmp_path / "bad.csv"
    bad_cell.write_text("f0,f1\n1.0,2.0\noops,4.0\n")
    with pytest.raises(ValueError, match="line 3"):
        load_csv(bad_cell)

    empty = tmp_path / "empty.csv"
    empty.write_text("")
    with pytest.raises(ValueError, match="empty"):
        load_csv(empty)

    header_only = tmp_path / "header.csv"
    header_only.write_text("f0,f1\n")
    with pytest.raises(ValueError, match="no data rows"):
        load_csv(header_only)

    bad_header = tmp_path / "badheader.csv"
    bad_header.write_text("x0,x1\n1.0,2.0\n")
    with pytest.raises(ValueError, match="line 1"):
        load_csv(bad_header)


def test_csv_load_speed(tmp_path):
    import time
    rng = np.random.default_rng(8)
    ds = Dataset(features=rng.normal(size=(10_000, 64)),
                 labels=rng.integers(0, 4, size=10_000), ids=np.arange(10_000))
    path = tmp_path / "big.csv"
    save_csv(path, ds)
    t0 = time.perf_counter()
    back = load_csv(path)
    assert time.perf_counter() - t0 < 1.0
    assert back.features.shape == (10_000, 64)


def test_nearest_mean_label_preserved_under_default_augment():
    spec = SyntheticSpec(num_classes=4, ambient_dim=32, kappa=50.0, per_class=250, seed=0)
    ds, means = gen_vmf_mixture(spec)
    views = augment(ds.features, AugmentSpec(), np.random.default_rng(0))
    nearest = np.argmax(views @ means.T, axis=1)
    assert (nearest == ds.labels).mean() >= 0.99
