"""Unit tests for the synthetic long-tailed dataset generator."""

import numpy as np
import pytest

from dualmargin.synthdata import (
    TEST,
    TRAIN,
    UNKNOWN,
    VAL,
    SyntheticSpec,
    class_count_schedule,
    export_csv,
    generate,
    import_csv,
    open_set_partition,
    split,
)


class TestCountSchedule:
    def test_balanced(self):
        spec = SyntheticSpec(num_classes=5, imbalance_ratio=1.0, head_count=100)
        np.testing.assert_array_equal(class_count_schedule(spec), [100] * 5)

    def test_geometric_example(self):
        spec = SyntheticSpec(num_classes=3, head_count=1000, imbalance_ratio=100.0)
        np.testing.assert_array_equal(class_count_schedule(spec), [1000, 100, 10])

    def test_realism_preset(self):
        spec = SyntheticSpec(num_classes=10, head_count=6269, imbalance_ratio=1044.8)
        counts = class_count_schedule(spec)
        assert counts[0] == 6269
        assert counts[-1] == 6

    def test_ratio_respected_within_one(self):
        for ratio in (10.0, 100.0, 333.0):
            spec = SyntheticSpec(num_classes=7, head_count=900, imbalance_ratio=ratio)
            counts = class_count_schedule(spec)
            realized = counts.max() / counts.min()
            ideal_min = 900 / ratio
            assert abs(counts.min() - ideal_min) <= 1.0
            assert counts.max() == 900
            assert realized > 1

    def test_monotone_non_increasing(self):
        for decay in ("geometric", "zipf"):
            spec = SyntheticSpec(num_classes=12, head_count=500,
                                 imbalance_ratio=50.0, decay=decay)
            counts = class_count_schedule(spec)
            assert np.all(np.diff(counts) <= 0)

    def test_invalid_ratio(self):
        with pytest.raises(ValueError, match="imbalance_ratio"):
            class_count_schedule(SyntheticSpec(imbalance_ratio=0.5))


class TestGenerate:
    def test_deterministic(self):
        spec = SyntheticSpec(num_classes=4, dim=6, head_count=30, seed=5)
        a = generate(spec)
        b = generate(spec)
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_counts_match_schedule(self):
        spec = SyntheticSpec(num_classes=3, head_count=100, imbalance_ratio=10.0,
                             dim=4, seed=0)
        ds = generate(spec)
        counts = np.bincount(ds.labels, minlength=3)
        np.testing.assert_array_equal(counts, class_count_schedule(spec))

    def test_clusters_near_unit_means(self):
        spec = SyntheticSpec(num_classes=3, dim=8, head_count=200,
                             imbalance_ratio=2.0, cluster_spread=0.05, seed=1)
        ds = generate(spec)
        for j in range(3):
            mean = ds.features[ds.labels == j].mean(axis=0)
            assert abs(np.linalg.norm(mean) - 1.0) < 0.05

    def test_infeasible_separation(self):
        spec = SyntheticSpec(num_classes=50, dim=2, min_angle=1.5, head_count=5)
        with pytest.raises(ValueError, match="increase dim"):
            generate(spec)

    def test_validation(self):
        with pytest.raises(ValueError, match="2 classes"):
            generate(SyntheticSpec(num_classes=1))
        with pytest.raises(ValueError, match="dim"):
            generate(SyntheticSpec(dim=1))
        with pytest.raises(ValueError, match="cluster_spread"):
            generate(SyntheticSpec(cluster_spread=0.0))


class TestSplit:
    def test_ten_sample_class(self):
        spec = SyntheticSpec(num_classes=2, head_count=10, imbalance_ratio=1.0,
                             dim=4, seed=2)
        ds = split(generate(spec))
        for j in range(2):
            mask = ds.labels == j
            assert np.sum(ds.split[mask] == VAL) == 1
            assert np.sum(ds.split[mask] == TEST) == 1
            assert np.sum(ds.split[mask] == TRAIN) == 8

    def test_tiny_class_warns_and_goes_to_train(self):
        spec = SyntheticSpec(num_classes=3, head_count=200, imbalance_ratio=100.0,
                             dim=4, seed=3)
        ds = generate(spec)
        assert np.sum(ds.labels == 2) == 2
        with pytest.warns(UserWarning, match="class 2"):
            out = split(ds)
        assert np.all(out.split[out.labels == 2] == TRAIN)

    def test_stratification_fractions(self):
        spec = SyntheticSpec(num_classes=4, head_count=400, imbalance_ratio=4.0,
                             dim=4, seed=4)
        ds = split(generate(spec))
        for j in range(4):
            mask = ds.labels == j
            n = mask.sum()
            frac_test = np.sum(ds.split[mask] == TEST) / n
            assert abs(frac_test - 0.1) <= 1.0 / n + 1e-9

    def test_deterministic(self):
        spec = SyntheticSpec(num_classes=3, head_count=50, imbalance_ratio=2.0,
                             dim=4, seed=6)
        a = split(generate(spec))
        b = split(generate(spec))
        np.testing.assert_array_equal(a.split, b.split)

    def test_bad_fractions(self):
        ds = generate(SyntheticSpec(num_classes=2, head_count=20,
                                    imbalance_ratio=1.0, dim=4))
        with pytest.raises(ValueError, match="fractions"):
            split(ds, (0.8, 0.3, 0.3))


class TestOpenSetPartition:
    def _dataset(self):
        spec = SyntheticSpec(num_classes=10, head_count=40, imbalance_ratio=4.0,
                             dim=6, seed=7)
        return split(generate(spec))

    def test_zero_unknown(self):
        ds = open_set_partition(self._dataset(), 0, seed=1)
        assert np.all(ds.known_mask)
        assert ds.indices(UNKNOWN).size == 0

    def test_three_unknown_classes(self):
        ds = open_set_partition(self._dataset(), 3, seed=1)
        assert np.sum(~ds.known_mask) == 3
        unknown_classes = np.flatnonzero(~ds.known_mask)
        train_labels = ds.labels[ds.indices(TRAIN)]
        assert not np.any(np.isin(train_labels, unknown_classes))
        assert np.all(np.isin(ds.labels[ds.indices(UNKNOWN)], unknown_classes))

    def test_deterministic(self):
        a = open_set_partition(self._dataset(), 3, seed=9)
        b = open_set_partition(self._dataset(), 3, seed=9)
        np.testing.assert_array_equal(a.known_mask, b.known_mask)

    def test_too_many_unknown(self):
        with pytest.raises(ValueError, match="unknown_class_count"):
            open_set_partition(self._dataset(), 10, seed=0)


class TestCsvRoundtrip:
    def test_exact_roundtrip(self, tmp_path):
        spec = SyntheticSpec(num_classes=3, head_count=20, imbalance_ratio=2.0,
                             dim=4, seed=8)
        ds = open_set_partition(split(generate(spec)), 1, seed=2)
        csv_path = str(tmp_path / "data.csv")
        sidecar = str(tmp_path / "data.json")
        export_csv(ds, csv_path, sidecar)
        back = import_csv(csv_path, sidecar)
        np.testing.assert_array_equal(back.features, ds.features)
        np.testing.assert_array_equal(back.labels, ds.labels)
        np.testing.assert_array_equal(back.split, ds.split)
        np.testing.assert_array_equal(back.known_mask, ds.known_mask)
        assert back.spec == ds.spec
