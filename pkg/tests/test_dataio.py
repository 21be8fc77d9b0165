import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from refined.dataio import (
    FeatureTable,
    SplitIndex,
    apply_normalization,
    clean_samples,
    denormalize,
    fit_normalization,
    load_feature_table,
    normalize_features,
    split_samples,
)
from refined.errors import DataError, DuplicateFeatureError, EmptyTableError

from conftest import table_from_values, random_table


def write_csv(tmp_path, text, name="t.csv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


class TestLoad:
    def test_four_rows_five_features(self, tmp_path):
        path = write_csv(
            tmp_path,
            "id,a,b,c,d,e,y\n"
            "s1,1,2,3,4,5,10\n"
            "s2,2,3,4,5,6,11\n"
            "s3,3,4,5,6,7,12\n"
            "s4,4,5,6,7,8,13\n",
        )
        t = load_feature_table(path, "y")
        assert t.n == 4 and t.p == 5
        assert t.feature_names == ["a", "b", "c", "d", "e"]
        assert t.sample_ids == ["s1", "s2", "s3", "s4"]
        np.testing.assert_array_equal(t.response, [10, 11, 12, 13])
        np.testing.assert_array_equal(t.values[0], [1, 2, 3, 4, 5])

    def test_na_cell_kept_as_missing(self, tmp_path):
        path = write_csv(
            tmp_path,
            "id,a,b,c,d,y\ns1,NA,2,3,4,1\ns2,1,2,3,4,2\ns3,1,2,3,4,3\n",
        )
        t = load_feature_table(path, "y")
        assert np.isnan(t.values[0, 0])
        assert not np.isnan(t.values[1:]).any()

    def test_duplicate_header_rejected(self, tmp_path):
        path = write_csv(tmp_path, "id,f1,f1,f2,f3,y\ns1,1,2,3,4,5\n")
        with pytest.raises(DuplicateFeatureError):
            load_feature_table(path, "y")

    def test_missing_response_column(self, tmp_path):
        path = write_csv(tmp_path, "id,a,b,c,d\ns1,1,2,3,4\n")
        with pytest.raises(DataError, match="response column"):
            load_feature_table(path, "y")

    def test_non_numeric_cell(self, tmp_path):
        path = write_csv(
            tmp_path,
            "id,a,b,c,d,y\ns1,oops,2,3,4,1\ns2,1,2,3,4,2\ns3,1,2,3,4,3\n",
        )
        with pytest.raises(DataError, match="oops"):
            load_feature_table(path, "y")

    def test_missing_response_value(self, tmp_path):
        path = write_csv(
            tmp_path,
            "id,a,b,c,d,y\ns1,1,2,3,4,\ns2,1,2,3,4,2\ns3,1,2,3,4,3\n",
        )
        with pytest.raises(DataError, match="missing response"):
            load_feature_table(path, "y")

    def test_tab_delimiter(self, tmp_path):
        text = "id\ta\tb\tc\td\ty\n" + "".join(
            f"s{i}\t1\t2\t3\t4\t{i}\n" for i in range(3)
        )
        t = load_feature_table(write_csv(tmp_path, text), "y", delimiter="\t")
        assert t.p == 4


class TestClean:
    def test_sample_above_threshold_dropped(self):
        values = np.ones((4, 10))
        values[0, 0] = np.nan
        values[0, 1] = np.nan  # 2 of 10 = 20% > 10%
        t = table_from_values(values)
        out = clean_samples(t, 0.10)
        assert out.n == 3
        assert out.sample_ids == t.sample_ids[1:]

    def test_clean_table_is_identity(self):
        t = random_table(6, 5, seed=1)
        out = clean_samples(t)
        np.testing.assert_array_equal(out.values, t.values)
        assert out.sample_ids == t.sample_ids

    def test_exactly_at_threshold_retained(self):
        values = np.ones((4, 10))
        values[0, 0] = np.nan  # exactly 10%
        out = clean_samples(table_from_values(values), 0.10)
        assert out.n == 4

    def test_zeros_count_toward_threshold(self):
        values = np.ones((4, 10))
        values[0, 0] = 0.0
        values[0, 1] = np.nan  # jointly 20%
        out = clean_samples(table_from_values(values), 0.10)
        assert out.n == 3

    def test_all_dropped_raises(self):
        values = np.zeros((3, 4))
        with pytest.raises(EmptyTableError):
            clean_samples(table_from_values(values), 0.10)

    def test_median_imputation(self):
        values = np.array(
            [
                [np.nan, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1],
                [2.0, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1],
                [4.0, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1],
                [6.0, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1],
            ]
        )
        out = clean_samples(table_from_values(values), 0.10)
        assert out.values[0, 0] == 4.0  # median of retained non-missing 2,4,6

    def test_idempotent(self):
        rng = np.random.default_rng(5)
        for trial in range(20):
            values = rng.uniform(0.5, 2.0, size=(12, 10))
            mask = rng.uniform(size=values.shape) < 0.08
            values[mask] = np.nan
            zeros = rng.uniform(size=values.shape) < 0.05
            values[zeros] = 0.0
            t = table_from_values(values)
            try:
                once = clean_samples(t)
            except EmptyTableError:
                continue
            twice = clean_samples(once)
            np.testing.assert_array_equal(once.values, twice.values)
            assert once.sample_ids == twice.sample_ids


class TestNormalize:
    def test_minmax_linear_map(self):
        values = np.column_stack([[0.0, 5.0, 10.0], np.ones(3), 2 * np.ones(3), 3 * np.ones(3)])
        t = table_from_values(values)
        with pytest.warns(UserWarning):
            out, params = normalize_features(t, "minmax01")
        np.testing.assert_allclose(out.values[:, 0], [0.0, 0.5, 1.0])

    def test_constant_column_maps_to_half(self):
        values = np.column_stack([[7.0, 7.0, 7.0], [0, 1, 2], [1, 2, 3], [2, 3, 4]])
        with pytest.warns(UserWarning, match="constant"):
            out, _ = normalize_features(table_from_values(values), "minmax01")
        np.testing.assert_array_equal(out.values[:, 0], [0.5, 0.5, 0.5])

    def test_zscore_hand_oracle(self):
        # population sd of (1,2,3) is sqrt(2/3); hand-computed expectations
        expected = np.array([-1.224744871391589, 0.0, 1.224744871391589])
        values = np.column_stack([[1.0, 2.0, 3.0], [0, 1, 2], [5, 6, 7], [1, 4, 9]])
        out, _ = normalize_features(table_from_values(values), "zscore")
        np.testing.assert_allclose(out.values[:, 0], expected, atol=1e-12)

    def test_round_trip(self):
        for seed in range(10):
            t = random_table(8, 6, seed=seed)
            for mode in ("minmax01", "zscore"):
                out, params = normalize_features(t, mode)
                back = denormalize(out, params)
                np.testing.assert_allclose(back.values, t.values, rtol=1e-9, atol=1e-12)

    def test_params_fit_on_train_rows_only(self):
        t = random_table(10, 5, seed=3)
        rows = np.arange(6)
        params = fit_normalization(t, "minmax01", rows=rows)
        sub = t.values[rows]
        np.testing.assert_allclose(params.loc, sub.min(axis=0))

    def test_clip_bounds_applied_values(self):
        t = random_table(10, 5, seed=4)
        params = fit_normalization(t, "minmax01", rows=np.arange(5))
        out = apply_normalization(t, params, clip=True)
        assert out.values.min() >= 0.0 and out.values.max() <= 1.0

    def test_missing_rejected(self):
        values = np.ones((3, 4))
        values[0, 0] = np.nan
        with pytest.raises(DataError):
            normalize_features(table_from_values(values), "minmax01")


class TestSplit:
    def test_paper_ratios_n10(self):
        s = split_samples(10, (0.8, 0.1, 0.1), seed=1)
        assert (len(s.train), len(s.validation), len(s.test)) == (8, 1, 1)

    def test_deterministic(self):
        a = split_samples(50, (0.8, 0.1, 0.1), seed=9)
        b = split_samples(50, (0.8, 0.1, 0.1), seed=9)
        np.testing.assert_array_equal(a.train, b.train)
        np.testing.assert_array_equal(a.validation, b.validation)
        np.testing.assert_array_equal(a.test, b.test)

    def test_smallest_valid_case(self):
        s = split_samples(3, (0.8, 0.1, 0.1), seed=0)
        assert (len(s.train), len(s.validation), len(s.test)) == (1, 1, 1)

    def test_bad_ratios(self):
        with pytest.raises(DataError):
            split_samples(10, (0.5, 0.2, 0.2), seed=0)
        with pytest.raises(DataError):
            split_samples(10, (1.0, 0.0, 0.0), seed=0)

    def test_too_few_samples(self):
        with pytest.raises(DataError):
            split_samples(2, (0.8, 0.1, 0.1), seed=0)

    @settings(max_examples=60, deadline=None)
    @given(n=st.integers(min_value=3, max_value=1000), seed=st.integers(0, 2**31 - 1))
    def test_partition_property(self, n, seed):
        s = split_samples(n, (0.8, 0.1, 0.1), seed=seed)
        parts = [s.train, s.validation, s.test]
        assert all(len(p) > 0 for p in parts)
        merged = np.concatenate(parts)
        assert len(merged) == n
        assert len(np.unique(merged)) == n

    def test_json_round_trip(self):
        s = split_samples(20, (0.8, 0.1, 0.1), seed=4)
        back = SplitIndex.from_json(s.to_json())
        np.testing.assert_array_equal(back.train, s.train)
        np.testing.assert_array_equal(back.test, s.test)
        assert back.seed == s.seed

    def test_proportions_near_request(self):
        s = split_samples(100, (0.8, 0.1, 0.1), seed=2)
        assert abs(len(s.train) - 80) <= 1
        assert abs(len(s.validation) - 10) <= 1
        assert abs(len(s.test) - 10) <= 1


class TestFeatureTableInvariants:
    def test_duplicate_names_rejected(self):
        with pytest.raises(DuplicateFeatureError):
            FeatureTable(
                ["a", "b", "c"],
                ["f", "f", "g", "h"],
                np.ones((3, 4)),
                np.arange(3.0),
            )

    def test_inf_rejected(self):
        values = np.ones((3, 4))
        values[1, 1] = np.inf
        with pytest.raises(DataError):
            table_from_values(values)

    def test_immutable_values(self):
        t = random_table(4, 4, seed=0)
        with pytest.raises(ValueError):
            t.values[0, 0] = 99.0
