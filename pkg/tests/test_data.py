import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dppvi.data import (
    SplitSpec,
    load_tabular,
    partition_local,
    read_shard_manifest,
    rebalance_majority,
    small_target,
    split_indices,
    split_sizes,
    synth_logreg,
    train_validation_split,
    write_shard_manifest,
)
from dppvi.errors import DomainError, InfeasibleSplit, IoError, SchemaMismatch
from dppvi.models import Dataset, ModelSpec
from dppvi.protocol import OptimizerConfig, RunConfig, run_global_vi

ADULT_N = 24429


class TestSplitTables:
    @pytest.mark.parametrize("rho,expected", [(0.0, 2442), (0.75, 610), (0.7, 732)])
    def test_adult_10(self, rho, expected):
        assert split_sizes(ADULT_N, 10, rho)[0] == expected

    @pytest.mark.parametrize("rho,expected", [(0.0, 122), (0.75, 30), (0.7, 36)])
    def test_adult_200(self, rho, expected):
        assert split_sizes(ADULT_N, 200, rho)[0] == expected

    @pytest.mark.parametrize("rho,expected", [(0.0, 447), (0.75, 111), (0.7, 134)])
    def test_mimic_10(self, rho, expected):
        assert split_sizes(4475, 10, rho)[0] == expected

    @pytest.mark.parametrize("kappa,n_small,expected", [(0.95, 111, 0.97), (-0.5, 134, 0.25)])
    def test_mimic_small_share(self, kappa, n_small, expected):
        target = small_target(0.5, kappa)
        realized = round(n_small * target) / n_small
        assert np.floor(realized * 100) / 100 == expected

    def test_targets(self):
        assert small_target(0.5, 0.95) == pytest.approx(0.975)
        assert small_target(0.5, -0.5) == pytest.approx(0.25)
        assert small_target(0.76, 0.95) == pytest.approx(0.988)

    def test_adult_minority_row(self):
        # at lam = 0.76 the formula gives .04; a slightly smaller majority share truncates to .03
        assert small_target(0.76, -3) == pytest.approx(0.04)
        assert np.floor(small_target(0.759, -3) * 100) / 100 == 0.03

    def test_kappa_range(self):
        with pytest.raises(DomainError):
            small_target(0.5, -1.5)


class TestSplitIndices:
    def labels(self, n=1000, share=0.76, seed=0):
        return (np.random.default_rng(seed).random(n) < share).astype(float)

    @settings(max_examples=30, deadline=None)
    @given(st.sampled_from([1, 2, 3, 4, 10]), st.sampled_from([0.0, 0.5, 0.75]), st.sampled_from([0.0, 0.5, -0.5]),
           st.integers(0, 1000))
    def test_disjoint_cover(self, m, rho, kappa, seed):
        if m % 2 and m > 1:
            rho = kappa = 0.0
        shards = split_indices(self.labels(seed=seed), SplitSpec(m, rho, kappa, seed))
        merged = np.concatenate(shards)
        assert len(shards) == m
        np.testing.assert_array_equal(np.sort(merged), np.arange(1000))

    def test_small_shard_share(self):
        y = self.labels(5000)
        shards = split_indices(y, SplitSpec(10, 0.75, 0.95, seed=1))
        n_small, _ = split_sizes(5000, 10, 0.75)
        target = small_target(y.mean(), 0.95)
        for idx in shards[:5]:
            assert idx.size == n_small
            assert abs(y[idx].mean() - target) <= 0.5 / n_small + 1e-12
        sizes = [idx.size for idx in shards[5:]]
        assert max(sizes) - min(sizes) <= 1

    def test_odd_unbalanced_infeasible(self):
        with pytest.raises(InfeasibleSplit):
            split_indices(self.labels(), SplitSpec(3, 0.5))

    def test_not_enough_rows(self):
        y = np.array([1.0] * 95 + [0.0] * 5)
        with pytest.raises(InfeasibleSplit):
            split_indices(y, SplitSpec(2, 0.0, -10.0))

    def test_manifest_round_trip(self, tmp_path):
        shards = split_indices(self.labels(), SplitSpec(4, 0.5, 0.5, seed=2))
        write_shard_manifest(tmp_path / "m.json", shards, SplitSpec(4, 0.5, 0.5, seed=2))
        for a, b in zip(shards, read_shard_manifest(tmp_path / "m.json")):
            np.testing.assert_array_equal(a, b)
        assert json.loads((tmp_path / "m.json").read_text())["split"]["M"] == 4


class TestPartitionLocal:
    def test_one_part_is_shard(self):
        idx = np.arange(7)
        (part,) = partition_local(idx, 1)
        np.testing.assert_array_equal(part, idx)

    def test_singletons(self):
        parts = partition_local(np.arange(5), 5, seed=3)
        assert sorted(int(p[0]) for p in parts) == list(range(5))
        assert all(p.size == 1 for p in parts)

    @given(st.integers(1, 60), st.integers(1, 60), st.integers(0, 100))
    def test_cover(self, n, k, seed):
        if k > n:
            with pytest.raises(DomainError):
                partition_local(np.arange(n), k, seed)
            return
        parts = partition_local(np.arange(n) + 100, k, seed)
        np.testing.assert_array_equal(np.sort(np.concatenate(parts)), np.arange(n) + 100)
        sizes = [p.size for p in parts]
        assert max(sizes) - min(sizes) <= 1

    def test_dataset_input(self, logreg_data):
        parts = partition_local(logreg_data, 4, seed=0)
        assert sum(len(p) for p in parts) == len(logreg_data)


TOY_CSV = """age,workclass,const,income
39,State-gov,5,<=50K
50,Self-emp,5,<=50K
38,Private,5,<=50K
53,Private,5,>50K
28,Private,5,<=50K
37,Private,5,>50K
49,Private,5,<=50K
52,Self-emp,5,>50K
31,Private,5,>50K
42,Private,5,>50K
30,?,5,<=50K
"""
TOY_SCHEMA = {"columns": {"age": "continuous", "workclass": "categorical", "const": "continuous"},
              "label": "income", "positive": ">50K"}


class TestLoadTabular:
    @pytest.fixture
    def toy(self, tmp_path):
        path = tmp_path / "toy.csv"
        path.write_text(TOY_CSV)
        return path

    def test_split_sizes(self, toy):
        tab = load_tabular(toy, TOY_SCHEMA, seed=0)
        assert (len(tab.train), len(tab.validation)) == (8, 2)

    def test_encoding(self, toy):
        tab = load_tabular(toy, TOY_SCHEMA, seed=0)
        assert tab.feature_names == ["age", "workclass=Private", "workclass=Self-emp", "workclass=State-gov", "const"]
        np.testing.assert_array_equal(tab.train.features[:, 4], 0.0)
        assert set(np.unique(tab.train.labels)) <= {0.0, 1.0}
        assert tab.train.labels.sum() + tab.validation.labels.sum() == 5

    def test_train_statistics_only(self, toy):
        tab = load_tabular(toy, TOY_SCHEMA, seed=4)
        raw_age = tab.train.features[:, 0] * tab.stds[0] + tab.means[0]
        assert tab.means[0] == pytest.approx(raw_age.mean())
        np.testing.assert_allclose(tab.train.features[:, 0].mean(), 0.0, atol=1e-12)
        np.testing.assert_allclose(tab.train.features[:, 0].std(), 1.0, rtol=1e-12)

    def test_deterministic(self, toy):
        a, b = load_tabular(toy, TOY_SCHEMA, seed=2), load_tabular(toy, TOY_SCHEMA, seed=2)
        np.testing.assert_array_equal(a.train.features, b.train.features)

    def test_schema_mismatch(self, toy):
        with pytest.raises(SchemaMismatch):
            load_tabular(toy, {**TOY_SCHEMA, "columns": {"height": "continuous"}})
        with pytest.raises(SchemaMismatch):
            load_tabular(toy, {"columns": {}, "label": "income"})

    def test_missing_file(self, tmp_path):
        with pytest.raises(IoError):
            load_tabular(tmp_path / "absent.csv", TOY_SCHEMA)


class TestRebalance:
    def test_pool_sizes(self):
        y = np.concatenate([np.ones(2797), np.zeros(19000)])
        pool = Dataset(np.arange(y.size, dtype=float)[:, None], y)
        balanced = rebalance_majority(pool, seed=0)
        assert len(balanced) == 5594
        assert balanced.labels.sum() == 2797
        train, val = train_validation_split(balanced, seed=0)
        assert (len(train), len(val)) == (4475, 1119)


class TestSynth:
    def test_bytes_deterministic(self):
        theta = np.array([0.1, 1.0, -2.0])
        a, b = synth_logreg(50, 2, theta, seed=8), synth_logreg(50, 2, theta, seed=8)
        assert a.features.tobytes() == b.features.tobytes()
        assert a.labels.tobytes() == b.labels.tobytes()

    def test_zero_theta_balanced(self):
        n = 4000
        y = synth_logreg(n, 3, np.zeros(4), seed=1).labels
        assert abs(y.mean() - 0.5) < 3 * np.sqrt(0.25 / n)

    def test_sign_recovery(self):
        theta = np.array([0.0, 3.0, -3.0, 2.0])
        data = synth_logreg(2000, 3, theta, seed=2)
        cfg = RunConfig(ModelSpec("logistic_regression", 3), opt=OptimizerConfig(lr=0.05, local_steps=500))
        q = run_global_vi(cfg, [data]).final_lambda
        d = 4
        mean = q[:d] / (-2.0 * q[d:])
        np.testing.assert_array_equal(np.sign(mean[1:]), np.sign(theta[1:]))

    def test_theta_size(self):
        with pytest.raises(DomainError):
            synth_logreg(10, 3, np.zeros(3))
