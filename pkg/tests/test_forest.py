import json

import numpy as np
import pytest
from oracles import best_split_1d, walk_tree

from aacrc._seeding import child_seed, make_rng, splitmix64
from aacrc.forest import ForestParams, RandomForest, rf_fit, rf_leaf_embed


def test_splitmix_reference_values():
    # published splitmix64 outputs for seed 0
    assert splitmix64(0, 3) == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]
    assert child_seed(0, 1) == 0x6E789E6AA1B965F4


def test_make_rng_reproducible():
    assert np.array_equal(make_rng(7).random(5), make_rng(7).random(5))


class TestParams:
    @pytest.mark.parametrize(
        "kw", [dict(n_trees=0), dict(max_depth=-1), dict(min_samples_leaf=0), dict(max_features=0.0), dict(max_features=1.5)]
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ForestParams(**kw)

    def test_features_per_split_defaults(self):
        p = ForestParams()
        assert p.features_per_split(1) == 1
        assert p.features_per_split(9) == 3


class TestFit:
    def test_single_split_near_zero(self, rng):
        x = rng.uniform(-1, 1, size=100)
        y = (x > 0) + rng.normal(0, 0.01, size=100)
        forest = rf_fit(x, y, ForestParams(n_trees=1, max_depth=1, min_samples_leaf=1, bootstrap=False))
        tree = forest.trees[0]
        assert tree.n_leaves == 2
        assert abs(tree.threshold[0]) <= 0.2
        assert tree.threshold[0] == pytest.approx(best_split_1d(x, y))

    def test_tree_count(self, rng):
        X = rng.normal(size=(200, 3))
        forest = rf_fit(X, np.abs(X[:, 0]), ForestParams(n_trees=5, min_samples_leaf=10))
        assert len(forest.trees) == 5

    def test_constant_target_gives_stumps(self, rng):
        X = rng.normal(size=(120, 2))
        forest = rf_fit(X, np.full(120, 0.4), ForestParams(n_trees=4, min_samples_leaf=5))
        assert all(t.n_leaves == 1 for t in forest.trees)
        assert forest.leaf_count == 4

    def test_depth_and_leaf_size_respected(self, rng):
        X = rng.uniform(0, 10, size=(1000, 1))
        y = np.abs(rng.normal(size=1000)) * (1 + X[:, 0])
        params = ForestParams(n_trees=3, max_depth=3, min_samples_leaf=40, bootstrap=False)
        forest = rf_fit(X, y, params)
        for tree in forest.trees:
            assert tree.depth <= 3
            counts = np.bincount(tree.apply(X) - tree.leaf_id[tree.feature < 0].min())
            assert counts[counts > 0].min() >= 40

    def test_beats_global_mean(self, rng):
        X = rng.uniform(-3, 3, size=(2000, 1))
        y = np.abs(X[:, 0]) * np.abs(rng.normal(size=2000))
        Xv = rng.uniform(-3, 3, size=(2000, 1))
        yv = np.abs(Xv[:, 0]) * np.abs(rng.normal(size=2000))
        forest = rf_fit(X, y)
        mse_rf = np.mean((forest.predict(Xv) - yv) ** 2)
        mse_mean = np.mean((y.mean() - yv) ** 2)
        assert mse_rf / mse_mean < 0.9

    def test_deterministic(self, rng):
        X = rng.normal(size=(300, 4))
        y = np.abs(X[:, 1])
        a = rf_fit(X, y, ForestParams(seed=3, min_samples_leaf=10))
        b = rf_fit(X, y, ForestParams(seed=3, min_samples_leaf=10))
        assert a.to_json() == b.to_json()
        c = rf_fit(X, y, ForestParams(seed=4, min_samples_leaf=10))
        assert a.to_json() != c.to_json()

    @pytest.mark.parametrize(
        "X, y", [(np.zeros((0, 1)), np.zeros(0)), (np.zeros((10, 1)), np.zeros(9)), (np.full((200, 1), np.nan), np.zeros(200))]
    )
    def test_bad_inputs(self, X, y):
        with pytest.raises(ValueError):
            rf_fit(X, y)

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            rf_fit(np.arange(10.0), np.arange(10.0), ForestParams(min_samples_leaf=50))


class TestEmbed:
    def test_stumps_all_ones(self, rng):
        forest = rf_fit(rng.normal(size=(50, 1)), np.ones(50), ForestParams(n_trees=3, min_samples_leaf=5))
        assert rf_leaf_embed(forest, 0.3).tolist() == [1.0, 1.0, 1.0]

    def test_left_leaf(self):
        x = np.r_[np.linspace(-1, -0.1, 10), np.linspace(0.1, 1, 10)]
        forest = rf_fit(x, (x > 0).astype(float), ForestParams(n_trees=1, max_depth=1, min_samples_leaf=1, bootstrap=False))
        assert forest.trees[0].threshold[0] == pytest.approx(0.0)
        assert rf_leaf_embed(forest, -5.0).tolist() == [1.0, 0.0]

    def test_popcount_matches_tree_walk(self, rng):
        X = rng.normal(size=(500, 3))
        forest = rf_fit(X, np.abs(X[:, 0] * X[:, 2]), ForestParams(n_trees=7, min_samples_leaf=10))
        Xt = rng.normal(size=(200, 3)) * 2
        E = rf_leaf_embed(forest, Xt)
        assert np.all(E.sum(axis=1) == 7)
        doc = json.loads(forest.to_json())
        for x, row in zip(Xt, E):
            expected = sorted(walk_tree(t, x) for t in doc["trees"])
            assert np.flatnonzero(row).tolist() == expected


class TestSerialization:
    def test_round_trip(self, rng):
        X = rng.normal(size=(400, 2))
        forest = rf_fit(X, np.abs(X[:, 0]), ForestParams(n_trees=4, min_samples_leaf=20))
        again = RandomForest.from_json(forest.to_json())
        assert again.to_json() == forest.to_json()
        Xt = rng.normal(size=(50, 2))
        assert np.array_equal(rf_leaf_embed(again, Xt), rf_leaf_embed(forest, Xt))

    def test_rejects_other_versions(self, rng):
        forest = rf_fit(rng.normal(size=(100, 1)), rng.random(100), ForestParams(n_trees=2, min_samples_leaf=10))
        doc = json.loads(forest.to_json())
        doc["version"] = 99
        with pytest.raises(ValueError, match="version"):
            RandomForest.from_json(json.dumps(doc))
        doc["format"] = "other"
        with pytest.raises(ValueError):
            RandomForest.from_json(json.dumps(doc))

    def test_wrong_feature_count(self, rng):
        forest = rf_fit(rng.normal(size=(100, 2)), rng.random(100), ForestParams(n_trees=2, min_samples_leaf=10))
        with pytest.raises(ValueError):
            forest.apply(np.zeros((3, 5)))
