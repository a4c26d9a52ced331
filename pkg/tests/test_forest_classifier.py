import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedstream.featurizer import numeric_schema
from fedstream.forest_classifier import (
    Ensemble,
    HoeffdingTree,
    Node,
    TreeParams,
    forest_init,
    forest_merge,
    forest_predict,
    forest_train_one,
    hoeffding_bound,
    largest_remainder,
)
from fedstream.model_core import ArchMismatch, ClassLabel, SchemaMismatch, WeightArityMismatch

from oracles import hamilton

B, M = ClassLabel.BENIGN, ClassLabel.MALICIOUS


def separable_stream(rng, n, d=4, feature=2):
    X = rng.uniform(0, 1, (n, d))
    y = [M if v > 0.5 else B for v in X[:, feature]]
    return X, y


def trained_forest(seed, m=6, n=400, d=4):
    s = numeric_schema(d, 0.0, 1.0, 8)
    e = forest_init(m, s, seed, TreeParams(grace_period=20))
    X, y = separable_stream(np.random.default_rng(seed), n, d, seed % d)
    for x, lbl in zip(X, y):
        forest_train_one(e, x, lbl)
    return e


def test_init():
    s = numeric_schema(3)
    e = forest_init(20, s, 1)
    assert e.m == 20 and all(t.n_nodes == 1 for t in e.trees)
    assert e.to_payload() == forest_init(20, s, 1).to_payload()
    with pytest.raises(ValueError):
        forest_init(0, s, 1)


def test_fresh_and_single_tree_predictions():
    s = numeric_schema(3)
    assert forest_predict(forest_init(5, s), np.full(3, 0.3)).as_tuple() == (0.5, 0.5)
    one = trained_forest(3, m=1)
    x = np.array([0.2, 0.9, 0.1, 0.7])
    p = one.trees[0].predict_proba(one.geometry.bin_indices(x))
    assert forest_predict(one, x).as_tuple() == (p[0], p[1])


def test_hand_built_two_tree_mean():
    s = numeric_schema(2)
    e = forest_init(2, s)
    e.trees[0].root = Node([8, 2])
    e.trees[1].root = Node([6, 4])
    sc = forest_predict(e, np.zeros(2))
    assert sc.benign == pytest.approx(0.7, abs=1e-15) and sc.malicious == pytest.approx(0.3, abs=1e-15)
    assert abs(sc.benign + sc.malicious - 1) <= 1e-12


def test_all_zero_poisson_draw_leaves_ensemble_unchanged():
    s = numeric_schema(3)
    # search a seed whose first draw is zero for both trees
    seed = next(k for k in range(1000) if not np.random.default_rng(k).poisson(1.0, 2).any())
    e = forest_init(2, s, seed)
    before = [t.to_bytes() for t in e.trees]
    forest_train_one(e, np.full(3, 0.4), M)
    assert [t.to_bytes() for t in e.trees] == before
    assert all(t.root.counts.sum() == 0 for t in e.trees)


def test_zero_weight_learn_is_ignored():
    s = numeric_schema(2)
    t = HoeffdingTree(s.geometry)
    t.learn(np.array([0, 1]), 1, 0.0)
    assert t.root.counts.sum() == 0 and t.root.stats is None


def test_pure_leaf_never_splits():
    s = numeric_schema(3, 0.0, 1.0, 8)
    t = HoeffdingTree(s.geometry, TreeParams(grace_period=5, tie_threshold=1.0))
    rng = np.random.default_rng(0)
    for x in rng.uniform(0, 1, (500, 3)):
        t.learn(s.geometry.bin_indices(x), 0)
    assert t.n_nodes == 1


def test_separable_concept_splits_root_on_that_feature():
    s = numeric_schema(5, 0.0, 1.0, 16)
    e = forest_init(20, s, 7)
    X, y = separable_stream(np.random.default_rng(7), 2000, 5, feature=3)
    for x, lbl in zip(X, y):
        forest_train_one(e, x, lbl)
    assert all(t.root.feature == 3 for t in e.trees)
    # early splits may land one bin short of the true boundary
    assert all(abs(t.root.threshold - 0.5) <= 1 / 16 + 1e-12 for t in e.trees)
    acc = np.mean([forest_predict(e, x).predicted() == lbl for x, lbl in zip(X[:300], y[:300])])
    assert acc > 0.95


def test_tree_structure_invariants():
    e = trained_forest(2, m=4, n=800)
    g = e.geometry
    for t in e.trees:
        for node in t.nodes():
            assert np.all(node.counts >= 0)
            if not node.is_leaf:
                assert node.left is not None and node.right is not None
                assert g.lo[node.feature] <= node.threshold <= g.hi[node.feature]


def test_hoeffding_bound_formula_and_monotonicity():
    assert hoeffding_bound(100, 1e-6) == pytest.approx(math.sqrt(math.log(2) ** 2 * math.log(1e6) / 200))
    values = [hoeffding_bound(n, 1e-6) for n in range(1, 2000)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_max_depth_caps_growth():
    s = numeric_schema(4, 0.0, 1.0, 8)
    e = forest_init(2, s, 0, TreeParams(grace_period=10, max_depth=1, tie_threshold=0.5))
    rng = np.random.default_rng(1)
    for x in rng.uniform(0, 1, (2000, 4)):
        forest_train_one(e, x, M if (x[0] > 0.5) ^ (x[1] > 0.5) else B)
    assert all(t.depth <= 1 for t in e.trees)


@pytest.mark.parametrize("a,m,expected", [((1, 0), 10, [10, 0]), ((0.5, 0.5), 10, [5, 5]),
                                          ((0.4, 0.35, 0.25), 20, [8, 7, 5])])
def test_largest_remainder_examples(a, m, expected):
    assert largest_remainder(list(a), m) == expected == hamilton(a, m)


@given(st.lists(st.integers(0, 50), min_size=1, max_size=8).filter(lambda v: sum(v) > 0), st.integers(1, 40))
def test_largest_remainder_matches_hamilton(raw, m):
    a = [v / sum(raw) for v in raw]
    alloc = largest_remainder(a, m)
    assert alloc == hamilton(raw, m)
    assert sum(alloc) == m
    assert all(abs(n - ai * m) < 1 for n, ai in zip(alloc, a))


def tagged(seed, m, org):
    e = trained_forest(seed, m=m, n=150)
    e.origins = [(org, k) for k in range(m)]
    return e


def test_merge_examples():
    e0, e1 = tagged(1, 10, "a"), tagged(2, 10, "b")
    out = forest_merge([e0, e1], [1, 0], seed=3)
    assert [o[0] for o in out.origins] == ["a"] * 10
    out = forest_merge([e0, e1], [0.5, 0.5], seed=3)
    assert Counter(o[0] for o in out.origins) == {"a": 5, "b": 5}
    trio = [tagged(k, 20, n) for k, n in ((1, "a"), (2, "b"), (3, "c"))]
    out = forest_merge(trio, [0.4, 0.35, 0.25], seed=4)
    assert Counter(o[0] for o in out.origins) == {"a": 8, "b": 7, "c": 5}


def test_merge_errors():
    e = forest_init(3, numeric_schema(2))
    with pytest.raises(WeightArityMismatch):
        forest_merge([e, e], [1.0])
    with pytest.raises(SchemaMismatch):
        forest_merge([e, forest_init(3, numeric_schema(3))], [0.5, 0.5])
    with pytest.raises(ArchMismatch):
        forest_merge([e, forest_init(4, numeric_schema(2))], [0.5, 0.5])


@given(st.integers(0, 2**32 - 1))
def test_merge_contract(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 4))
    m = int(rng.integers(1, 7))
    ens = [tagged(int(rng.integers(1000)), m, f"o{j}") for j in range(k)]
    w = rng.dirichlet(np.ones(k)) * (rng.uniform(size=k) > 0.3) + 1e-9
    out = forest_merge(ens, w, seed)
    assert out.m == m
    by_key = {(o, t.digest()) for e in ens for o, t in zip(e.origins, e.trees)}
    for o, t in zip(out.origins, out.trees):
        assert (o, t.digest()) in by_key
    alloc = Counter(o[0] for o in out.origins)
    want = largest_remainder((w / w.sum()).tolist(), m)
    assert [alloc.get(f"o{j}", 0) for j in range(k)] == want
    again = forest_merge(ens, w, seed)
    assert [t.digest() for t in again.trees] == [t.digest() for t in out.trees]
    assert out.origins == again.origins


def test_merged_trees_are_independent_copies():
    e = tagged(5, 4, "a")
    out = forest_merge([e], [1.0], 0)
    forest_train_one(out, np.full(4, 0.9), M)
    assert e.trees[0].to_bytes() != out.trees[0].to_bytes() or e.trees[0] is not out.trees[0]
    assert all(a is not b for a, b in zip(e.trees, out.trees))


def test_payload_round_trip_keeps_rng_stream():
    e = trained_forest(9)
    back = Ensemble.from_payload(e.to_payload("org", 2))
    assert [t.digest() for t in back.trees] == [t.digest() for t in e.trees]
    assert back.origins == [("org", 2)] * e.m
    assert np.array_equal(back.rng.poisson(1.0, 50), e.rng.poisson(1.0, 50))
