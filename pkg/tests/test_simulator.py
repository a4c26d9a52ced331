import json
from collections import Counter

import numpy as np
import pytest

from fedstream.federation import MessageBus
from fedstream.featurizer import featurize
from fedstream.nb_classifier import NaiveBayesModel
from fedstream.simulator import (
    AttackPattern,
    DriftEvent,
    SyntheticConfig,
    default_config,
    evaluate,
    experiment_models,
    gen_heldout,
    gen_synthetic,
    partition,
    run_experiment,
)


def small(**kw):
    base = dict(n_features=12, n_patterns=2, pattern_width=4, n_orgs=2, records_per_org=400, seed=1)
    base.update(kw)
    return default_config(**base)


def test_config_validation():
    with pytest.raises(ValueError):
        SyntheticConfig([], np.zeros(2), np.ones(2))
    with pytest.raises(ValueError):
        AttackPattern(np.zeros(2), np.array([1.0, 0.0]))
    with pytest.raises(ValueError):
        small(label_fraction=1.5)
    with pytest.raises(ValueError):
        default_config(n_features=10, n_patterns=3, pattern_width=4)


def test_config_dict_round_trip():
    c = small(drift_events=[DriftEvent(100, 0, np.full(12, 0.2))])
    back = SyntheticConfig.from_dict(json.loads(json.dumps(c.to_dict())))
    assert back.to_dict() == c.to_dict()
    gen = SyntheticConfig.from_dict({"n_features": 12, "n_patterns": 2, "pattern_width": 4, "n_orgs": 2,
                                     "records_per_org": 400, "seed": 1})
    assert gen.to_dict() == small().to_dict()


def test_generation_is_deterministic():
    a, b = gen_synthetic(small()), gen_synthetic(small())
    assert [s.to_jsonl() for s in a] == [s.to_jsonl() for s in b]
    assert gen_synthetic(small(seed=2))[0].digest() != a[0].digest()


def test_label_fraction_extremes():
    full = gen_synthetic(small(label_fraction=1.0))
    assert all(r.label is not None for s in full for r in s.records)
    none = gen_synthetic(small(label_fraction=0.0))
    assert all(r.label is None for s in none for r in s.records)


def test_labels_match_hidden_truth():
    for s in gen_synthetic(small(label_fraction=0.5)):
        for r, t in zip(s.records, s.truth):
            assert r.label is None or int(r.label) == int(t)
        assert np.all((s.pattern >= 0) == (s.truth == 1))


def test_orgs_see_only_assigned_patterns():
    c = small(patterns_per_org=1)
    for org, s in enumerate(gen_synthetic(c)):
        assert set(s.pattern.tolist()) <= {-1, *c.patterns_for(org)}
        assert c.patterns_for(org) == [org]


def test_heldout_covers_every_pattern_and_is_unlabeled():
    h = gen_heldout(small(patterns_per_org=1), 500)
    assert set(h.pattern.tolist()) == {-1, 0, 1}
    assert all(r.label is None for r in h.records)


def test_drift_moves_pattern_mean():
    moved = np.full(12, 0.5)
    moved[8:12] += 0.3
    c = small(n_orgs=1, records_per_org=2000, attack_fraction=1.0,
              drift_events=[DriftEvent(1000, 0, moved)])
    s = gen_synthetic(c)[0]
    X = np.array([[float(v) for v in r.fields.values()] for r in s.records])
    p0 = s.pattern == 0
    early, late = X[:1000][p0[:1000]], X[1000:][p0[1000:]]
    assert early[:, :4].mean() == pytest.approx(0.8, abs=0.02)
    assert late[:, :4].mean() == pytest.approx(0.5, abs=0.02)
    assert late[:, 8:].mean() == pytest.approx(0.8, abs=0.02)


def test_partition_round_robin():
    s = gen_synthetic(small(n_orgs=1, records_per_org=10))[0]
    parts = partition(s, 2)
    assert [len(p) for p in parts] == [5, 5]
    assert Counter(r.record_id for p in parts for r in p.records) == Counter(r.record_id for r in s.records)
    with pytest.raises(ValueError):
        partition(s, 0)


@pytest.mark.parametrize("n_orgs", [1, 3, 7])
def test_partition_union_is_input(n_orgs):
    s = gen_synthetic(small(n_orgs=1, records_per_org=123))[0]
    for strategy in ("round_robin", "by_pattern"):
        parts = partition(s, n_orgs, strategy)
        ids = [r.record_id for p in parts for r in p.records]
        assert sorted(ids) == sorted(r.record_id for r in s.records) and len(set(ids)) == len(ids)


def test_partition_by_pattern_routes():
    s = gen_synthetic(small(n_orgs=1, records_per_org=600, attack_fraction=0.5))[0]
    parts = partition(s, 3, "by_pattern", {0: [0], 1: [1, 2]})
    assert set(parts[0].pattern.tolist()) == {-1, 0}
    assert set(parts[1].pattern.tolist()) == {-1, 1} == set(parts[2].pattern.tolist())
    want = Counter(s.pattern.tolist())
    got = Counter(v for p in parts for v in p.pattern.tolist())
    assert got == want


def test_ten_sigma_separability():
    c = default_config(n_features=12, n_patterns=2, pattern_width=4, n_orgs=2, records_per_org=3000,
                       std=0.03, shift=0.3, label_fraction=1.0, seed=4)
    schema = c.schema()
    model = NaiveBayesModel.create(schema)
    for s in gen_synthetic(c):
        for r in s.records:
            model.train_one(featurize(r, schema).values, r.label)
    assert evaluate(model, gen_heldout(c, 3000), schema)["accuracy"] > 0.99


def test_nb_federation_with_disjoint_patterns_equals_pooled():
    c = small(patterns_per_org=1, label_fraction=1.0, records_per_org=1000)
    arm, streams = experiment_models(c, "nb", every_n_records=500)
    schema = c.schema()
    pooled = NaiveBayesModel.create(schema)
    for s in streams:
        for r in s.records:
            pooled.train_one(featurize(r, schema).values, r.label)
    for m in arm.models:
        assert m.hist == pooled.hist
    assert arm.consensus.hist == pooled.hist

    rep = run_experiment(c, "nb", every_n_records=500, heldout_records=2000)
    iso, fed = rep.heldout["isolated"], rep.heldout["federated"]
    assert all(f["accuracy"] > i["accuracy"] for f, i in zip(fed, iso))
    assert all(i["tpr"] < 0.8 for i in iso)


def test_single_org_arms_identical():
    rep = run_experiment(small(n_orgs=1), "nb", every_n_records=100, heldout_records=200)
    assert rep.isolated == rep.federated
    assert rep.heldout["isolated"] == rep.heldout["federated"]


@pytest.mark.parametrize("kind,params", [("nb", {}), ("mlp", {"hidden_sizes": [8, 4]}),
                                         ("forest", {"m": 3, "grace_period": 20})])
def test_sequential_matches_concurrent(kind, params):
    c = small(n_orgs=3, records_per_org=350)
    a = run_experiment(c, kind, params, every_n_records=100, heldout_records=200, concurrent=True)
    b = run_experiment(c, kind, params, every_n_records=100, heldout_records=200, concurrent=False)
    assert a.to_json() == b.to_json()


def test_report_is_pure_function_of_config():
    c = small(n_orgs=3)
    a = run_experiment(c, "nb", every_n_records=150, heldout_records=200)
    b = run_experiment(small(n_orgs=3), "nb", every_n_records=150, heldout_records=200)
    assert a.to_json() == b.to_json() and a.metrics_jsonl() == b.metrics_jsonl()
    assert a.to_text() == b.to_text()


def test_report_shape_and_rates():
    c = small(n_orgs=2)
    bus = MessageBus()
    rep = run_experiment(c, "nb", every_n_records=100, heldout_records=300, bus=bus)
    assert rep.stream_digests == [s.digest() for s in gen_synthetic(c)]
    for arm in (rep.isolated, rep.federated):
        assert [r["records_processed"] for r in arm] == [400, 400]
        assert all(len(r["rounds"]) == 4 for r in arm)
    for e in rep.heldout["isolated"] + rep.heldout["federated"] + [rep.heldout["consensus"]]:
        assert all(0.0 <= e[k] <= 1.0 for k in ("accuracy", "tpr", "fpr"))
    assert rep.messages == len(bus.messages) == 2 * 2 * 4
    rows = [json.loads(x) for x in rep.metrics_jsonl().splitlines()]
    assert len(rows) == 16 and {r["arm"] for r in rows} == {"isolated", "federated"}
    ids = [r.record_id for s in gen_synthetic(c) for r in s.records]
    assert bus.scan(ids[:50]) == []


def test_hidden_truth_never_reaches_training():
    c = small(n_orgs=1, label_fraction=0.0)
    arm, _ = experiment_models(c, "nb", every_n_records=100)
    assert arm.models[0].records_seen == 0
    assert arm.reports[0].labeled == 0 and arm.reports[0].train_events == 0
