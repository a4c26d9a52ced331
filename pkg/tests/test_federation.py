import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedstream.federation import (
    Community,
    CommunityConfig,
    DuplicatePost,
    EmptyRound,
    FileDropClient,
    FileDropTransport,
    MessageBus,
    SharingSchedule,
    ShareStore,
    UnknownMember,
    apply_consensus,
    close_round,
    consensus_for,
    export_for_sharing,
    post_envelope,
)
from fedstream.featurizer import numeric_schema
from fedstream.mlp_classifier import MlpHyper, MlpModel
from fedstream.model_core import KindMismatch, SchemaMismatch, export, load_model, merge
from fedstream.nb_classifier import NaiveBayesModel

from conftest import labeled_data

SCHEMA = numeric_schema(5, 0.0, 1.0, 8, prefix="fed_")


def nb_trained(rng, n):
    m = NaiveBayesModel.create(SCHEMA)
    X, y = labeled_data(rng, n, SCHEMA.dim)
    for x, lbl in zip(X, y):
        m.train_one(x, lbl)
    return m, X, y


def mlp_trained(rng, n, seed=0):
    m = MlpModel.create(SCHEMA, MlpHyper(init_seed=seed, hidden_sizes=(6, 4)))
    X, y = labeled_data(rng, n, SCHEMA.dim)
    for x, lbl in zip(X, y):
        m.train_one(x, lbl)
    return m


def cfg(members, kind="mlp", **kw):
    return CommunityConfig("c", list(members), kind, **kw)


def test_config_validation():
    with pytest.raises(ValueError):
        cfg([])
    with pytest.raises(ValueError):
        cfg([("a", 1), ("a", 1)])
    with pytest.raises(ValueError):
        cfg([("a", -1), ("b", 2)])
    with pytest.raises(ValueError):
        cfg([("a", 0), ("b", 0)])
    with pytest.raises(ValueError):
        SharingSchedule(0)
    with pytest.raises(ValueError):
        cfg([("a", 1)], kind="nb", include_self=False)
    with pytest.raises(UnknownMember):
        cfg([("a", 1)]).trust("z")


def test_trust_restricted_to_posters_and_renormalized():
    c = cfg([("a", 1), ("b", 1), ("c", 2), ("d", 4)])
    assert c.weights_for(["a", "b", "c"]).a.tolist() == [0.25, 0.25, 0.5]
    z = cfg([("a", 0), ("b", 0), ("c", 1)])
    assert z.weights_for(["a", "b"]).a.tolist() == [0.5, 0.5]


def test_mlp_consensus_uses_restricted_weights(rng):
    c = cfg([("a", 1), ("b", 1), ("c", 2), ("d", 4)], schema_hash=SCHEMA.digest)
    store = ShareStore(c)
    envs = [export(mlp_trained(rng, 30), org, 1) for org in "abc"]
    for e in envs:
        post_envelope(store, 1, e)
    got = load_model(close_round(store, 1))
    want = load_model(merge(envs, [0.25, 0.25, 0.5]))
    assert got.params.bit_equal(want.params)


def test_absent_member_has_no_influence(rng):
    envs = [export(mlp_trained(rng, 20), org, 1) for org in "ab"]
    out = []
    for d_trust in (0.001, 1000.0):
        store = ShareStore(cfg([("a", 1), ("b", 3), ("d", d_trust)]))
        for e in envs:
            post_envelope(store, 1, e)
        out.append(close_round(store, 1).payload)
    assert out[0] == out[1]


def test_single_member_is_fixed_point(rng):
    m = mlp_trained(rng, 40)
    store = ShareStore(cfg([("a", 1)]))
    post_envelope(store, 1, export(m, "a", 1))
    back = apply_consensus(m, close_round(store, 1))
    assert back.params.bit_equal(m.params)
    x = rng.uniform(0, 1, SCHEMA.dim)
    assert back.predict(x) == m.predict(x)


def test_common_init_without_training_is_fixed_point():
    models = [MlpModel.create(SCHEMA, MlpHyper(init_seed=5)) for _ in range(3)]
    store = ShareStore(cfg([("a", 1), ("b", 2), ("c", 7)]))
    for org, m in zip("abc", models):
        post_envelope(store, 1, export(m, org, 1))
    assert load_model(close_round(store, 1)).params.bit_equal(models[0].params)


def test_nb_consensus_equals_pooled_model_over_rounds():
    rng = np.random.default_rng(3)
    c = cfg([("a", 1), ("b", 5)], kind="nb")
    store = ShareStore(c)
    locals_ = {o: NaiveBayesModel.create(SCHEMA) for o in "ab"}
    pooled = NaiveBayesModel.create(SCHEMA)
    for rnd in (1, 2, 3):
        for o in "ab":
            X, y = labeled_data(rng, 25 + rnd, SCHEMA.dim)
            for x, lbl in zip(X, y):
                locals_[o].train_one(x, lbl)
                pooled.train_one(x, lbl)
            post_envelope(store, rnd, export_for_sharing(locals_[o], o, rnd))
        cons = close_round(store, rnd)
        for o in "ab":
            locals_[o] = apply_consensus(locals_[o], cons)
            assert locals_[o].hist == pooled.hist
        assert cons.records_seen == pooled.records_seen


def test_include_self_off_leaves_own_post_out(rng):
    c = cfg([("a", 1), ("b", 1), ("c", 1)], include_self=False)
    store = ShareStore(c)
    envs = {o: export(mlp_trained(rng, 15), o, 1) for o in "abc"}
    for e in envs.values():
        post_envelope(store, 1, e)
    close_round(store, 1)
    got = load_model(consensus_for(store, 1, "a"))
    want = load_model(merge([envs["b"], envs["c"]], [0.5, 0.5]))
    assert got.params.bit_equal(want.params)


def test_post_errors(rng):
    c = cfg([("a", 1), ("b", 1)], schema_hash=SCHEMA.digest)
    store = ShareStore(c)
    env = export(mlp_trained(rng, 5), "a", 1)
    with pytest.raises(UnknownMember):
        post_envelope(store, 1, export(mlp_trained(rng, 5), "zz", 1))
    post_envelope(store, 1, env)
    with pytest.raises(DuplicatePost):
        post_envelope(store, 1, env)
    with pytest.raises(KindMismatch):
        post_envelope(store, 1, export(NaiveBayesModel.create(SCHEMA), "b", 1))
    other = numeric_schema(5, 0.0, 2.0, 8, prefix="fed_other_")
    with pytest.raises(SchemaMismatch):
        post_envelope(store, 1, export(MlpModel.create(other), "b", 1))
    with pytest.raises(EmptyRound):
        close_round(store, 2)
    close_round(store, 1)
    with pytest.raises(DuplicatePost):
        post_envelope(store, 1, export(mlp_trained(rng, 5), "b", 1))


def test_apply_consensus_rejects_mismatch(rng):
    nb = NaiveBayesModel.create(SCHEMA)
    with pytest.raises(KindMismatch):
        apply_consensus(nb, export(mlp_trained(rng, 3), "a", 1))


def test_anchor_ratio_blends_local(rng):
    mine, theirs = mlp_trained(rng, 10), mlp_trained(rng, 10, seed=1)
    cons = export(theirs, "c", 1)
    out = apply_consensus(mine, cons, anchor_ratio=0.25)
    want = load_model(merge([cons, export(mine, "local", 1)], [0.75, 0.25], seed=1))
    assert out.params.bit_equal(want.params)


def test_concurrent_exchange_gives_everyone_the_same_consensus(rng):
    c = cfg([(f"o{i}", i + 1) for i in range(4)])
    comm = Community(c)
    models = {f"o{i}": mlp_trained(rng, 10, seed=i) for i in range(4)}
    got = {}

    def member(org):
        for rnd in (1, 2):
            env = comm.client(org).exchange(rnd, export(models[org], org, rnd))
            got[(org, rnd)] = env.payload

    threads = [threading.Thread(target=member, args=(o,)) for o in models]
    for t in threads:
        t.start()
    for t in threads:
        t.join(10)
    assert not any(t.is_alive() for t in threads)
    for rnd in (1, 2):
        assert len({got[(o, rnd)] for o in models}) == 1
    assert len(comm.bus.messages) == 16


def test_leave_releases_waiting_members(rng):
    comm = Community(cfg([("a", 1), ("b", 1)]))
    result = {}
    t = threading.Thread(target=lambda: result.setdefault(
        "env", comm.client("a").exchange(1, export(mlp_trained(rng, 4), "a", 1))))
    t.start()
    comm.client("b").leave()
    t.join(10)
    assert "env" in result and comm.store.posted(1) == ["a"]


def test_message_log_and_firewall_scan(tmp_path, rng):
    bus = MessageBus()
    comm = Community(cfg([("a", 1)], kind="nb"), bus)
    m, X, _ = nb_trained(rng, 20)
    comm.client("a").exchange(1, export_for_sharing(m, "a", 1))
    assert bus.scan(["secret-record-id-42"]) == []
    path = tmp_path / "messages.jsonl"
    bus.write_log(path)
    lines = path.read_text().splitlines()
    assert len(lines) == 2 and '"kind": "post"' in lines[0]
    # a message smuggling raw text is flagged
    env = export(m, "a", 2)
    bus.send(2, "a", "c", "post", env)
    bus.messages[-1].data += b"secret-record-id-42"
    assert bus.scan(["secret-record-id-42"])


def test_file_drop_round_trip(tmp_path, rng):
    c = cfg([("a", 1), ("b", 3)], schema_hash=SCHEMA.digest)
    tr = FileDropTransport(tmp_path, "c")
    envs = [export(mlp_trained(rng, 8, seed=i), o, 1) for i, o in enumerate("ab")]
    client = FileDropClient(tr, c)
    assert client.exchange(1, envs[0]) is None
    tr.post(envs[1])
    with pytest.raises(DuplicatePost):
        tr.post(envs[1])
    assert {e.org_id for e in tr.collect(1)} == {"a", "b"}
    cons = tr.close_round(ShareStore(c), 1)
    assert tr.consensus(1).payload == cons.payload
    assert cons.payload == merge(envs, [0.25, 0.75], seed=0, org_id="c").payload
    # a late poster still picks up the published consensus for the next round
    assert FileDropClient(tr, c).exchange(2, envs[0]) is None


@given(st.lists(st.floats(0.0, 10.0), min_size=2, max_size=5).filter(lambda v: sum(v) > 0),
       st.integers(0, 2**16))
def test_consensus_is_permutation_invariant(trust, seed):
    rng = np.random.default_rng(seed)
    orgs = [f"o{i}" for i in range(len(trust))]
    envs = [export(mlp_trained(rng, 3, seed=i), o, 1) for i, o in enumerate(orgs)]
    payloads = []
    for order in (list(range(len(orgs))), list(reversed(range(len(orgs))))):
        store = ShareStore(cfg(list(zip(orgs, trust))))
        for i in order:
            post_envelope(store, 1, envs[i])
        payloads.append(close_round(store, 1).payload)
    assert payloads[0] == payloads[1]
