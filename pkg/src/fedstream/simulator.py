"""Deterministic multi-organization experiments on synthetic Gaussian-mixture streams."""
from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from fedstream.federation import Community, CommunityConfig, MessageBus, SharingSchedule
from fedstream.featurizer import FeatureSchema, LogRecord, featurize, numeric_schema
from fedstream.model_core import ClassLabel, Classifier, load_model, merge
from fedstream.dag_pipeline import Pipeline, PipelineConfig, RunReport, make_model

BASE_TS = 1_600_000_000_000


@dataclass
class AttackPattern:
    mean: np.ndarray
    cov_diag: np.ndarray
    label: ClassLabel = ClassLabel.MALICIOUS
    orgs: tuple[int, ...] | None = None  # None: every org sees it

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov_diag = np.asarray(self.cov_diag, dtype=np.float64)
        if self.mean.shape != self.cov_diag.shape:
            raise ValueError("pattern mean and covariance diagonal differ in length")
        if np.any(self.cov_diag <= 0):
            raise ValueError("covariance entries must be > 0")
        self.label = ClassLabel.parse(self.label)


@dataclass
class DriftEvent:
    """From stream index ``at_record`` on, pattern ``pattern`` uses ``new_mean``."""

    at_record: int
    pattern: int
    new_mean: np.ndarray

    def __post_init__(self):
        self.new_mean = np.asarray(self.new_mean, dtype=np.float64)


@dataclass
class SyntheticConfig:
    attack_patterns: list[AttackPattern]
    benign_mean: np.ndarray
    benign_cov_diag: np.ndarray
    n_orgs: int = 4
    records_per_org: int = 10_000
    attack_fraction: float = 0.3
    label_fraction: float = 0.3
    drift_events: list[DriftEvent] = field(default_factory=list)
    seed: int = 0
    bins: int = 32
    value_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        self.benign_mean = np.asarray(self.benign_mean, dtype=np.float64)
        self.benign_cov_diag = np.asarray(self.benign_cov_diag, dtype=np.float64)
        if not self.attack_patterns:
            raise ValueError("need at least one attack pattern")
        if not 0.0 <= self.label_fraction <= 1.0:
            raise ValueError("label_fraction must lie in [0, 1]")
        if not 0.0 <= self.attack_fraction <= 1.0:
            raise ValueError("attack_fraction must lie in [0, 1]")
        if np.any(self.benign_cov_diag <= 0):
            raise ValueError("covariance entries must be > 0")
        if self.n_orgs < 1:
            raise ValueError("n_orgs must be >= 1")
        for p in self.attack_patterns:
            if p.mean.shape != self.benign_mean.shape:
                raise ValueError("attack pattern dimension differs from the background")
            if p.orgs is not None and any(not 0 <= o < self.n_orgs for o in p.orgs):
                raise ValueError(f"pattern assigned to unknown org in {p.orgs}")

    @property
    def n_features(self) -> int:
        return self.benign_mean.shape[0]

    def schema(self) -> FeatureSchema:
        lo, hi = self.value_range
        return numeric_schema(self.n_features, lo, hi, self.bins)

    def patterns_for(self, org: int) -> list[int]:
        return [j for j, p in enumerate(self.attack_patterns) if p.orgs is None or org in p.orgs]

    def to_dict(self) -> dict:
        d = asdict(self)
        return json.loads(json.dumps(d, default=lambda o: o.tolist() if isinstance(o, np.ndarray) else int(o)))

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        d = dict(d)
        if "attack_patterns" not in d:
            gen = {k: d.pop(k) for k in ("n_features", "n_patterns", "pattern_width", "shift", "std",
                                         "patterns_per_org") if k in d}
            base = default_config(**gen, **{k: d.pop(k) for k in ("n_orgs", "seed") if k in d})
            base_d = {k: getattr(base, k) for k in ("attack_patterns", "benign_mean", "benign_cov_diag",
                                                    "n_orgs", "seed")}
            base_d.update(d)
            d = base_d
        else:
            d["attack_patterns"] = [p if isinstance(p, AttackPattern) else
                                    AttackPattern(p["mean"], p["cov_diag"], p.get("label", "malicious"),
                                                  tuple(p["orgs"]) if p.get("orgs") is not None else None)
                                    for p in d["attack_patterns"]]
        d["drift_events"] = [e if isinstance(e, DriftEvent) else DriftEvent(**e)
                             for e in d.get("drift_events", [])]
        if "value_range" in d:
            d["value_range"] = tuple(d["value_range"])
        return cls(**d)


def default_config(n_features: int = 81, n_patterns: int = 4, n_orgs: int = 4,
                   patterns_per_org: int | None = None, pattern_width: int = 6,
                   shift: float = 0.3, std: float = 0.08, seed: int = 0, **kw) -> SyntheticConfig:
    """Background around 0.5; attack pattern j raises features [j*w, (j+1)*w) by ``shift``.

    With ``patterns_per_org`` set, org o sees patterns o, o+1, ... (mod n_patterns).
    """
    if n_patterns * pattern_width > n_features:
        raise ValueError("patterns do not fit into the feature space")
    benign = np.full(n_features, 0.5)
    var = np.full(n_features, std * std)
    assign: dict[int, list[int]] = {j: [] for j in range(n_patterns)}
    if patterns_per_org is not None:
        for o in range(n_orgs):
            for k in range(patterns_per_org):
                assign[(o + k) % n_patterns].append(o)
    patterns = []
    for j in range(n_patterns):
        mean = benign.copy()
        mean[j * pattern_width:(j + 1) * pattern_width] += shift
        orgs = tuple(assign[j]) if patterns_per_org is not None else None
        patterns.append(AttackPattern(mean, var.copy(), ClassLabel.MALICIOUS, orgs))
    return SyntheticConfig(patterns, benign, var, n_orgs=n_orgs, seed=seed, **kw)


@dataclass
class SyntheticStream:
    """Records plus their hidden ground truth.

    ``truth`` and ``pattern`` are evaluation data only; a record carries
    ``label`` only when it was selected as labeled.
    """

    records: list[LogRecord]
    truth: np.ndarray
    pattern: np.ndarray  # -1 for background

    def __len__(self) -> int:
        return len(self.records)

    def digest(self) -> str:
        h = hashlib.sha256()
        for r in self.records:
            h.update(r.to_json().encode("utf-8"))
            h.update(b"\n")
        return h.hexdigest()

    def to_jsonl(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.records)


def _make_records(prefix: str, X: np.ndarray, labels: list[ClassLabel | None], width: int,
                  start: int = 0) -> list[LogRecord]:
    names = [f"f{i:0{width}d}" for i in range(X.shape[1])]
    out = []
    for n, (row, label) in enumerate(zip(X, labels)):
        fields = dict(zip(names, (f"{v:.5f}" for v in row.tolist())))
        idx = start + n
        out.append(LogRecord(f"{prefix}-{idx:07d}", BASE_TS + idx * 1000, fields, label,
                             "synthetic" if label is not None else None))
    return out


def _sample(config: SyntheticConfig, rng: np.random.Generator, n: int, pattern_ids: list[int],
            drift: bool, start: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    d = config.n_features
    is_attack = rng.random(n) < config.attack_fraction if pattern_ids else np.zeros(n, dtype=bool)
    choice = rng.integers(0, max(len(pattern_ids), 1), size=n)
    noise = rng.standard_normal((n, d))
    pattern = np.where(is_attack, np.asarray(pattern_ids or [0])[choice], -1)
    means = np.tile(config.benign_mean, (n, 1))
    stds = np.tile(np.sqrt(config.benign_cov_diag), (n, 1))
    truth = np.zeros(n, dtype=np.int64)
    for j, p in enumerate(config.attack_patterns):
        rows = pattern == j
        if not rows.any():
            continue
        means[rows] = p.mean
        stds[rows] = np.sqrt(p.cov_diag)
        truth[rows] = int(p.label)
        if drift:
            for ev in sorted(config.drift_events, key=lambda e: e.at_record):
                if ev.pattern == j:
                    moved = rows & (np.arange(start, start + n) >= ev.at_record)
                    means[moved] = ev.new_mean
    return means + stds * noise, truth, pattern


def gen_synthetic(config: SyntheticConfig) -> list[SyntheticStream]:
    """Per-org streams; deterministic under ``config.seed``."""
    seqs = np.random.SeedSequence(config.seed).spawn(config.n_orgs)
    width = max(2, len(str(config.n_features - 1)))
    streams = []
    for org, ss in enumerate(seqs):
        rng = np.random.default_rng(ss)
        X, truth, pattern = _sample(config, rng, config.records_per_org, config.patterns_for(org), True)
        labeled = rng.random(config.records_per_org) < config.label_fraction
        labels = [ClassLabel(int(t)) if keep else None for t, keep in zip(truth, labeled)]
        streams.append(SyntheticStream(_make_records(f"o{org}", X, labels, width), truth, pattern))
    return streams


def gen_heldout(config: SyntheticConfig, n: int = 4000, seed_offset: int = 10_007) -> SyntheticStream:
    """Unlabeled evaluation stream over every pattern, using post-drift means."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, seed_offset]))
    final = SyntheticConfig.__new__(SyntheticConfig)
    final.__dict__.update(config.__dict__)
    final.attack_patterns = [AttackPattern(p.mean, p.cov_diag, p.label, None) for p in config.attack_patterns]
    for ev in sorted(config.drift_events, key=lambda e: e.at_record):
        final.attack_patterns[ev.pattern].mean = ev.new_mean
    final.drift_events = []
    X, truth, pattern = _sample(final, rng, n, list(range(len(final.attack_patterns))), False)
    width = max(2, len(str(config.n_features - 1)))
    return SyntheticStream(_make_records("heldout", X, [None] * n, width), truth, pattern)


def partition(stream: SyntheticStream, n_orgs: int, strategy: str = "round_robin",
              pattern_orgs: dict[int, Sequence[int]] | None = None) -> list[SyntheticStream]:
    """Split one stream into a disjoint cover of ``n_orgs`` streams.

    ``by_pattern`` sends pattern j round-robin over ``pattern_orgs[j]``
    (every org when unmapped) and spreads background round-robin.
    """
    if n_orgs < 1:
        raise ValueError("n_orgs must be >= 1")
    buckets: list[list[int]] = [[] for _ in range(n_orgs)]
    if strategy == "round_robin":
        for i in range(len(stream)):
            buckets[i % n_orgs].append(i)
    elif strategy == "by_pattern":
        pattern_orgs = pattern_orgs or {}
        cursors: dict[int, int] = {}
        for i, p in enumerate(stream.pattern.tolist()):
            targets = list(pattern_orgs.get(p, range(n_orgs))) if p >= 0 else list(range(n_orgs))
            if not targets:
                raise ValueError(f"pattern {p} is mapped to no org")
            k = cursors.get(p, 0)
            cursors[p] = k + 1
            buckets[targets[k % len(targets)]].append(i)
    else:
        raise ValueError(f"unknown partition strategy {strategy!r}")
    return [SyntheticStream([stream.records[i] for i in b], stream.truth[b], stream.pattern[b])
            for b in (np.asarray(b, dtype=np.intp) for b in buckets)]


def evaluate(model: Classifier, stream: SyntheticStream, schema: FeatureSchema) -> dict:
    """Accuracy/TPR/FPR of ``model`` against the hidden truth of ``stream``."""
    tp = fp = tn = fn = 0
    for rec, t in zip(stream.records, stream.truth.tolist()):
        pred = int(model.predict(featurize(rec, schema).values).predicted())
        if t == 1:
            tp += pred == 1
            fn += pred == 0
        else:
            fp += pred == 1
            tn += pred == 0
    n = tp + fp + tn + fn
    return {"n": n, "accuracy": (tp + tn) / n if n else 0.0,
            "tpr": tp / (tp + fn) if tp + fn else 0.0, "fpr": fp / (fp + tn) if fp + tn else 0.0}


# ---------------------------------------------------------------------------
# experiments

@dataclass
class ExperimentReport:
    model_kind: str
    n_orgs: int
    every_n_records: int
    stream_digests: list[str]
    isolated: list[dict]
    federated: list[dict]
    heldout: dict
    messages: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def metrics_jsonl(self) -> str:
        rows = []
        for arm in ("isolated", "federated"):
            for org, rep in enumerate(getattr(self, arm)):
                for r in rep["rounds"]:
                    rows.append({"arm": arm, "org": org, "round": r["round"],
                                 "records_processed": r["records_processed"], **{
                                     f"window_{k}": r["window"][k] for k in ("accuracy", "tpr", "fpr")}})
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)

    def to_text(self) -> str:
        h = self.heldout
        lines = [f"experiment: {self.model_kind}, {self.n_orgs} orgs, sharing every {self.every_n_records}",
                 "", f"{'org':>4} {'isolated_acc':>13} {'federated_acc':>14} {'iso_preq_acc':>13} {'fed_preq_acc':>13}"]
        for o in range(self.n_orgs):
            lines.append(f"{o:>4} {h['isolated'][o]['accuracy']:>13.4f} {h['federated'][o]['accuracy']:>14.4f} "
                         f"{self.isolated[o]['final']['cumulative']['accuracy']:>13.4f} "
                         f"{self.federated[o]['final']['cumulative']['accuracy']:>13.4f}")
        lines.append("")
        lines.append(f"held-out consensus accuracy {h['consensus']['accuracy']:.4f} "
                     f"(tpr {h['consensus']['tpr']:.4f}, fpr {h['consensus']['fpr']:.4f})")
        lines.append(f"mean isolated accuracy      {h['mean_isolated_accuracy']:.4f}")
        return "\n".join(lines) + "\n"


@dataclass
class ArmResult:
    reports: list[RunReport]
    models: list[Classifier]
    consensus: Classifier
    communities: list[Community]


def _run_arm(streams: Sequence[SyntheticStream], communities: list[Community], org_community: list[int],
             pcfg: PipelineConfig, kind: str, model_params: dict, concurrent: bool) -> ArmResult:
    orgs = [f"org{o}" for o in range(len(streams))]
    pipes = [Pipeline(pcfg, make_model(kind, pcfg.schema, model_params), orgs[o],
                      community=communities[org_community[o]].config) for o in range(len(streams))]
    if concurrent:
        errors: list[BaseException] = []

        def work(o: int) -> None:
            client = communities[org_community[o]].client(orgs[o])
            try:
                for rec in streams[o].records:
                    if pipes[o].process(rec):
                        pipes[o].share(client)
                pipes[o].drain_feedback()
            except BaseException as exc:  # surfaced after join
                errors.append(exc)
            finally:
                client.leave()

        threads = [threading.Thread(target=work, args=(o,), name=orgs[o]) for o in range(len(streams))]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if errors:
            raise errors[0]
    else:
        cursors = [0] * len(streams)
        live = set(range(len(streams)))
        while live:
            due = []
            for o in sorted(live):
                recs = streams[o].records
                while cursors[o] < len(recs):
                    rec = recs[cursors[o]]
                    cursors[o] += 1
                    if pipes[o].process(rec):
                        due.append(o)
                        break
                else:
                    live.discard(o)
            for o in sorted(set(range(len(streams))) - live):
                communities[org_community[o]].active.discard(orgs[o])
            posted: dict[int, int] = {}
            for o in due:
                env = pipes[o].outgoing()
                communities[org_community[o]].post(env.round, env)
                posted[o] = env.round
            for o in due:
                comm = communities[org_community[o]]
                if posted[o] not in comm.store.history:
                    comm.close(posted[o])
                pipes[o].incoming(comm.deliver(posted[o], orgs[o]))
    reports = [p.finish() for p in pipes]
    models = [p.model for p in pipes]
    first = communities[0]
    latest = first.store.latest_consensus()
    if latest is not None and len(communities) == 1:
        consensus = load_model(latest)
    else:
        consensus = load_model(merge([_export(m) for m in models], seed=0))
    return ArmResult(reports, models, consensus, communities)


def _export(model: Classifier):
    from fedstream.model_core import export
    return export(model, "final", 0)


def run_experiment(config: SyntheticConfig, model_kind: str = "nb", model_params: dict | None = None,
                   every_n_records: int = 2000, trust: Sequence[float] | None = None,
                   heldout_records: int = 4000, window: int = 1000, concurrent: bool = True,
                   bus: MessageBus | None = None, streams: list[SyntheticStream] | None = None) -> ExperimentReport:
    """Isolated vs federated arms over identical per-org streams, plus held-out evaluation."""
    model_params = dict(model_params or {})
    schema = config.schema()
    streams = streams if streams is not None else gen_synthetic(config)
    heldout = gen_heldout(config, heldout_records)
    pcfg = PipelineConfig(schema, model_kind, model_params, window=window)
    orgs = [f"org{o}" for o in range(config.n_orgs)]
    trust = list(trust) if trust is not None else [1.0] * config.n_orgs
    sched = SharingSchedule(every_n_records)

    iso_comms = [Community(CommunityConfig(f"solo-{org}", [(org, 1.0)], model_kind, sched,
                                           schema_hash=schema.digest), MessageBus(), config.seed)
                 for org in orgs]
    iso = _run_arm(streams, iso_comms, list(range(config.n_orgs)), pcfg, model_kind, model_params, concurrent)

    fed_comm = Community(CommunityConfig("community", list(zip(orgs, trust)), model_kind, sched,
                                         schema_hash=schema.digest), bus or MessageBus(), config.seed)
    fed = _run_arm(streams, [fed_comm], [0] * config.n_orgs, pcfg, model_kind, model_params, concurrent)

    iso_eval = [evaluate(m, heldout, schema) for m in iso.models]
    fed_eval = [evaluate(m, heldout, schema) for m in fed.models]
    cons_eval = evaluate(fed.consensus, heldout, schema)
    heldout_summary = {
        "n": len(heldout), "isolated": iso_eval, "federated": fed_eval, "consensus": cons_eval,
        "mean_isolated_accuracy": float(np.mean([e["accuracy"] for e in iso_eval])),
        "mean_federated_accuracy": float(np.mean([e["accuracy"] for e in fed_eval])),
    }
    return ExperimentReport(model_kind, config.n_orgs, every_n_records, [s.digest() for s in streams],
                            [r.to_dict() for r in iso.reports], [r.to_dict() for r in fed.reports],
                            heldout_summary, len(fed_comm.bus.messages))


def experiment_models(config: SyntheticConfig, model_kind: str = "nb", model_params: dict | None = None,
                      every_n_records: int = 2000, concurrent: bool = False,
                      bus: MessageBus | None = None) -> tuple[ArmResult, list[SyntheticStream]]:
    """Run only the federated arm and hand back its models (used for equivalence checks)."""
    schema = config.schema()
    streams = gen_synthetic(config)
    pcfg = PipelineConfig(schema, model_kind, dict(model_params or {}))
    orgs = [f"org{o}" for o in range(config.n_orgs)]
    comm = Community(CommunityConfig("community", [(o, 1.0) for o in orgs], model_kind,
                                     SharingSchedule(every_n_records), schema_hash=schema.digest),
                     bus or MessageBus(), config.seed)
    return _run_arm(streams, [comm], [0] * config.n_orgs, pcfg, model_kind, dict(model_params or {}),
                    concurrent), streams
