"""The compute DAG at one organization.

    ingest -> parse -> attach label -> featurize -> (train | predict) -> share/merge
                                          ^
                      operator feedback --+

Labeled records are scored before they are trained on (test-then-train),
unlabeled records are scored and thresholded into alerts, and every
``every_n_records`` processed records the model is exported, exchanged with
the community and replaced by the consensus.
"""
from __future__ import annotations

import json
import logging
import queue
import threading
from collections import Counter, OrderedDict, deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from fedstream.federation import CommunityConfig, apply_consensus, export_for_sharing
from fedstream.featurizer import (
    FeatureSchema,
    LabelFeed,
    LogRecord,
    ParseError,
    attach_label,
    featurize,
    parse_record,
)
from fedstream.model_core import (
    ClassLabel,
    ClassScores,
    Classifier,
    FedstreamError,
    KindMismatch,
    ModelEnvelope,
    SchemaMismatch,
)

log = logging.getLogger(__name__)

FEEDBACK_QUEUE_CAPACITY = 1024


class UnknownRecord(FedstreamError, KeyError):
    pass


class DuplicateFeedback(FedstreamError, ValueError):
    pass


@dataclass
class PipelineConfig:
    schema: FeatureSchema
    model_kind: str = "nb"
    model_params: dict = field(default_factory=dict)
    community: CommunityConfig | None = None
    window: int = 1000
    threshold: float = 0.5
    retention: int = 100_000
    label_feeds: Sequence[LabelFeed] = ()
    input_format: str = "jsonl"

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("metrics window must be >= 1")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("alert threshold must lie in (0, 1)")
        if self.retention < 1:
            raise ValueError("retention must be >= 1")


def make_model(kind: str, schema: FeatureSchema, params: dict | None = None) -> Classifier:
    """Fresh model of ``kind`` bound to ``schema``."""
    params = dict(params or {})
    if kind == "nb":
        from fedstream.nb_classifier import NaiveBayesModel
        return NaiveBayesModel.create(schema, **params)
    if kind == "mlp":
        from fedstream.mlp_classifier import MlpHyper, MlpModel
        if "hidden_sizes" in params:
            params["hidden_sizes"] = tuple(params["hidden_sizes"])
        return MlpModel.create(schema, MlpHyper(**params))
    if kind == "forest":
        from fedstream.forest_classifier import Ensemble, TreeParams
        m = params.pop("m", 20)
        seed = params.pop("seed", 0)
        return Ensemble.create(schema, m, seed, TreeParams(**params))
    raise ValueError(f"unknown model kind {kind!r}")


# ---------------------------------------------------------------------------
# metrics

class PrequentialMetrics:
    """Sliding-window and cumulative confusion counts of test-then-train predictions."""

    def __init__(self, window: int = 1000):
        if window < 1:
            raise ValueError("window must be >= 1")
        self.window = window
        self._recent: deque[tuple[int, int]] = deque()
        self.win = Counter()
        self.cum = Counter()
        self.records_processed = 0
        self.alerts_emitted = 0

    @staticmethod
    def _cell(pred: int, truth: int) -> str:
        if truth == ClassLabel.MALICIOUS:
            return "tp" if pred == ClassLabel.MALICIOUS else "fn"
        return "fp" if pred == ClassLabel.MALICIOUS else "tn"

    def update(self, predicted: ClassLabel, truth: ClassLabel) -> "PrequentialMetrics":
        cell = self._cell(int(predicted), int(truth))
        self._recent.append((int(predicted), int(truth)))
        self.win[cell] += 1
        self.cum[cell] += 1
        if len(self._recent) > self.window:
            old = self._cell(*self._recent.popleft())
            self.win[old] -= 1
        return self

    @staticmethod
    def _rates(c: Counter) -> dict:
        tp, fp, tn, fn = c["tp"], c["fp"], c["tn"], c["fn"]
        n = tp + fp + tn + fn
        return {"n": n, "tp": tp, "fp": fp, "tn": tn, "fn": fn,
                "accuracy": (tp + tn) / n if n else 0.0,
                "tpr": tp / (tp + fn) if tp + fn else 0.0,
                "fpr": fp / (fp + tn) if fp + tn else 0.0}

    @property
    def window_rates(self) -> dict:
        return self._rates(self.win)

    @property
    def cumulative_rates(self) -> dict:
        return self._rates(self.cum)

    @property
    def accuracy(self) -> float:
        return self.window_rates["accuracy"]

    def snapshot(self) -> dict:
        return {"records_processed": self.records_processed, "alerts_emitted": self.alerts_emitted,
                "window": self.window_rates, "cumulative": self.cumulative_rates}


def prequential_update(metrics: PrequentialMetrics, predicted: ClassLabel, truth: ClassLabel) -> PrequentialMetrics:
    return metrics.update(predicted, truth)


# ---------------------------------------------------------------------------
# feedback store

@dataclass(frozen=True)
class FeedbackEvent:
    record_id: str
    label: ClassLabel
    operator_id: str
    ts: int = 0


class FeedbackStore:
    """Ring buffer of recent feature vectors plus a bounded queue of operator labels.

    Only (record_id, vector) pairs are retained, never raw records.
    ``submit`` may be called from another thread and blocks while the queue
    is full.
    """

    def __init__(self, capacity: int = 100_000, queue_capacity: int = FEEDBACK_QUEUE_CAPACITY):
        self.capacity = capacity
        self._ring: OrderedDict[str, np.ndarray] = OrderedDict()
        self._queue: queue.Queue[tuple[np.ndarray, ClassLabel]] = queue.Queue(maxsize=queue_capacity)
        self._given: set[tuple[str, str]] = set()
        self._lock = threading.Lock()

    def remember(self, record_id: str, vector: np.ndarray) -> None:
        with self._lock:
            self._ring[record_id] = vector
            self._ring.move_to_end(record_id)
            while len(self._ring) > self.capacity:
                self._ring.popitem(last=False)

    def __len__(self) -> int:
        return len(self._ring)

    def retained_bytes(self) -> int:
        with self._lock:
            return sum(v.nbytes for v in self._ring.values())

    def submit(self, event: FeedbackEvent) -> str:
        key = (event.record_id, event.operator_id)
        with self._lock:
            vec = self._ring.get(event.record_id)
            if vec is None:
                raise UnknownRecord(f"record {event.record_id!r} is outside the retention window")
            if key in self._given:
                raise DuplicateFeedback(f"{event.operator_id} already labeled {event.record_id}")
            self._given.add(key)
        self._queue.put((vec, ClassLabel.parse(event.label)))
        return f"ack feedback {event.record_id}"

    def drain(self) -> list[tuple[np.ndarray, ClassLabel]]:
        if not self._queue.qsize():
            return []
        out = []
        while True:
            try:
                out.append(self._queue.get_nowait())
            except queue.Empty:
                return out


def submit_feedback(store: FeedbackStore, event: FeedbackEvent) -> str:
    return store.submit(event)


def drain_feedback(store: FeedbackStore) -> list[tuple[np.ndarray, ClassLabel]]:
    return store.drain()


# ---------------------------------------------------------------------------
# the loop

class ShareClientLike(Protocol):
    config: CommunityConfig

    def exchange(self, round: int, envelope: ModelEnvelope) -> ModelEnvelope | None: ...


@dataclass
class RunReport:
    org_id: str
    records_processed: int = 0
    labeled: int = 0
    unlabeled: int = 0
    train_events: int = 0
    predict_events: int = 0
    feedback_trained: int = 0
    alerts: int = 0
    rounds: list[dict] = field(default_factory=list)
    counters: dict = field(default_factory=dict)
    final: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"org_id": self.org_id, "records_processed": self.records_processed,
                "labeled": self.labeled, "unlabeled": self.unlabeled,
                "train_events": self.train_events, "predict_events": self.predict_events,
                "feedback_trained": self.feedback_trained, "alerts": self.alerts,
                "counters": dict(sorted(self.counters.items())), "rounds": self.rounds,
                "final": self.final}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def to_text(self) -> str:
        lines = [f"run report: org {self.org_id}",
                 f"records_processed {self.records_processed}  labeled {self.labeled}  "
                 f"unlabeled {self.unlabeled}  alerts {self.alerts}",
                 f"train_events {self.train_events}  predict_events {self.predict_events}  "
                 f"feedback_trained {self.feedback_trained}"]
        lines += [f"{k} {v}" for k, v in sorted(self.counters.items())]
        lines.append("")
        lines.append(f"{'round':>5} {'records':>9} {'win_acc':>8} {'win_tpr':>8} {'win_fpr':>8} "
                     f"{'cum_acc':>8} {'alerts':>7}")
        rows = self.rounds + ([dict(self.final, round="final")] if self.final else [])
        for r in rows:
            w, c = r["window"], r["cumulative"]
            lines.append(f"{r['round']!s:>5} {r['records_processed']:>9} {w['accuracy']:>8.4f} "
                         f"{w['tpr']:>8.4f} {w['fpr']:>8.4f} {c['accuracy']:>8.4f} {r['alerts_emitted']:>7}")
        return "\n".join(lines) + "\n"


class Pipeline:
    """One organization's DAG instance; a single logical thread drives it."""

    def __init__(self, config: PipelineConfig, model: Classifier, org_id: str = "local",
                 feedback: FeedbackStore | None = None,
                 alert_sink: Callable[[dict], None] | None = None,
                 community: CommunityConfig | None = None):
        if model.schema_hash != config.schema.digest:
            raise SchemaMismatch("model and pipeline schema differ")
        if model.dim != config.schema.dim:
            raise SchemaMismatch("model dimension differs from the schema")
        community = community or config.community
        if community is not None:
            if community.model_kind != model.kind:
                raise KindMismatch(f"community shares {community.model_kind}, model is {model.kind}")
            if community.schema_hash is not None and community.schema_hash != model.schema_hash:
                raise SchemaMismatch("community schema differs from the model schema")
        self.config = config
        self.community = community
        self.model = model
        self.org_id = org_id
        self.feedback = feedback if feedback is not None else FeedbackStore(config.retention)
        self.alert_sink = alert_sink
        self.metrics = PrequentialMetrics(config.window)
        self.report = RunReport(org_id)
        self.counters: Counter = Counter()
        self.round = 0

    @property
    def every_n(self) -> int | None:
        return self.community.schedule.every_n_records if self.community else None

    def _train(self, x: np.ndarray, y: ClassLabel) -> None:
        self.model.train_one(x, y)
        self.report.train_events += 1

    def _predict(self, x: np.ndarray) -> ClassScores:
        self.report.predict_events += 1
        return self.model.predict(x)

    def drain_feedback(self) -> None:
        for vec, label in self.feedback.drain():
            self._train(vec, label)
            self.report.feedback_trained += 1

    def process(self, item: LogRecord | str) -> bool:
        """Run one input through the DAG.  Returns True when a sharing round is due."""
        self.drain_feedback()
        if isinstance(item, str):
            try:
                record = parse_record(item, self.config.input_format)
            except (ParseError, ValueError):
                self.counters["parse_errors"] += 1
                return False
        else:
            record = item
        if self.config.label_feeds:
            record = attach_label(record, self.config.label_feeds)
        x = featurize(record, self.config.schema, self.counters).values
        self.feedback.remember(record.record_id, x)
        scores = self._predict(x)
        if record.label is not None:
            self.report.labeled += 1
            self.metrics.update(scores.predicted(), record.label)
            self._train(x, record.label)
        else:
            self.report.unlabeled += 1
            ratio = scores.malicious_ratio()
            if ratio > self.config.threshold:
                self.metrics.alerts_emitted += 1
                if self.alert_sink is not None:
                    self.alert_sink({"record_id": record.record_id, "ts": record.timestamp,
                                     "scores": {"benign": scores.benign, "malicious": scores.malicious},
                                     "threshold": self.config.threshold})
        self.metrics.records_processed += 1
        self.report.records_processed += 1
        n = self.every_n
        return bool(n) and self.report.records_processed % n == 0

    def outgoing(self) -> ModelEnvelope:
        self.round += 1
        return export_for_sharing(self.model, self.org_id, self.round)

    def incoming(self, consensus: ModelEnvelope | None) -> None:
        if consensus is not None:
            anchor = self.community.anchor_ratio if self.community else 0.0
            self.model = apply_consensus(self.model, consensus, anchor)
        snap = self.metrics.snapshot()
        snap["round"] = self.round
        snap["model_records_seen"] = self.model.records_seen
        self.report.rounds.append(snap)

    def share(self, client: ShareClientLike) -> None:
        env = self.outgoing()
        self.incoming(client.exchange(self.round, env))

    def finish(self) -> RunReport:
        self.report.alerts = self.metrics.alerts_emitted
        self.report.counters = dict(self.counters)
        self.report.final = self.metrics.snapshot()
        self.report.final["model_records_seen"] = self.model.records_seen
        return self.report


def run_stream(source: Iterable[LogRecord | str], config: PipelineConfig, model: Classifier,
               share_client: ShareClientLike | None = None, org_id: str = "local",
               feedback: FeedbackStore | None = None,
               alert_sink: Callable[[dict], None] | None = None) -> tuple[RunReport, Classifier]:
    """Drive ``source`` through a :class:`Pipeline` and return (report, final model).

    Errors raised while reading ``source`` end the stream and are counted
    as ``io_errors``; they never escape.
    """
    community = getattr(share_client, "config", None) or config.community
    pipe = Pipeline(config, model, org_id, feedback, alert_sink, community)
    it = iter(source)
    try:
        while True:
            try:
                item = next(it)
            except StopIteration:
                break
            except OSError as exc:
                log.warning("source read failed after %d records: %s", pipe.report.records_processed, exc)
                pipe.counters["io_errors"] += 1
                break
            if pipe.process(item) and share_client is not None:
                pipe.share(share_client)
        pipe.drain_feedback()
    finally:
        leave = getattr(share_client, "leave", None)
        if leave is not None:
            leave()
    return pipe.finish(), pipe.model
