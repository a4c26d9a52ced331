"""Share stores and community consensus.

Members post one :class:`ModelEnvelope` per sharing round.  Closing a round
merges the posted envelopes with the members' trust weights (restricted to
the members that actually posted and renormalized) and the result is handed
back to every member as the community consensus, which replaces the
member's local model.

Additive model kinds (naive Bayes) are shared as increments since the last
applied consensus; their consensus is the previous consensus plus the sum of
the posted increments, which keeps it equal to a model trained on the pooled
data of all members.
"""
from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from fedstream.model_core import (
    Classifier,
    EnvelopeFormatError,
    FedstreamError,
    KindMismatch,
    MergeWeights,
    ModelEnvelope,
    SchemaMismatch,
    export,
    kind_class,
    load_model,
    merge,
    validate_envelope,
)


class UnknownMember(FedstreamError, KeyError):
    pass


class DuplicatePost(FedstreamError, ValueError):
    pass


class EmptyRound(FedstreamError, ValueError):
    pass


@dataclass(frozen=True)
class SharingSchedule:
    every_n_records: int = 10_000

    def __post_init__(self):
        if self.every_n_records < 1:
            raise ValueError("every_n_records must be >= 1")


@dataclass
class CommunityConfig:
    community_id: str
    members: list[tuple[str, float]]
    model_kind: str
    schedule: SharingSchedule = field(default_factory=SharingSchedule)
    include_self: bool = True
    anchor_ratio: float = 0.0
    schema_hash: int | None = None

    def __post_init__(self):
        self.members = [(str(org), float(w)) for org, w in self.members]
        if not self.members:
            raise ValueError("a community needs at least one member")
        orgs = [org for org, _ in self.members]
        if len(set(orgs)) != len(orgs):
            raise ValueError("duplicate community members")
        if any(w < 0 for _, w in self.members) or sum(w for _, w in self.members) <= 0:
            raise ValueError("trust weights must be >= 0 with a positive sum")
        if not 0.0 <= self.anchor_ratio < 1.0:
            raise ValueError("anchor_ratio must lie in [0, 1)")
        cls = kind_class(self.model_kind)
        if cls.additive and (not self.include_self or self.anchor_ratio):
            raise ValueError(f"{self.model_kind} consensus is additive; include_self must stay on "
                             "and anchor_ratio must be 0")

    @property
    def org_ids(self) -> list[str]:
        return [org for org, _ in self.members]

    def trust(self, org: str) -> float:
        for o, w in self.members:
            if o == org:
                return w
        raise UnknownMember(org)

    def weights_for(self, orgs: Sequence[str]) -> MergeWeights:
        """Trust weights restricted to ``orgs`` and renormalized (uniform if they are all zero)."""
        raw = [self.trust(o) for o in orgs]
        if sum(raw) <= 0:
            raw = [1.0] * len(orgs)
        return MergeWeights(raw)

    @classmethod
    def single(cls, org_id: str, model_kind: str, every_n_records: int = 10_000,
               schema_hash: int | None = None) -> "CommunityConfig":
        return cls(f"solo-{org_id}", [(org_id, 1.0)], model_kind,
                   SharingSchedule(every_n_records), schema_hash=schema_hash)


class ShareStore:
    """Envelopes per (round, org) plus the consensus history of one community."""

    def __init__(self, config: CommunityConfig):
        self.config = config
        self.rounds: dict[int, dict[str, ModelEnvelope]] = {}
        self.history: dict[int, ModelEnvelope] = {}
        self._excluding: dict[tuple[int, str], ModelEnvelope] = {}
        self.lock = threading.RLock()

    def posted(self, round: int) -> list[str]:
        with self.lock:
            return sorted(self.rounds.get(round, {}), key=self.config.org_ids.index)

    def latest_consensus(self, before: int | None = None) -> ModelEnvelope | None:
        with self.lock:
            keys = [r for r in self.history if before is None or r < before]
            return self.history[max(keys)] if keys else None


def post_envelope(store: ShareStore, round: int, envelope: ModelEnvelope) -> str:
    cfg = store.config
    if envelope.org_id not in cfg.org_ids:
        raise UnknownMember(f"{envelope.org_id!r} is not a member of {cfg.community_id}")
    if envelope.model_kind != cfg.model_kind:
        raise KindMismatch(f"community shares {cfg.model_kind}, got {envelope.model_kind}")
    if cfg.schema_hash is not None and envelope.schema_hash != cfg.schema_hash:
        raise SchemaMismatch(f"community schema {cfg.schema_hash:016x}, got {envelope.schema_hash:016x}")
    validate_envelope(envelope)
    with store.lock:
        if round in store.history:
            raise DuplicatePost(f"round {round} is already closed")
        slot = store.rounds.setdefault(round, {})
        if envelope.org_id in slot:
            raise DuplicatePost(f"{envelope.org_id} already posted round {round}")
        slot[envelope.org_id] = envelope
    return f"ack {cfg.community_id}/{round}/{envelope.org_id}"


def _consensus(store: ShareStore, round: int, orgs: list[str], seed: int) -> ModelEnvelope:
    cfg = store.config
    envs = [store.rounds[round][o] for o in orgs]
    if kind_class(cfg.model_kind).additive:
        prev = store.latest_consensus(before=round)
        if prev is not None:
            envs = [prev, *envs]
        return merge(envs, MergeWeights.uniform(len(envs)), seed, org_id=cfg.community_id)
    return merge(envs, cfg.weights_for(orgs), seed, org_id=cfg.community_id)


def close_round(store: ShareStore, round: int, config: CommunityConfig | None = None,
                seed: int = 0) -> ModelEnvelope:
    if config is not None and config is not store.config:
        raise ValueError("store belongs to a different community config")
    with store.lock:
        if round in store.history:
            return store.history[round]
        orgs = store.posted(round)
        if not orgs:
            raise EmptyRound(f"nothing posted for round {round}")
        consensus = _consensus(store, round, orgs, seed)
        consensus.round = round
        store.history[round] = consensus
        return consensus


def consensus_for(store: ShareStore, round: int, org: str, seed: int = 0) -> ModelEnvelope:
    """The consensus a given member receives; with ``include_self`` off its own post is left out."""
    with store.lock:
        full = store.history[round]
        cfg = store.config
        orgs = store.posted(round)
        if cfg.include_self or org not in orgs or len(orgs) == 1:
            return full
        key = (round, org)
        if key not in store._excluding:
            env = _consensus(store, round, [o for o in orgs if o != org], seed)
            env.round = round
            store._excluding[key] = env
        return store._excluding[key]


def export_for_sharing(model: Classifier, org_id: str, round: int) -> ModelEnvelope:
    """Envelope a member posts: increments for additive kinds, full parameters otherwise."""
    if model.additive:
        delta = model.share_delta()
        return export(delta, org_id, round)
    return export(model, org_id, round)


def apply_consensus(local: Classifier, consensus: ModelEnvelope, anchor_ratio: float = 0.0) -> Classifier:
    if consensus.model_kind != local.kind:
        raise KindMismatch(f"local model is {local.kind}, consensus is {consensus.model_kind}")
    if consensus.schema_hash != local.schema_hash:
        raise SchemaMismatch("consensus was built over a different schema")
    if anchor_ratio and not local.additive:
        mine = export(local, "local", consensus.round)
        consensus = merge([consensus, mine], MergeWeights([1.0 - anchor_ratio, anchor_ratio]),
                          seed=consensus.round, org_id=consensus.org_id)
    model = load_model(consensus)
    if model.additive:
        model.mark_shared()
    return model


# ---------------------------------------------------------------------------
# transports

@dataclass
class Message:
    round: int
    sender: str
    recipient: str
    kind: str
    data: bytes

    def log_entry(self) -> dict:
        return {"round": self.round, "from": self.sender, "to": self.recipient, "kind": self.kind,
                "bytes": len(self.data), "digest": hashlib.sha256(self.data).hexdigest()}


class MessageBus:
    """In-process transport that keeps every wire message for auditing."""

    def __init__(self):
        self.messages: list[Message] = []
        self._lock = threading.Lock()

    def send(self, round: int, sender: str, recipient: str, kind: str, envelope: ModelEnvelope) -> ModelEnvelope:
        data = envelope.to_bytes()
        with self._lock:
            self.messages.append(Message(round, sender, recipient, kind, data))
        return ModelEnvelope.from_bytes(data)

    def ordered(self) -> list[Message]:
        with self._lock:
            return sorted(self.messages, key=lambda m: (m.round, m.kind != "post", m.sender, m.recipient))

    def write_log(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for msg in self.ordered():
                fh.write(json.dumps(msg.log_entry(), sort_keys=True) + "\n")

    def scan(self, forbidden: Iterable[str] = ()) -> list[str]:
        """Raw-data firewall check.

        Every message must parse as an envelope whose payload holds only
        parameter sections, and none may contain any of the ``forbidden``
        strings (record ids, raw field values).  Returns the violations.
        """
        needles = [s.encode("utf-8") for s in forbidden if s]
        problems = []
        for i, msg in enumerate(self.ordered()):
            try:
                validate_envelope(ModelEnvelope.from_bytes(msg.data))
            except EnvelopeFormatError as exc:
                problems.append(f"message {i} ({msg.sender}->{msg.recipient}): {exc}")
                continue
            for needle in needles:
                if needle in msg.data:
                    problems.append(f"message {i} ({msg.sender}) contains {needle!r}")
        return problems


class Community:
    """A share store wired to a message bus, usable from one thread per member."""

    def __init__(self, config: CommunityConfig, bus: MessageBus | None = None, seed: int = 0):
        self.config = config
        self.store = ShareStore(config)
        self.bus = bus if bus is not None else MessageBus()
        self.seed = seed
        self.active = set(config.org_ids)
        self._cond = threading.Condition(self.store.lock)

    def round_seed(self, round: int) -> int:
        return self.seed * 1_000_003 + round

    def post(self, round: int, envelope: ModelEnvelope) -> None:
        received = self.bus.send(round, envelope.org_id, self.config.community_id, "post", envelope)
        post_envelope(self.store, round, received)

    def close(self, round: int) -> ModelEnvelope:
        return close_round(self.store, round, self.config, self.round_seed(round))

    def deliver(self, round: int, org: str) -> ModelEnvelope:
        env = consensus_for(self.store, round, org, self.round_seed(round))
        return self.bus.send(round, self.config.community_id, org, "consensus", env)

    def _maybe_close(self, round: int) -> None:
        if round in self.store.rounds and set(self.store.posted(round)) >= self.active:
            self.close(round)
            self._cond.notify_all()

    def exchange(self, org: str, round: int, envelope: ModelEnvelope) -> ModelEnvelope:
        """Post and block until the round's consensus exists (concurrent mode)."""
        self.post(round, envelope)
        with self._cond:
            self._maybe_close(round)
            while round not in self.store.history:
                self._cond.wait()
        return self.deliver(round, org)

    def leave(self, org: str) -> None:
        with self._cond:
            self.active.discard(org)
            for r in sorted(self.store.rounds):
                if r not in self.store.history:
                    self._maybe_close(r)

    def client(self, org: str) -> "ShareClient":
        if org not in self.config.org_ids:
            raise UnknownMember(org)
        return ShareClient(self, org)


@dataclass
class ShareClient:
    community: Community
    org_id: str

    @property
    def config(self) -> CommunityConfig:
        return self.community.config

    def exchange(self, round: int, envelope: ModelEnvelope) -> ModelEnvelope:
        return self.community.exchange(self.org_id, round, envelope)

    def leave(self) -> None:
        self.community.leave(self.org_id)


class FileDropTransport:
    """One envelope file per (round, org): ``<root>/<community>/<round>/<org_id>.env``."""

    CONSENSUS_NAME = "_consensus.env"

    def __init__(self, root: str | Path, community_id: str):
        self.root = Path(root) / community_id

    def round_dir(self, round: int) -> Path:
        return self.root / str(round)

    def post(self, envelope: ModelEnvelope, round: int | None = None) -> Path:
        rnd = envelope.round if round is None else round
        d = self.round_dir(rnd)
        d.mkdir(parents=True, exist_ok=True)
        path = d / f"{envelope.org_id}.env"
        if path.exists():
            raise DuplicatePost(f"{path} already exists")
        tmp = path.with_suffix(".tmp")
        tmp.write_bytes(envelope.to_bytes())
        tmp.replace(path)
        return path

    def collect(self, round: int) -> list[ModelEnvelope]:
        d = self.round_dir(round)
        if not d.is_dir():
            return []
        return [ModelEnvelope.from_bytes(p.read_bytes())
                for p in sorted(d.glob("*.env")) if p.name != self.CONSENSUS_NAME]

    def publish_consensus(self, round: int, envelope: ModelEnvelope) -> Path:
        d = self.round_dir(round)
        d.mkdir(parents=True, exist_ok=True)
        path = d / self.CONSENSUS_NAME
        path.write_bytes(envelope.to_bytes())
        return path

    def consensus(self, round: int) -> ModelEnvelope | None:
        path = self.round_dir(round) / self.CONSENSUS_NAME
        return ModelEnvelope.from_bytes(path.read_bytes()) if path.exists() else None

    def close_round(self, store: ShareStore, round: int, seed: int = 0) -> ModelEnvelope:
        """Load the dropped envelopes into ``store``, close the round and publish the consensus."""
        for env in self.collect(round):
            if env.org_id not in store.posted(round):
                post_envelope(store, round, env)
        consensus = close_round(store, round, seed=seed)
        self.publish_consensus(round, consensus)
        return consensus


@dataclass
class FileDropClient:
    """Posts to a file drop and picks up the round's consensus if one was already published.

    Never blocks; with no consensus yet the local model is kept.
    """

    transport: FileDropTransport
    config: CommunityConfig

    def exchange(self, round: int, envelope: ModelEnvelope) -> ModelEnvelope | None:
        self.transport.post(envelope, round)
        return self.transport.consensus(round)
