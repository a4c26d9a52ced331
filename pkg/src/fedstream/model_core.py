"""Classifier contract, class scores, the model envelope and merge dispatch.

Every model family exchanged between organizations travels as a
:class:`ModelEnvelope`.  The envelope payload is a small binary grammar::

    payload  := kind_tag[4] version[1] section*
    section  := tag[4] length[u32 LE] body[length]

Only parameter sections are defined for each kind.  :func:`validate_payload`
rejects anything else, in particular the ``RREC`` tag that would carry raw
log-record content.
"""
from __future__ import annotations

import abc
import enum
import hashlib
import math
import struct
from dataclasses import dataclass, field
from typing import ClassVar, Iterable, Iterator, Sequence

import numpy as np

FORMAT_VERSION = 1
WIDE_FLAG = 0x80

ENVELOPE_MAGIC = b"FSEV"
ENVELOPE_VERSION = 1

RAW_RECORD_TAG = b"RREC"


class FedstreamError(Exception):
    """Base class for library errors."""


class DimensionMismatch(FedstreamError, ValueError):
    pass


class MixedKinds(FedstreamError, ValueError):
    pass


class KindMismatch(FedstreamError, ValueError):
    pass


class SchemaMismatch(FedstreamError, ValueError):
    pass


class WeightArityMismatch(FedstreamError, ValueError):
    pass


class ArchMismatch(FedstreamError, ValueError):
    pass


class EnvelopeFormatError(FedstreamError, ValueError):
    pass


class RawDataViolation(EnvelopeFormatError):
    """An envelope tried to carry a raw-record section."""


class ClassLabel(enum.IntEnum):
    BENIGN = 0
    MALICIOUS = 1

    @classmethod
    def parse(cls, value: "str | int | ClassLabel") -> "ClassLabel":
        if isinstance(value, ClassLabel):
            return value
        if isinstance(value, str):
            try:
                return cls[value.strip().upper()]
            except KeyError:
                raise ValueError(f"unknown class label {value!r}") from None
        return cls(int(value))

    def __str__(self) -> str:
        return self.name.lower()


@dataclass(frozen=True)
class ClassScores:
    benign: float
    malicious: float

    def __post_init__(self):
        for v in (self.benign, self.malicious):
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"class scores must be finite and >= 0, got {self}")

    def predicted(self) -> ClassLabel:
        # ties go to benign
        if self.malicious > self.benign:
            return ClassLabel.MALICIOUS
        return ClassLabel.BENIGN

    def malicious_ratio(self) -> float:
        total = self.benign + self.malicious
        if total <= 0:
            return 0.5
        return self.malicious / total

    def as_tuple(self) -> tuple[float, float]:
        return (self.benign, self.malicious)


class MergeWeights:
    """Nonnegative averaging weights normalized to unit L1 norm."""

    def __init__(self, weights: Iterable[float]):
        a = np.asarray(list(weights), dtype=np.float64)
        if a.ndim != 1 or a.size == 0:
            raise ValueError("merge weights need at least one entry")
        if not np.all(np.isfinite(a)) or np.any(a < 0):
            raise ValueError(f"merge weights must be finite and >= 0: {a}")
        # fsum is correctly rounded, so the normalization does not depend on order
        total = math.fsum(a.tolist())
        if total <= 0:
            raise ValueError("merge weights must not all be zero")
        self.a = a / total

    @classmethod
    def uniform(cls, n: int) -> "MergeWeights":
        return cls(np.ones(n))

    def __len__(self) -> int:
        return self.a.size

    def __iter__(self):
        return iter(self.a.tolist())

    def __repr__(self) -> str:
        return f"MergeWeights({self.a.tolist()})"


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


# ---------------------------------------------------------------------------
# payload sections

def pack_section(tag: bytes, body: bytes) -> bytes:
    assert len(tag) == 4
    return tag + struct.pack("<I", len(body)) + body


def pack_header(kind_tag: bytes, flags: int = 0) -> bytes:
    return kind_tag + bytes([FORMAT_VERSION | flags])


def iter_sections(payload: bytes, offset: int = 5) -> Iterator[tuple[bytes, bytes]]:
    n = len(payload)
    while offset < n:
        if offset + 8 > n:
            raise EnvelopeFormatError(f"truncated section header at byte {offset}")
        tag = payload[offset:offset + 4]
        (length,) = struct.unpack_from("<I", payload, offset + 4)
        start = offset + 8
        end = start + length
        if end > n:
            raise EnvelopeFormatError(f"section {tag!r} overruns payload ({end} > {n})")
        yield tag, payload[start:end]
        offset = end


def split_payload(payload: bytes, kind_tag: bytes) -> tuple[int, list[tuple[bytes, bytes]]]:
    """Check the header and return (flags, sections)."""
    if len(payload) < 5:
        raise EnvelopeFormatError("payload shorter than its header")
    if payload[:4] != kind_tag:
        raise EnvelopeFormatError(f"kind tag {payload[:4]!r} != {kind_tag!r}")
    version = payload[4] & ~WIDE_FLAG
    if version != FORMAT_VERSION:
        raise EnvelopeFormatError(f"unsupported payload version {version}")
    return payload[4] & WIDE_FLAG, list(iter_sections(payload))


class Reader:
    """Sequential little-endian reader over one section body."""

    def __init__(self, body: bytes):
        self.body = body
        self.pos = 0

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.body):
            raise EnvelopeFormatError("section body truncated")
        out = struct.unpack_from(fmt, self.body, self.pos)
        self.pos += size
        return out if len(out) > 1 else out[0]

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        size = dt.itemsize * count
        if self.pos + size > len(self.body):
            raise EnvelopeFormatError("section body truncated")
        out = np.frombuffer(self.body, dtype=dt, count=count, offset=self.pos)
        self.pos += size
        return out.astype(dt.newbyteorder("="))

    def text(self) -> str:
        n = self.unpack("H")
        if self.pos + n > len(self.body):
            raise EnvelopeFormatError("section body truncated")
        s = self.body[self.pos:self.pos + n].decode("utf-8")
        self.pos += n
        return s

    def done(self) -> None:
        if self.pos != len(self.body):
            raise EnvelopeFormatError(f"{len(self.body) - self.pos} trailing bytes in section")


def pack_text(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


# ---------------------------------------------------------------------------
# classifier contract

def as_vector(x, dim: int) -> np.ndarray:
    values = getattr(x, "values", x)
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != dim:
        raise DimensionMismatch(f"expected a vector of length {dim}, got shape {v.shape}")
    return v


class Classifier(abc.ABC):
    """A streaming binary classifier that can be shared as parameters only."""

    kind: ClassVar[str]
    kind_tag: ClassVar[bytes]
    section_tags: ClassVar[frozenset[bytes]]
    # additive models are merged by summation and shared as increments
    additive: ClassVar[bool] = False

    schema_hash: int
    records_seen: int

    @property
    @abc.abstractmethod
    def dim(self) -> int: ...

    @abc.abstractmethod
    def predict(self, x) -> ClassScores: ...

    @abc.abstractmethod
    def train_one(self, x, y: ClassLabel) -> "Classifier": ...

    @abc.abstractmethod
    def to_payload(self, org_id: str = "", round: int = 0) -> bytes: ...

    @classmethod
    @abc.abstractmethod
    def from_payload(cls, payload: bytes) -> "Classifier": ...

    @classmethod
    @abc.abstractmethod
    def merge_models(cls, models: Sequence["Classifier"], weights: MergeWeights,
                     seed: int = 0) -> "Classifier": ...

    def describe_blocks(self) -> list[str]:
        return []

    def copy(self) -> "Classifier":
        clone = type(self).from_payload(self.to_payload())
        clone.schema_hash = self.schema_hash
        clone.records_seen = self.records_seen
        return clone


KINDS: dict[str, type[Classifier]] = {}
_KIND_CODES = {"mlp": 1, "nb": 2, "forest": 3}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


def register(cls: type[Classifier]) -> type[Classifier]:
    KINDS[cls.kind] = cls
    return cls


def kind_class(kind: str) -> type[Classifier]:
    _load_builtin_kinds()
    try:
        return KINDS[kind]
    except KeyError:
        raise EnvelopeFormatError(f"unknown model kind {kind!r}") from None


def _load_builtin_kinds() -> None:
    if len(KINDS) < 3:
        from fedstream import forest_classifier, mlp_classifier, nb_classifier  # noqa: F401


# ---------------------------------------------------------------------------
# envelope

@dataclass
class ModelEnvelope:
    org_id: str
    model_kind: str
    schema_hash: int
    round: int
    records_seen: int
    payload: bytes = field(repr=False)

    def to_bytes(self) -> bytes:
        org = self.org_id.encode("utf-8")
        head = struct.pack("<4sBH", ENVELOPE_MAGIC, ENVELOPE_VERSION, len(org)) + org
        head += struct.pack("<BQQQI", _KIND_CODES[self.model_kind], self.schema_hash,
                            self.round, self.records_seen, len(self.payload))
        return head + self.payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelEnvelope":
        try:
            magic, version, org_len = struct.unpack_from("<4sBH", data, 0)
            if magic != ENVELOPE_MAGIC:
                raise EnvelopeFormatError(f"bad envelope magic {magic!r}")
            if version != ENVELOPE_VERSION:
                raise EnvelopeFormatError(f"unsupported envelope version {version}")
            pos = 7
            org_id = data[pos:pos + org_len].decode("utf-8")
            pos += org_len
            code, schema_hash, rnd, seen, plen = struct.unpack_from("<BQQQI", data, pos)
            pos += struct.calcsize("<BQQQI")
        except struct.error as exc:
            raise EnvelopeFormatError(f"truncated envelope header: {exc}") from None
        if code not in _CODE_KINDS:
            raise EnvelopeFormatError(f"unknown kind code {code}")
        payload = data[pos:pos + plen]
        if len(payload) != plen or pos + plen != len(data):
            raise EnvelopeFormatError("envelope length does not match its payload size")
        return cls(org_id, _CODE_KINDS[code], schema_hash, rnd, seen, payload)

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def validate_payload(kind: str, payload: bytes) -> None:
    """Structural check: the payload holds only parameter sections of ``kind``."""
    cls = kind_class(kind)
    _, sections = split_payload(payload, cls.kind_tag)
    for tag, _ in sections:
        if tag == RAW_RECORD_TAG:
            raise RawDataViolation("envelope embeds a raw-record section")
        if tag not in cls.section_tags:
            raise EnvelopeFormatError(f"section {tag!r} is not a {kind} parameter block")
    cls.from_payload(payload)


def validate_envelope(env: ModelEnvelope) -> None:
    validate_payload(env.model_kind, env.payload)


# ---------------------------------------------------------------------------
# operations

def predict(model: Classifier, x) -> ClassScores:
    return model.predict(x)


def train_one(model: Classifier, x, y: ClassLabel) -> Classifier:
    return model.train_one(x, ClassLabel.parse(y))


def export(model: Classifier, org_id: str, round: int) -> ModelEnvelope:
    return ModelEnvelope(org_id=org_id, model_kind=model.kind, schema_hash=model.schema_hash,
                         round=round, records_seen=model.records_seen,
                         payload=model.to_payload(org_id, round))


def load_model(env: ModelEnvelope) -> Classifier:
    model = kind_class(env.model_kind).from_payload(env.payload)
    if model.schema_hash != env.schema_hash:
        raise SchemaMismatch(
            f"payload schema {model.schema_hash:#x} != envelope schema {env.schema_hash:#x}")
    model.records_seen = env.records_seen
    return model


def check_compatible(envelopes: Sequence[ModelEnvelope]) -> None:
    kinds = {e.model_kind for e in envelopes}
    if len(kinds) > 1:
        raise MixedKinds(f"cannot merge model kinds {sorted(kinds)}")
    hashes = {e.schema_hash for e in envelopes}
    if len(hashes) > 1:
        raise SchemaMismatch(f"cannot merge models over {len(hashes)} different schemas")


def merge(envelopes: Sequence[ModelEnvelope], a: MergeWeights | Sequence[float] | None = None,
          seed: int = 0, org_id: str = "merged") -> ModelEnvelope:
    if not envelopes:
        raise ValueError("merge needs at least one envelope")
    check_compatible(envelopes)
    if a is None:
        a = MergeWeights.uniform(len(envelopes))
    elif not isinstance(a, MergeWeights):
        a = MergeWeights(a)
    if len(a) != len(envelopes):
        raise WeightArityMismatch(f"{len(a)} weights for {len(envelopes)} envelopes")
    models = [load_model(e) for e in envelopes]
    merged = type(models[0]).merge_models(models, a, seed)
    merged.records_seen = sum(e.records_seen for e in envelopes)
    rnd = max(e.round for e in envelopes)
    return export(merged, org_id, rnd)


def describe(env: ModelEnvelope) -> list[str]:
    """Human-readable header and parameter-block shapes (used by ``fedstream inspect``)."""
    cls = kind_class(env.model_kind)
    flags, sections = split_payload(env.payload, cls.kind_tag)
    lines = [
        f"org_id        {env.org_id}",
        f"model_kind    {env.model_kind}",
        f"schema_hash   {env.schema_hash:016x}",
        f"round         {env.round}",
        f"records_seen  {env.records_seen}",
        f"payload_bytes {len(env.payload)}",
        f"format        v{FORMAT_VERSION}{' wide-counts' if flags else ''}",
        "sections:",
    ]
    model = load_model(env)
    lines.extend("  " + s for s in model.describe_blocks())
    lines.append(f"  ({len(sections)} sections)")
    return lines
