"""Log-record parsing, schema-driven featurization and label feeds."""
from __future__ import annotations

import csv
import fnmatch
import io
import json
import math
import operator
import struct
from collections import Counter
from dataclasses import dataclass, field, replace
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from fedstream.model_core import ClassLabel, EnvelopeFormatError, Reader, fnv1a64

SCHEMA_FORMAT = "fedstream-schema"
SCHEMA_VERSION = 1
DEFAULT_BINS = 32


class ParseError(ValueError):
    def __init__(self, position: int, reason: str):
        super().__init__(f"parse error at {position}: {reason}")
        self.position = position
        self.reason = reason


class MissingField(ParseError):
    def __init__(self, name: str):
        super().__init__(0, f"missing required field {name!r}")
        self.field = name


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class LogRecord:
    record_id: str
    timestamp: int
    fields: Mapping[str, str] = field(default_factory=dict)
    label: ClassLabel | None = None
    label_source: str | None = None

    def __post_init__(self):
        if not self.record_id:
            raise ValueError("record_id must be nonempty")
        if self.timestamp < 0:
            raise ValueError("timestamp must be nonnegative")

    def to_json(self) -> str:
        obj: dict = {"id": self.record_id, "ts": self.timestamp}
        obj.update(self.fields)
        if self.label is not None:
            obj["label"] = str(self.label)
            if self.label_source:
                obj["label_source"] = self.label_source
        return json.dumps(obj, separators=(",", ":"))


# ---------------------------------------------------------------------------
# parsing

_ID_KEYS = ("record_id", "id")
_TS_KEYS = ("timestamp", "ts")
_RESERVED = set(_ID_KEYS + _TS_KEYS + ("label", "label_source"))


def _build_record(obj: Mapping, declared: Iterable[str] | None) -> LogRecord:
    rid = obj.get("record_id")
    if rid is None or rid == "":
        rid = obj.get("id")
    if rid is None or rid == "":
        raise MissingField("record_id")
    ts_raw = obj.get("timestamp")
    if ts_raw is None or ts_raw == "":
        ts_raw = obj.get("ts")
    if ts_raw is None or ts_raw == "":
        raise MissingField("timestamp")
    try:
        ts = int(ts_raw)
    except (TypeError, ValueError):
        raise ParseError(0, f"timestamp {ts_raw!r} is not an integer") from None
    if ts < 0:
        raise ParseError(0, f"negative timestamp {ts}")
    label = obj.get("label")
    if label in (None, ""):
        label = None
    else:
        try:
            label = ClassLabel.parse(label)
        except ValueError as exc:
            raise ParseError(0, str(exc)) from None
    keep = set(declared) if declared is not None else None
    fields = {k: v for k, v in obj.items() if type(v) is str and v}
    if len(fields) < len(obj):
        for k, v in obj.items():
            if v is None or v == "" or type(v) is str:
                continue
            fields[str(k)] = json.dumps(v) if isinstance(v, (dict, list)) else str(v)
    for k in _RESERVED.intersection(fields):
        del fields[k]
    if keep is not None:
        fields = {k: v for k, v in fields.items() if k in keep}
    source = obj.get("label_source") if label is not None else None
    return LogRecord(str(rid), ts, fields, label, source or None)


def parse_record(line: str, format: str = "jsonl", header: Sequence[str] | None = None,
                 declared: Iterable[str] | None = None) -> LogRecord:
    """Parse one input line.

    ``header`` is required for CSV.  When ``declared`` is given, only those
    extra fields are captured.
    """
    if not line or not line.strip():
        raise ParseError(0, "empty line")
    if format == "jsonl":
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(exc.pos, exc.msg) from None
        if not isinstance(obj, dict):
            raise ParseError(0, "JSON line is not an object")
    elif format == "csv":
        if header is None:
            raise ValueError("CSV parsing needs a header")
        rows = list(csv.reader(io.StringIO(line.rstrip("\r\n"))))
        if len(rows) != 1:
            raise ParseError(0, "expected exactly one CSV row")
        row = rows[0]
        if len(row) != len(header):
            raise ParseError(len(row), f"row has {len(row)} cells, header has {len(header)}")
        obj = dict(zip(header, row))
    else:
        raise ValueError(f"unknown input format {format!r}")
    return _build_record(obj, declared)


def read_records(lines: Iterable[str], format: str = "jsonl", errors: Counter | None = None,
                 declared: Iterable[str] | None = None):
    """Yield LogRecords from lines, counting (not raising) bad lines."""
    header = None
    for lineno, line in enumerate(lines):
        if format == "csv" and header is None:
            header = next(csv.reader([line.rstrip("\r\n")]))
            continue
        if not line.strip():
            continue
        try:
            yield parse_record(line, format, header, declared)
        except (ParseError, ValueError):
            if errors is not None:
                errors["parse_errors"] += 1


# ---------------------------------------------------------------------------
# schema

TRANSFORMS = ("value", "length", "entropy", "count", "log1p", "digit_ratio",
              "upper_ratio", "first_char", "is_ipv4", "ua_family", "extension",
              "tld", "depth", "param_count")


@dataclass(frozen=True)
class FeatureDef:
    name: str
    kind: str  # "numeric" | "categorical"
    source_field: str
    lo: float = 0.0
    hi: float = 1.0
    bins: int = DEFAULT_BINS
    categories: tuple[str, ...] = ()
    transform: str = "value"
    arg: str = ""

    def __post_init__(self):
        if self.kind not in ("numeric", "categorical"):
            raise SchemaError(f"{self.name}: kind must be numeric or categorical")
        if self.transform not in TRANSFORMS:
            raise SchemaError(f"{self.name}: unknown transform {self.transform!r}")
        if self.kind == "numeric":
            if not (math.isfinite(self.lo) and math.isfinite(self.hi) and self.lo < self.hi):
                raise SchemaError(f"{self.name}: need lo < hi, got [{self.lo}, {self.hi}]")
            if self.bins < 2:
                raise SchemaError(f"{self.name}: bin_count must be >= 2")
        elif not self.categories:
            raise SchemaError(f"{self.name}: categorical feature needs categories")

    @property
    def bin_count(self) -> int:
        # category 0 is reserved for missing/unknown values
        return len(self.categories) + 1 if self.kind == "categorical" else self.bins

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.lo + self.hi)

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind, "source": self.source_field}
        if self.transform != "value":
            d["transform"] = self.transform
        if self.arg:
            d["arg"] = self.arg
        if self.kind == "numeric":
            d["range"] = [float(self.lo), float(self.hi)]
            d["bins"] = self.bins
        else:
            d["categories"] = list(self.categories)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureDef":
        try:
            kind = d["kind"]
            common = dict(name=d["name"], kind=kind, source_field=d["source"],
                          transform=d.get("transform", "value"), arg=d.get("arg", ""))
            if kind == "numeric":
                lo, hi = d["range"]
                return cls(lo=float(lo), hi=float(hi), bins=int(d.get("bins", DEFAULT_BINS)), **common)
            return cls(categories=tuple(str(c) for c in d["categories"]), **common)
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, SchemaError):
                raise
            raise SchemaError(f"bad feature definition {dict(d)!r}: {exc}") from None


@dataclass(frozen=True)
class FeatureSchema:
    features: tuple[FeatureDef, ...]
    name: str = "custom"

    def __post_init__(self):
        if not self.features:
            raise SchemaError("schema needs at least one feature")
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise SchemaError(f"duplicate feature names: {dup}")

    @property
    def dim(self) -> int:
        return len(self.features)

    def canonical_text(self) -> str:
        doc = {"format": SCHEMA_FORMAT, "version": SCHEMA_VERSION,
               "features": [f.to_dict() for f in self.features]}
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @cached_property
    def digest(self) -> int:
        d = fnv1a64(self.canonical_text().encode("utf-8"))
        _REGISTRY.setdefault(d, self)
        return d

    @cached_property
    def geometry(self) -> "BinGeometry":
        return BinGeometry.from_schema(self)

    @cached_property
    def _compiled(self) -> "_CompiledSchema":
        return _CompiledSchema(self)

    def to_json(self) -> str:
        head = json.dumps({"format": SCHEMA_FORMAT, "version": SCHEMA_VERSION, "name": self.name})
        rows = ",\n  ".join(json.dumps(f.to_dict()) for f in self.features)
        return head[:-1] + ',\n "features": [\n  ' + rows + "\n ]\n}"

    @classmethod
    def from_json(cls, text: str) -> "FeatureSchema":
        doc = json.loads(text)
        if doc.get("format") != SCHEMA_FORMAT:
            raise SchemaError(f"not a schema file (format={doc.get('format')!r})")
        if doc.get("version") != SCHEMA_VERSION:
            raise SchemaError(f"unsupported schema version {doc.get('version')!r}")
        return cls(tuple(FeatureDef.from_dict(d) for d in doc["features"]), doc.get("name", "custom"))

    @classmethod
    def load(cls, path: str | Path) -> "FeatureSchema":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


_REGISTRY: dict[int, FeatureSchema] = {}


def schema_digest(schema: FeatureSchema) -> int:
    return schema.digest


def register_schema(schema: FeatureSchema) -> int:
    """Make a schema resolvable by digest (done implicitly once its digest is computed)."""
    return schema.digest


def lookup_schema(digest: int) -> FeatureSchema:
    try:
        return _REGISTRY[digest]
    except KeyError:
        raise SchemaError(f"schema {digest:016x} is not registered in this process") from None


def default_schema() -> FeatureSchema:
    """The shipped 81-feature HTTP-log schema."""
    text = resources.files("fedstream").joinpath("data/default_schema.json").read_text("utf-8")
    return FeatureSchema.from_json(text)


def numeric_schema(n: int, lo: float = 0.0, hi: float = 1.0, bins: int = DEFAULT_BINS,
                   prefix: str = "f") -> FeatureSchema:
    """n plain numeric features read from fields ``f00``, ``f01``, ..."""
    width = max(2, len(str(n - 1)))
    feats = tuple(FeatureDef(f"{prefix}{i:0{width}d}", "numeric", f"{prefix}{i:0{width}d}", lo, hi, bins)
                  for i in range(n))
    return FeatureSchema(feats, name=f"numeric-{n}")


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    schema_hash: int

    def __len__(self) -> int:
        return self.values.shape[0]


class BinGeometry:
    """Per-feature binning arrays shared by the histogram and tree models."""

    def __init__(self, is_cat, lo, hi, bins, schema_hash: int):
        self.is_cat = np.asarray(is_cat, dtype=bool)
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)
        self.bins = np.asarray(bins, dtype=np.int64)
        self.schema_hash = int(schema_hash)
        self.width = np.where(self.is_cat, 1.0, (self.hi - self.lo) / self.bins)
        self.origin = np.where(self.is_cat, 0.0, self.lo)
        self.max_bin = self.bins - 1
        self.span = np.where(self.is_cat, np.maximum(self.bins - 1, 1), self.hi - self.lo)
        self.feature_index = np.arange(self.bins.shape[0])
        # offsets into a (features * max_bins) flattening of per-class histograms
        self.flat_offset = self.feature_index * int(self.bins.max(initial=1))

    @classmethod
    def from_schema(cls, schema: FeatureSchema) -> "BinGeometry":
        f = schema.features
        return cls([d.kind == "categorical" for d in f],
                   [0.0 if d.kind == "categorical" else d.lo for d in f],
                   [float(d.bin_count - 1) if d.kind == "categorical" else d.hi for d in f],
                   [d.bin_count for d in f], schema.digest)

    @property
    def dim(self) -> int:
        return self.bins.shape[0]

    def bin_indices(self, x: np.ndarray) -> np.ndarray:
        # truncation equals floor once negatives are clamped to bin 0
        b = ((x - self.origin) / self.width).astype(np.intp)
        return np.minimum(np.maximum(b, 0), self.max_bin)

    def scaled(self, x: np.ndarray) -> np.ndarray:
        return (x - self.origin) / self.span

    def edge(self, feature: int, split_bin: int) -> float:
        """Upper edge of ``split_bin`` (left side holds bins <= split_bin)."""
        return float(self.origin[feature] + (split_bin + 1) * self.width[feature])

    def to_bytes(self) -> bytes:
        out = [struct.pack("<QI", self.schema_hash, self.dim)]
        for c, lo, hi, b in zip(self.is_cat, self.lo, self.hi, self.bins):
            out.append(struct.pack("<BddI", int(c), lo, hi, int(b)))
        return b"".join(out)

    @classmethod
    def from_reader(cls, r: Reader) -> "BinGeometry":
        schema_hash, n = r.unpack("QI")
        rows = [r.unpack("BddI") for _ in range(n)]
        if not rows:
            raise EnvelopeFormatError("geometry with zero features")
        c, lo, hi, b = zip(*rows)
        return cls(c, lo, hi, b, schema_hash)

    def __eq__(self, other) -> bool:
        return (isinstance(other, BinGeometry) and self.schema_hash == other.schema_hash
                and np.array_equal(self.bins, other.bins) and np.array_equal(self.lo, other.lo)
                and np.array_equal(self.hi, other.hi) and np.array_equal(self.is_cat, other.is_cat))


def nb_bin(fdef: FeatureDef, x: float) -> int:
    """Histogram bin of a feature value: equal-width with clamping, or category identity."""
    if fdef.kind == "categorical":
        b = math.floor(x)
    else:
        b = math.floor((x - fdef.lo) / ((fdef.hi - fdef.lo) / fdef.bins))
    return int(min(max(b, 0), fdef.bin_count - 1))


# ---------------------------------------------------------------------------
# featurization

def _entropy(s: str) -> float:
    if not s:
        return 0.0
    n = len(s)
    return -sum(c / n * math.log2(c / n) for c in Counter(s).values())


_UA_FAMILIES = (("curl", "curl"), ("wget", "wget"), ("python", "python"), ("java", "java"),
                ("go-http", "go"), ("bot", "bot"), ("spider", "bot"), ("crawl", "bot"),
                ("mozilla", "browser"))


def _transform(fdef: FeatureDef, raw: str | None):
    t = fdef.transform
    if t == "value":
        return raw
    if raw is None:
        return None
    if t == "length":
        return len(raw)
    if t == "entropy":
        return _entropy(raw)
    if t == "count":
        return sum(raw.count(ch) for ch in fdef.arg)
    if t == "log1p":
        try:
            v = float(raw)
        except ValueError:
            return None
        return math.log1p(v) if v >= 0 else None
    if t == "digit_ratio":
        return sum(ch.isdigit() for ch in raw) / len(raw) if raw else 0.0
    if t == "upper_ratio":
        return sum(ch.isupper() for ch in raw) / len(raw) if raw else 0.0
    if t == "first_char":
        return raw[:1] or None
    if t == "is_ipv4":
        parts = raw.split(".")
        return float(len(parts) == 4 and all(p.isdigit() and int(p) < 256 for p in parts))
    if t == "ua_family":
        low = raw.lower()
        if not low:
            return "empty"
        return next((fam for key, fam in _UA_FAMILIES if key in low), "other")
    if t == "extension":
        last = raw.split("?", 1)[0].rsplit("/", 1)[-1]
        return last.rsplit(".", 1)[1].lower() if "." in last else "none"
    if t == "tld":
        return raw.rsplit(".", 1)[-1].lower() if "." in raw else "none"
    if t == "depth":
        path = raw.split("?", 1)[0]
        return len([p for p in path.split("/") if p])
    if t == "param_count":
        q = raw.split("?", 1)[1] if "?" in raw else ""
        return len([p for p in q.split("&") if p])
    raise AssertionError(t)


class _CompiledSchema:
    def __init__(self, schema: FeatureSchema):
        self.schema = schema
        f = schema.features
        self.direct = [i for i, d in enumerate(f) if d.kind == "numeric" and d.transform == "value"]
        self.direct_src = [f[i].source_field for i in self.direct]
        self.take = (operator.itemgetter(*self.direct_src) if len(self.direct_src) > 1
                     else lambda d: [d[self.direct_src[0]]])
        self.other = [i for i in range(len(f)) if i not in set(self.direct)]
        self.lo = np.array([d.lo for d in f])
        self.hi = np.array([d.hi for d in f])
        self.mid = np.array([d.midpoint for d in f])
        self.cat_index = {i: {c: k + 1 for k, c in enumerate(f[i].categories)}
                          for i, d in enumerate(f) if d.kind == "categorical"}
        self.dlo = self.lo[self.direct]
        self.dhi = self.hi[self.direct]
        self.dmid = self.mid[self.direct]


def featurize(record: LogRecord, schema: FeatureSchema, counters: Counter | None = None) -> FeatureVector:
    """Map a record onto the schema.  Never raises on dirty data.

    Numeric values are clamped into their range; missing or unparseable
    numeric values become the range midpoint and missing or unknown
    categories become the reserved category 0.  Dirty fields are tallied in
    ``counters["dirty_fields"]`` when a counter is supplied.
    """
    cs = schema._compiled
    fields = record.fields
    out = np.empty(schema.dim, dtype=np.float64)
    dirty = 0
    if cs.direct:
        try:
            raw = cs.take(fields)
        except KeyError:
            raw = [fields.get(s) for s in cs.direct_src]
        try:
            v = np.array(raw, dtype=np.float64)
            bad = ~np.isfinite(v)
        except (TypeError, ValueError):
            v = np.empty(len(raw))
            bad = np.zeros(len(raw), dtype=bool)
            for j, r in enumerate(raw):
                try:
                    v[j] = float(r)
                    bad[j] = not math.isfinite(v[j])
                except (TypeError, ValueError):
                    bad[j] = True
        if bad.any():
            dirty += int(bad.sum())
            v = np.where(bad, cs.dmid, v)
        out[cs.direct] = np.minimum(np.maximum(v, cs.dlo), cs.dhi)
    feats = schema.features
    for i in cs.other:
        d = feats[i]
        val = _transform(d, fields.get(d.source_field))
        if d.kind == "categorical":
            code = cs.cat_index[i].get(val, 0) if val is not None else 0
            if code == 0:
                dirty += 1
            out[i] = float(code)
        else:
            try:
                x = float(val) if val is not None else math.nan
            except (TypeError, ValueError):
                x = math.nan
            if not math.isfinite(x):
                dirty += 1
                x = d.midpoint
            out[i] = min(max(x, d.lo), d.hi)
    if counters is not None and dirty:
        counters["dirty_fields"] += dirty
    return FeatureVector(out, schema.digest)


# ---------------------------------------------------------------------------
# label feeds

class LabelFeed(Protocol):
    name: str

    def lookup(self, record: LogRecord) -> tuple[ClassLabel, float] | None: ...


@dataclass
class StubLabelFeed:
    """Deterministic stand-in for a reputation service, keyed on glob patterns."""

    name: str
    rules: Sequence[tuple[str, ClassLabel, float]]
    field: str = "host"

    def __post_init__(self):
        self.rules = [(p, ClassLabel.parse(lbl), float(conf)) for p, lbl, conf in self.rules]
        for _, _, conf in self.rules:
            if not 0.0 <= conf <= 1.0:
                raise ValueError(f"confidence {conf} outside [0, 1]")

    def lookup(self, record: LogRecord) -> tuple[ClassLabel, float] | None:
        value = record.fields.get(self.field)
        if value is None:
            return None
        for pattern, label, conf in self.rules:
            if fnmatch.fnmatchcase(value.lower(), pattern.lower()):
                return label, conf
        return None


@dataclass
class TrafficRankFeed:
    """Benign proxy: hosts ranked within ``top_n`` of a traffic-rank table are labeled benign."""

    name: str
    ranks: Mapping[str, int]
    top_n: int = 1000
    field: str = "host"

    def lookup(self, record: LogRecord) -> tuple[ClassLabel, float] | None:
        host = record.fields.get(self.field)
        rank = self.ranks.get(host.lower()) if host else None
        if rank is None or rank > self.top_n:
            return None
        return ClassLabel.BENIGN, 1.0 - (rank - 1) / max(self.top_n, 1) * 0.5


def feeds_from_config(items: Sequence[Mapping]) -> list[LabelFeed]:
    feeds: list[LabelFeed] = []
    for item in items:
        if "ranks" in item:
            feeds.append(TrafficRankFeed(item["name"], {k.lower(): int(v) for k, v in item["ranks"].items()},
                                         int(item.get("top_n", 1000)), item.get("field", "host")))
        else:
            feeds.append(StubLabelFeed(item["name"], [tuple(r) for r in item["rules"]],
                                       item.get("field", "host")))
    return feeds


def attach_label(record: LogRecord, feeds: Sequence[LabelFeed]) -> LogRecord:
    """First answering feed wins.  Records that already carry a label are kept as they are."""
    if record.label is not None:
        return record
    for feed in feeds:
        hit = feed.lookup(record)
        if hit is not None:
            return replace(record, label=hit[0], label_source=feed.name)
    return record
