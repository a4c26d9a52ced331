"""Histogram naive Bayes with merge-by-summation.

Each feature keeps one count histogram per class over the schema's bins.
For a record with bins b_i the class score is::

    score_k = prior_k * prod_i L_k,i(b_i) / E_i(b_i)
    L_k,i = h~_k,i / N~_k,i           E_i = sum_k h~_k,i / sum_k N~_k,i

where ``h~ = h + alpha`` per bin and ``N~_k,i = N_k + alpha * bins_i``.
The prior is ``(N_k + alpha) / (N_benign + N_malicious + 2 alpha)``.
Counts are stored raw; smoothing happens only at query time so that merged
histograms stay exact integer sums.
"""
from __future__ import annotations

import math
import struct
from typing import Sequence

import numpy as np

from fedstream.featurizer import BinGeometry, FeatureSchema
from fedstream.model_core import (
    WIDE_FLAG,
    ClassLabel,
    ClassScores,
    Classifier,
    EnvelopeFormatError,
    MergeWeights,
    Reader,
    SchemaMismatch,
    as_vector,
    pack_header,
    pack_section,
    register,
    split_payload,
)

DEFAULT_ALPHA = 1.0
# keeps exp() finite; scores beyond this are rescaled jointly (ratio preserved)
_MAX_LOG_SCORE = 700.0


class HistogramSet:
    """Per-class, per-feature bin counts plus the per-class record totals N_k."""

    def __init__(self, geometry: BinGeometry, counts: np.ndarray | None = None,
                 totals: np.ndarray | None = None):
        self.geometry = geometry
        shape = (2, geometry.dim, int(geometry.bins.max()))
        # contiguous so that flat views used for indexing alias the counts
        self.counts = np.zeros(shape, dtype=np.int64) if counts is None else np.ascontiguousarray(counts)
        self.totals = np.zeros(2, dtype=np.int64) if totals is None else totals
        if self.counts.shape != shape:
            raise ValueError(f"counts shape {self.counts.shape} != {shape}")
        self._norm = None
        self._sums = None
        self._groups = None

    @classmethod
    def empty(cls, schema: FeatureSchema) -> "HistogramSet":
        return cls(schema.geometry)

    @property
    def dim(self) -> int:
        return self.geometry.dim

    def copy(self) -> "HistogramSet":
        return HistogramSet(self.geometry, self.counts.copy(), self.totals.copy())

    def histogram(self, k: int, i: int) -> np.ndarray:
        return self.counts[k, i, : self.geometry.bins[i]]

    def check_consistent(self) -> None:
        if np.any(self.counts < 0) or np.any(self.totals < 0):
            raise ValueError("negative histogram counts")
        sums = self.counts.sum(axis=2)
        if not np.all(sums == self.totals[:, None]):
            raise ValueError("per-feature histogram sums disagree with the class totals")
        valid = np.arange(self.counts.shape[2])[None, :] < self.geometry.bins[:, None]
        if np.any(self.counts[:, ~valid]):
            raise ValueError("counts found outside a feature's bin range")

    def __eq__(self, other) -> bool:
        return (isinstance(other, HistogramSet) and self.geometry == other.geometry
                and np.array_equal(self.counts, other.counts)
                and np.array_equal(self.totals, other.totals))


def nb_observe(h: HistogramSet, x, y: ClassLabel) -> HistogramSet:
    v = as_vector(x, h.dim)
    g = h.geometry
    row = h.counts[int(y)].reshape(-1)
    row[g.flat_offset + g.bin_indices(v)] += 1
    h.totals[int(y)] += 1
    return h


def nb_likelihood_evidence(h: HistogramSet, i: int, xi: float,
                           alpha: float = DEFAULT_ALPHA) -> tuple[float, float, float]:
    g = h.geometry
    b = int(np.clip(np.floor((xi - g.origin[i]) / g.width[i]), 0, g.max_bin[i]))
    hk = h.counts[:, i, b] + alpha
    nk = h.totals + alpha * g.bins[i]
    with np.errstate(divide="ignore", invalid="ignore"):
        lk = hk / nk
        e = hk.sum() / nk.sum()
    return float(lk[0]), float(lk[1]), float(e)


def log_prior(h: HistogramSet, alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(h.totals + alpha) - np.log(h.totals.sum() + 2 * alpha)


def _normalizers(h: HistogramSet, alpha: float):
    """log N_k + alpha*B_i per class and log of the pooled denominator; cached on the class totals."""
    key = (h.totals.tobytes(), alpha)
    cached = h._norm
    if cached is not None and cached[0] == key:
        return cached[1]
    g = h.geometry
    nk = h.totals[:, None] + alpha * g.bins[None, :]
    with np.errstate(divide="ignore"):
        vals = (np.log(nk), np.log(nk.sum(axis=0)), log_prior(h, alpha))
    h._norm = (key, vals)
    return vals


def _normalizer_sums(h: HistogramSet, alpha: float) -> tuple[np.ndarray, float]:
    """prior_k - sum_i log N~_k,i and sum_i log(N~_0,i + N~_1,i), for alpha > 0.

    Features are grouped by bin count, so a change of the class totals costs
    a few scalar logs instead of array work.
    """
    n0, n1 = int(h.totals[0]), int(h.totals[1])
    key = (n0, n1, alpha)
    cached = h._sums
    if cached is not None and cached[0] == key:
        return cached[1]
    if h._groups is None:
        uniq, cnt = np.unique(h.geometry.bins, return_counts=True)
        h._groups = [(float(b), int(c)) for b, c in zip(uniq, cnt)]
    log = math.log
    pooled = n0 + n1 + 2 * alpha
    base = np.array([log(n + alpha) - log(pooled) - sum(c * log(n + alpha * b) for b, c in h._groups)
                     for n in (n0, n1)])
    both = sum(c * log(n0 + n1 + 2 * alpha * b) for b, c in h._groups)
    h._sums = (key, (base, both))
    return base, both


def nb_log_scores(h: HistogramSet, v: np.ndarray, alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    """Log of the per-class scores; -inf where a class has a zero likelihood."""
    g = h.geometry
    flat = g.flat_offset + g.bin_indices(v)
    hk = h.counts.reshape(2, -1).take(flat, axis=1) + alpha
    if alpha > 0:
        base, both = _normalizer_sums(h, alpha)
        return base + both + np.log(hk).sum(axis=1) - np.log(hk[0] + hk[1]).sum()
    log_nk, log_pooled, prior = _normalizers(h, alpha)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_l = np.log(hk) - log_nk
        log_e = np.log(hk[0] + hk[1]) - log_pooled
    # without smoothing an empty bin carries no information
    seen = np.isfinite(log_e)
    if not seen.all():
        log_l = log_l[:, seen]
        log_e = log_e[seen]
    return prior + np.add.reduce(log_l, axis=1) - np.add.reduce(log_e)


def nb_posterior(h: HistogramSet, x, alpha: float = DEFAULT_ALPHA) -> ClassScores:
    v = as_vector(x, h.dim)
    t = h.totals
    if t[0] == 0 and t[1] == 0:
        return ClassScores(0.5, 0.5)
    s0, s1 = nb_log_scores(h, v, alpha).tolist()
    shift = max(s0, s1) - _MAX_LOG_SCORE
    if shift > 0:
        s0, s1 = s0 - shift, s1 - shift
    return ClassScores(math.exp(s0), math.exp(s1))


def nb_merge(sets: Sequence[HistogramSet]) -> HistogramSet:
    if not sets:
        raise ValueError("nothing to merge")
    g = sets[0].geometry
    for s in sets[1:]:
        if s.geometry != g:
            raise SchemaMismatch("histogram sets were built over different schemas")
    counts = np.sum([s.counts for s in sets], axis=0)
    totals = np.sum([s.totals for s in sets], axis=0)
    return HistogramSet(g, counts, totals)


@register
class NaiveBayesModel(Classifier):
    kind = "nb"
    kind_tag = b"NBAY"
    section_tags = frozenset({b"GEOM", b"NBHP", b"NBCT"})
    additive = True

    def __init__(self, hist: HistogramSet, alpha: float = DEFAULT_ALPHA, records_seen: int = 0):
        self.hist = hist
        self.alpha = float(alpha)
        self.records_seen = records_seen
        self.schema_hash = hist.geometry.schema_hash
        self._base: HistogramSet | None = None

    @classmethod
    def create(cls, schema: FeatureSchema, alpha: float = DEFAULT_ALPHA) -> "NaiveBayesModel":
        return cls(HistogramSet.empty(schema), alpha)

    @property
    def dim(self) -> int:
        return self.hist.dim

    def predict(self, x) -> ClassScores:
        return nb_posterior(self.hist, x, self.alpha)

    def train_one(self, x, y: ClassLabel) -> "NaiveBayesModel":
        nb_observe(self.hist, x, y)
        self.records_seen += 1
        return self

    # -- incremental sharing ------------------------------------------------
    def share_delta(self) -> "NaiveBayesModel":
        """Counts accumulated since the last consensus was applied."""
        if self._base is None:
            hist = self.hist.copy()
        else:
            hist = HistogramSet(self.hist.geometry, self.hist.counts - self._base.counts,
                                self.hist.totals - self._base.totals)
        return NaiveBayesModel(hist, self.alpha, int(hist.totals.sum()))

    def mark_shared(self) -> None:
        self._base = self.hist.copy()

    # -- serialization --------------------------------------------------------
    def to_payload(self, org_id: str = "", round: int = 0) -> bytes:
        g = self.hist.geometry
        wide = int(self.hist.totals.max(initial=0)) > 0xFFFFFFFF
        dt = "<u8" if wide else "<u4"
        parts = [self.hist.totals.astype(dt).tobytes()]
        for k in range(2):
            for i in range(g.dim):
                parts.append(self.hist.counts[k, i, : g.bins[i]].astype(dt).tobytes())
        return (pack_header(self.kind_tag, WIDE_FLAG if wide else 0)
                + pack_section(b"GEOM", g.to_bytes())
                + pack_section(b"NBHP", struct.pack("<d", self.alpha))
                + pack_section(b"NBCT", b"".join(parts)))

    @classmethod
    def from_payload(cls, payload: bytes) -> "NaiveBayesModel":
        flags, sections = split_payload(payload, cls.kind_tag)
        found = dict(sections)
        if [t for t, _ in sections] != [b"GEOM", b"NBHP", b"NBCT"]:
            raise EnvelopeFormatError(f"nb payload sections {[t for t, _ in sections]}")
        r = Reader(found[b"GEOM"])
        g = BinGeometry.from_reader(r)
        r.done()
        r = Reader(found[b"NBHP"])
        alpha = r.unpack("d")
        r.done()
        r = Reader(found[b"NBCT"])
        dt = "u8" if flags & WIDE_FLAG else "u4"
        totals = r.array(dt, 2).astype(np.int64)
        hist = HistogramSet(g, totals=totals)
        for k in range(2):
            for i in range(g.dim):
                hist.counts[k, i, : g.bins[i]] = r.array(dt, int(g.bins[i]))
        r.done()
        try:
            hist.check_consistent()
        except ValueError as exc:
            raise EnvelopeFormatError(str(exc)) from None
        return cls(hist, alpha, int(totals.sum()))

    @classmethod
    def merge_models(cls, models: Sequence["NaiveBayesModel"], weights: MergeWeights,
                     seed: int = 0) -> "NaiveBayesModel":
        # weights are accepted for interface uniformity; histograms are summed unweighted
        merged = nb_merge([m.hist for m in models])
        return cls(merged, models[0].alpha, sum(m.records_seen for m in models))

    def describe_blocks(self) -> list[str]:
        g = self.hist.geometry
        return [f"GEOM  features={g.dim} bins(min/max)={g.bins.min()}/{g.bins.max()}",
                f"NBHP  alpha={self.alpha}",
                f"NBCT  classes=2 N_benign={self.hist.totals[0]} N_malicious={self.hist.totals[1]} "
                f"counts={2 * int(g.bins.sum())}"]
