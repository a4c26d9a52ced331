"""Online random forest: Hoeffding trees with Poisson(1) online bagging.

Split candidates come from the schema's bin edges, so a leaf only keeps
per-feature, per-bin class counts.  Merging draws constituent trees from
the shared ensembles in proportion to the merge weights (largest-remainder
apportionment) so the merged ensemble keeps exactly ``m`` trees.
"""
from __future__ import annotations

import copy
import hashlib
import math
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from fedstream.featurizer import BinGeometry, FeatureSchema
from fedstream.model_core import (
    ArchMismatch,
    ClassLabel,
    ClassScores,
    Classifier,
    EnvelopeFormatError,
    MergeWeights,
    Reader,
    SchemaMismatch,
    WeightArityMismatch,
    as_vector,
    pack_header,
    pack_section,
    pack_text,
    register,
    split_payload,
)

LN2 = math.log(2.0)


@dataclass(frozen=True)
class TreeParams:
    grace_period: int = 50
    split_confidence: float = 1e-6
    tie_threshold: float = 0.05
    max_depth: int = 20


def hoeffding_bound(n: float, delta: float, value_range: float = LN2) -> float:
    return math.sqrt(value_range * value_range * math.log(1.0 / delta) / (2.0 * n))


def _entropy(counts: np.ndarray) -> np.ndarray:
    """Natural-log entropy along the last axis (class axis)."""
    total = counts.sum(axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(total > 0, counts / total, 0.0)
        logs = np.where(p > 0, np.log(p), 0.0)
    return -(p * logs).sum(axis=-1)


class Node:
    __slots__ = ("feature", "split_bin", "threshold", "left", "right", "counts", "stats",
                 "since_attempt", "depth")

    def __init__(self, counts=None, depth: int = 0):
        self.feature = -1
        self.split_bin = 0
        self.threshold = 0.0
        self.left: Node | None = None
        self.right: Node | None = None
        self.counts = np.zeros(2) if counts is None else np.asarray(counts, dtype=np.float64)
        self.stats: np.ndarray | None = None
        self.since_attempt = 0.0
        self.depth = depth

    @property
    def is_leaf(self) -> bool:
        return self.feature < 0

    def proba(self) -> np.ndarray:
        total = self.counts.sum()
        if total <= 0:
            return np.array([0.5, 0.5])
        return self.counts / total


class HoeffdingTree:
    def __init__(self, geometry: BinGeometry, params: TreeParams = TreeParams(), root: Node | None = None):
        self.geometry = geometry
        self.params = params
        self.root = root if root is not None else Node()

    def leaf_for(self, bins: np.ndarray) -> Node:
        node = self.root
        while node.feature >= 0:
            node = node.left if bins[node.feature] <= node.split_bin else node.right
        return node

    def predict_proba(self, bins: np.ndarray) -> np.ndarray:
        return self.leaf_for(bins).proba()

    def learn(self, bins: np.ndarray, y: int, weight: float = 1.0) -> None:
        if weight <= 0:
            return
        leaf = self.leaf_for(bins)
        g = self.geometry
        if leaf.stats is None:
            leaf.stats = np.zeros((g.dim, int(g.bins.max()), 2))
        leaf.counts[y] += weight
        leaf.stats[np.arange(g.dim), bins, y] += weight
        leaf.since_attempt += weight
        if leaf.since_attempt >= self.params.grace_period and leaf.depth < self.params.max_depth:
            leaf.since_attempt = 0.0
            self._attempt_split(leaf)

    def candidate_gains(self, leaf: Node) -> tuple[np.ndarray, np.ndarray]:
        """Best information gain and its split bin for every feature."""
        g = self.geometry
        n = leaf.counts.sum()
        left = np.cumsum(leaf.stats, axis=1)
        right = leaf.counts[None, None, :] - left
        nl = left.sum(axis=-1)
        nr = right.sum(axis=-1)
        child = (nl * _entropy(left) + nr * _entropy(right)) / n
        gain = _entropy(leaf.counts) - child
        valid = np.arange(left.shape[1])[None, :] < (g.bins[:, None] - 1)
        valid &= (nl > 0) & (nr > 0)
        gain = np.where(valid, gain, -np.inf)
        best_bin = gain.argmax(axis=1)
        return gain[np.arange(g.dim), best_bin], best_bin

    def _attempt_split(self, leaf: Node) -> None:
        if np.count_nonzero(leaf.counts) < 2:
            return
        gains, bins = self.candidate_gains(leaf)
        order = np.argsort(-gains, kind="stable")
        best = order[0]
        g1 = gains[best]
        g2 = gains[order[1]] if len(order) > 1 else 0.0
        g2 = max(g2, 0.0)
        if not np.isfinite(g1) or g1 <= 0:
            return
        eps = hoeffding_bound(leaf.counts.sum(), self.params.split_confidence)
        if g1 - g2 > eps or eps < self.params.tie_threshold:
            self._split(leaf, int(best), int(bins[best]))

    def _split(self, leaf: Node, feature: int, split_bin: int) -> None:
        left_counts = leaf.stats[feature, : split_bin + 1].sum(axis=0)
        leaf.feature = feature
        leaf.split_bin = split_bin
        leaf.threshold = self.geometry.edge(feature, split_bin)
        leaf.left = Node(left_counts, leaf.depth + 1)
        leaf.right = Node(leaf.counts - left_counts, leaf.depth + 1)
        leaf.stats = None

    # -- structure ------------------------------------------------------------
    def nodes(self):
        stack = [self.root]
        while stack:
            node = stack.pop()
            yield node
            if not node.is_leaf:
                stack.append(node.right)
                stack.append(node.left)

    @property
    def n_nodes(self) -> int:
        return sum(1 for _ in self.nodes())

    @property
    def depth(self) -> int:
        return max(n.depth for n in self.nodes())

    def to_bytes(self) -> bytes:
        out = []
        for node in self.nodes():
            if node.is_leaf:
                out.append(struct.pack("<B2d", 0, *node.counts))
            else:
                out.append(struct.pack("<BIId2d", 1, node.feature, node.split_bin,
                                       node.threshold, *node.counts))
        return struct.pack("<I", len(out)) + b"".join(out)

    @classmethod
    def from_reader(cls, r: Reader, geometry: BinGeometry, params: TreeParams) -> "HoeffdingTree":
        count = r.unpack("I")
        remaining = [count]

        def build(depth: int) -> Node:
            if remaining[0] <= 0:
                raise EnvelopeFormatError("tree node list ended early")
            remaining[0] -= 1
            kind = r.unpack("B")
            if kind == 0:
                c0, c1 = r.unpack("2d")
                return Node([c0, c1], depth)
            if kind != 1:
                raise EnvelopeFormatError(f"unknown node kind {kind}")
            feature, split_bin, threshold, c0, c1 = r.unpack("IId2d")
            if feature >= geometry.dim or split_bin >= geometry.bins[feature] - 1:
                raise EnvelopeFormatError(f"split ({feature}, {split_bin}) outside the schema")
            node = Node([c0, c1], depth)
            node.feature, node.split_bin, node.threshold = feature, split_bin, threshold
            node.left = build(depth + 1)
            node.right = build(depth + 1)
            return node

        root = build(0)
        if remaining[0]:
            raise EnvelopeFormatError(f"{remaining[0]} unused tree nodes")
        return cls(geometry, params, root)

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def largest_remainder(a: Sequence[float], m: int) -> list[int]:
    """Integer allocation of ``m`` proportional to ``a`` (sum(a) == 1); ties go to the lower index."""
    quotas = [ai * m for ai in a]
    base = [math.floor(q + 1e-9) for q in quotas]
    rest = m - sum(base)
    # rounding keeps exact ties from being broken by float noise
    fracs = [round(max(q - b, 0.0), 9) for q, b in zip(quotas, base)]
    for i in sorted(range(len(a)), key=lambda i: (-fracs[i], i))[:max(rest, 0)]:
        base[i] += 1
    return base


def _rng_state_bytes(rng: np.random.Generator) -> bytes:
    st = rng.bit_generator.state
    s, inc = st["state"]["state"], st["state"]["inc"]
    mask = (1 << 64) - 1
    return struct.pack("<QQQQBI", s & mask, s >> 64, inc & mask, inc >> 64,
                       st["has_uint32"], st["uinteger"])


def _rng_from_reader(r: Reader) -> np.random.Generator:
    s_lo, s_hi, i_lo, i_hi, has, uint = r.unpack("QQQQBI")
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = {"bit_generator": "PCG64",
                               "state": {"state": s_lo | (s_hi << 64), "inc": i_lo | (i_hi << 64)},
                               "has_uint32": has, "uinteger": uint}
    return rng


@register
class Ensemble(Classifier):
    kind = "forest"
    kind_tag = b"FRST"
    section_tags = frozenset({b"GEOM", b"FRSH", b"TREE"})

    def __init__(self, trees: list[HoeffdingTree], geometry: BinGeometry, params: TreeParams,
                 rng: np.random.Generator, origins: list[tuple[str, int] | None] | None = None,
                 records_seen: int = 0):
        if not trees:
            raise ValueError("an ensemble needs at least one tree")
        self.trees = trees
        self.geometry = geometry
        self.params = params
        self.rng = rng
        self.origins = origins if origins is not None else [None] * len(trees)
        self.schema_hash = geometry.schema_hash
        self.records_seen = records_seen

    @classmethod
    def create(cls, schema: FeatureSchema, m: int = 20, seed: int = 0,
               params: TreeParams = TreeParams()) -> "Ensemble":
        return forest_init(m, schema, seed, params)

    @property
    def m(self) -> int:
        return len(self.trees)

    @property
    def dim(self) -> int:
        return self.geometry.dim

    def predict(self, x) -> ClassScores:
        return forest_predict(self, x)

    def train_one(self, x, y: ClassLabel) -> "Ensemble":
        return forest_train_one(self, x, y)

    def to_payload(self, org_id: str = "", round: int = 0) -> bytes:
        p = self.params
        head = struct.pack("<IIddI", self.m, p.grace_period, p.split_confidence, p.tie_threshold,
                           p.max_depth) + _rng_state_bytes(self.rng)
        out = [pack_header(self.kind_tag), pack_section(b"GEOM", self.geometry.to_bytes()),
               pack_section(b"FRSH", head)]
        for tree, origin in zip(self.trees, self.origins):
            org, rnd = origin if origin is not None else (org_id, round)
            out.append(pack_section(b"TREE", pack_text(org) + struct.pack("<Q", rnd) + tree.to_bytes()))
        return b"".join(out)

    @classmethod
    def from_payload(cls, payload: bytes) -> "Ensemble":
        _, sections = split_payload(payload, cls.kind_tag)
        tags = [t for t, _ in sections]
        if tags[:2] != [b"GEOM", b"FRSH"] or any(t != b"TREE" for t in tags[2:]):
            raise EnvelopeFormatError(f"forest payload sections {tags}")
        r = Reader(sections[0][1])
        geometry = BinGeometry.from_reader(r)
        r.done()
        r = Reader(sections[1][1])
        m, grace, delta, tau, max_depth = r.unpack("IIddI")
        rng = _rng_from_reader(r)
        r.done()
        if m != len(sections) - 2:
            raise EnvelopeFormatError(f"header announces {m} trees, found {len(sections) - 2}")
        params = TreeParams(grace, delta, tau, max_depth)
        trees, origins = [], []
        for _, body in sections[2:]:
            r = Reader(body)
            org = r.text()
            rnd = r.unpack("Q")
            trees.append(HoeffdingTree.from_reader(r, geometry, params))
            r.done()
            origins.append((org, rnd))
        return cls(trees, geometry, params, rng, origins)

    @classmethod
    def merge_models(cls, models: Sequence["Ensemble"], weights: MergeWeights,
                     seed: int = 0) -> "Ensemble":
        return forest_merge(list(models), weights, seed)

    def describe_blocks(self) -> list[str]:
        p = self.params
        lines = [f"GEOM  features={self.geometry.dim}",
                 f"FRSH  m={self.m} grace={p.grace_period} delta={p.split_confidence} "
                 f"tau={p.tie_threshold} max_depth={p.max_depth}"]
        for tree, origin in zip(self.trees, self.origins):
            tag = f"{origin[0]}@{origin[1]}" if origin else "local"
            lines.append(f"TREE  nodes={tree.n_nodes} depth={tree.depth} origin={tag}")
        return lines


def forest_init(m: int, schema: FeatureSchema, seed: int = 0, params: TreeParams = TreeParams()) -> Ensemble:
    if m < 1:
        raise ValueError(f"forest needs m >= 1, got {m}")
    g = schema.geometry
    return Ensemble([HoeffdingTree(g, params) for _ in range(m)], g, params, np.random.default_rng(seed))


def forest_train_one(e: Ensemble, x, y: ClassLabel) -> Ensemble:
    v = as_vector(x, e.dim)
    bins = e.geometry.bin_indices(v)
    weights = e.rng.poisson(1.0, size=e.m)
    yi = int(y)
    for tree, w in zip(e.trees, weights):
        if w:
            tree.learn(bins, yi, float(w))
    e.records_seen += 1
    return e


def forest_predict(e: Ensemble, x) -> ClassScores:
    v = as_vector(x, e.dim)
    bins = e.geometry.bin_indices(v)
    p = np.mean([t.predict_proba(bins) for t in e.trees], axis=0)
    return ClassScores(float(p[0]), float(p[1]))


def forest_merge(ensembles: Sequence[Ensemble], a: MergeWeights | Sequence[float], seed: int = 0) -> Ensemble:
    if not ensembles:
        raise ValueError("nothing to merge")
    if not isinstance(a, MergeWeights):
        a = MergeWeights(a)
    if len(a) != len(ensembles):
        raise WeightArityMismatch(f"{len(a)} weights for {len(ensembles)} ensembles")
    first = ensembles[0]
    m = first.m
    for e in ensembles[1:]:
        if e.geometry != first.geometry:
            raise SchemaMismatch("ensembles were built over different schemas")
        if e.m != m:
            raise ArchMismatch(f"ensemble sizes differ ({e.m} vs {m})")
    alloc = largest_remainder(a.a.tolist(), m)
    rng = np.random.default_rng(seed)
    trees, origins = [], []
    for e, n in zip(ensembles, alloc):
        if n == 0:
            continue
        for idx in np.sort(rng.choice(e.m, size=n, replace=False)):
            tree = e.trees[idx]
            trees.append(copy.deepcopy(tree, {id(tree.geometry): tree.geometry}))
            origins.append(e.origins[idx])
    return Ensemble(trees, first.geometry, first.params, rng, origins,
                    sum(e.records_seen for e in ensembles))
