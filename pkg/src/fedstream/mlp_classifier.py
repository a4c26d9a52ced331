"""Small ReLU multilayer perceptron trained one record at a time.

Merging is a weighted average of every weight and bias across the shared
models, using one global :class:`MergeWeights` vector.

Inputs are rescaled to [0, 1] with the bound schema's ranges before the
first layer.  The scaling is not part of the payload (that keeps the default
envelope under 64 KiB); it is resolved from the schema registry by digest.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from fedstream.featurizer import FeatureSchema, lookup_schema
from fedstream.model_core import (
    ArchMismatch,
    ClassLabel,
    ClassScores,
    Classifier,
    EnvelopeFormatError,
    MergeWeights,
    Reader,
    WeightArityMismatch,
    as_vector,
    pack_header,
    pack_section,
    register,
    split_payload,
)

DEFAULT_HIDDEN = (64, 32, 16, 8, 4)


@dataclass
class MlpHyper:
    learning_rate: float = 0.01
    init_seed: int = 0
    hidden_sizes: tuple[int, ...] = DEFAULT_HIDDEN

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")


class MlpParams:
    """Layer list of (W, b) with W shaped (out, in)."""

    def __init__(self, layers: list[tuple[np.ndarray, np.ndarray]]):
        self.layers = layers
        self.check()

    def check(self) -> None:
        if not self.layers:
            raise ArchMismatch("network has no layers")
        prev = self.layers[0][0].shape[1]
        for w, b in self.layers:
            if w.ndim != 2 or w.shape[1] != prev or b.shape != (w.shape[0],):
                raise ArchMismatch(f"layer dims do not chain: {self.shapes}")
            prev = w.shape[0]
        if prev != 2:
            raise ArchMismatch(f"output dimension {prev} != 2")

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [w.shape for w, _ in self.layers]

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)

    def copy(self) -> "MlpParams":
        return MlpParams([(w.copy(), b.copy()) for w, b in self.layers])

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in self.layers])

    def bit_equal(self, other: "MlpParams") -> bool:
        return self.shapes == other.shapes and all(
            w1.tobytes() == w2.tobytes() and b1.tobytes() == b2.tobytes()
            for (w1, b1), (w2, b2) in zip(self.layers, other.layers))


def mlp_init(schema_dim: int, hidden_sizes: Sequence[int] = DEFAULT_HIDDEN, seed: int = 0) -> MlpParams:
    if not hidden_sizes:
        raise ValueError("hidden_sizes must be nonempty")
    rng = np.random.default_rng(seed)
    dims = [schema_dim, *hidden_sizes, 2]
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append((rng.uniform(-limit, limit, size=(fan_out, fan_in)), np.zeros(fan_out)))
    return MlpParams(layers)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def _forward(p: MlpParams, x: np.ndarray):
    acts = [x]
    pre = []
    a = x
    last = len(p.layers) - 1
    for idx, (w, b) in enumerate(p.layers):
        z = w @ a + b
        pre.append(z)
        a = z if idx == last else np.maximum(z, 0.0)
        acts.append(a)
    return pre, acts


def mlp_probs(p: MlpParams, x) -> np.ndarray:
    v = as_vector(x, p.input_dim)
    pre, _ = _forward(p, v)
    return _softmax(pre[-1])


def mlp_forward(p: MlpParams, x) -> ClassScores:
    probs = mlp_probs(p, x)
    return ClassScores(float(probs[0]), float(probs[1]))


def mlp_loss(p: MlpParams, x, y: ClassLabel) -> float:
    v = as_vector(x, p.input_dim)
    z = _forward(p, v)[0][-1]
    zmax = z.max()
    return float(zmax + np.log(np.exp(z - zmax).sum()) - z[int(y)])


def mlp_gradients(p: MlpParams, x, y: ClassLabel) -> list[tuple[np.ndarray, np.ndarray]]:
    """Cross-entropy gradients for one record, layer by layer."""
    v = as_vector(x, p.input_dim)
    pre, acts = _forward(p, v)
    delta = _softmax(pre[-1])
    delta[int(y)] -= 1.0
    grads = []
    for idx in range(len(p.layers) - 1, -1, -1):
        w, _ = p.layers[idx]
        grads.append((np.outer(delta, acts[idx]), delta))
        if idx:
            delta = (w.T @ delta) * (pre[idx - 1] > 0)
    grads.reverse()
    return grads


def mlp_step(p: MlpParams, x, y: ClassLabel, hyper: MlpHyper | float) -> MlpParams:
    lr = hyper if isinstance(hyper, (int, float)) else hyper.learning_rate
    grads = mlp_gradients(p, x, y)
    if lr == 0:
        return p
    for (w, b), (dw, db) in zip(p.layers, grads):
        w -= lr * dw
        b -= lr * db
    return p


def _weighted_sum(arrays: list[np.ndarray], a: np.ndarray) -> np.ndarray:
    terms = np.stack([ai * arr for ai, arr in zip(a, arrays)])
    # sorted accumulation makes the result independent of model order
    out = np.sort(terms, axis=0).sum(axis=0) if len(arrays) > 1 else terms[0]
    stack = np.stack(arrays)
    return np.clip(out, stack.min(axis=0), stack.max(axis=0))


def mlp_merge(models: Sequence[MlpParams], a: MergeWeights | Sequence[float]) -> MlpParams:
    if not models:
        raise ValueError("nothing to merge")
    if not isinstance(a, MergeWeights):
        a = MergeWeights(a)
    if len(a) != len(models):
        raise WeightArityMismatch(f"{len(a)} weights for {len(models)} models")
    shapes = models[0].shapes
    for m in models[1:]:
        if m.shapes != shapes:
            raise ArchMismatch(f"architectures differ: {shapes} vs {m.shapes}")
    # zero-weight members contribute nothing, not even rounding
    keep = [i for i, ai in enumerate(a.a) if ai > 0]
    w = a.a[keep]
    layers = []
    for li in range(len(shapes)):
        ws = [models[i].layers[li][0] for i in keep]
        bs = [models[i].layers[li][1] for i in keep]
        layers.append((_weighted_sum(ws, w), _weighted_sum(bs, w)))
    return MlpParams(layers)


@register
class MlpModel(Classifier):
    kind = "mlp"
    kind_tag = b"MLPN"
    section_tags = frozenset({b"MLPH", b"LAYR"})

    def __init__(self, params: MlpParams, schema_hash: int, learning_rate: float = 0.01,
                 init_seed: int = 0, records_seen: int = 0):
        self.params = params
        self.schema_hash = schema_hash
        self.learning_rate = float(learning_rate)
        self.init_seed = int(init_seed)
        self.records_seen = records_seen
        self._scaling: tuple[np.ndarray, np.ndarray] | None = None

    @classmethod
    def create(cls, schema: FeatureSchema, hyper: MlpHyper | None = None) -> "MlpModel":
        hyper = hyper or MlpHyper()
        params = mlp_init(schema.dim, hyper.hidden_sizes, hyper.init_seed)
        return cls(params, schema.digest, hyper.learning_rate, hyper.init_seed)

    @property
    def dim(self) -> int:
        return self.params.input_dim

    def _scale(self, x) -> np.ndarray:
        v = as_vector(x, self.dim)
        if self._scaling is None:
            g = lookup_schema(self.schema_hash).geometry
            if g.dim != self.dim:
                raise ArchMismatch(f"schema has {g.dim} features, network expects {self.dim}")
            self._scaling = (g.origin, g.span)
        offset, span = self._scaling
        return (v - offset) / span

    def predict(self, x) -> ClassScores:
        return mlp_forward(self.params, self._scale(x))

    def train_one(self, x, y: ClassLabel) -> "MlpModel":
        mlp_step(self.params, self._scale(x), y, self.learning_rate)
        self.records_seen += 1
        return self

    def to_payload(self, org_id: str = "", round: int = 0) -> bytes:
        head = struct.pack("<QIdQ", self.schema_hash, len(self.params.layers),
                           self.learning_rate, self.init_seed)
        out = [pack_header(self.kind_tag), pack_section(b"MLPH", head)]
        for w, b in self.params.layers:
            body = struct.pack("<II", *w.shape) + w.astype("<f8").tobytes() + b.astype("<f8").tobytes()
            out.append(pack_section(b"LAYR", body))
        return b"".join(out)

    @classmethod
    def from_payload(cls, payload: bytes) -> "MlpModel":
        _, sections = split_payload(payload, cls.kind_tag)
        tags = [t for t, _ in sections]
        if tags[:1] != [b"MLPH"] or any(t != b"LAYR" for t in tags[1:]):
            raise EnvelopeFormatError(f"mlp payload sections {tags}")
        r = Reader(sections[0][1])
        schema_hash, n_layers, lr, seed = r.unpack("QIdQ")
        r.done()
        if n_layers != len(sections) - 1:
            raise EnvelopeFormatError(f"header announces {n_layers} layers, found {len(sections) - 1}")
        layers = []
        for _, body in sections[1:]:
            r = Reader(body)
            rows, cols = r.unpack("II")
            w = r.array("f8", rows * cols).reshape(rows, cols)
            b = r.array("f8", rows)
            r.done()
            layers.append((w, b))
        try:
            params = MlpParams(layers)
        except ArchMismatch as exc:
            raise EnvelopeFormatError(str(exc)) from None
        return cls(params, schema_hash, lr, seed)

    @classmethod
    def merge_models(cls, models: Sequence["MlpModel"], weights: MergeWeights,
                     seed: int = 0) -> "MlpModel":
        first = models[0]
        params = mlp_merge([m.params for m in models], weights)
        return cls(params, first.schema_hash, first.learning_rate, first.init_seed,
                   sum(m.records_seen for m in models))

    def describe_blocks(self) -> list[str]:
        lines = [f"MLPH  layers={len(self.params.layers)} lr={self.learning_rate} "
                 f"init_seed={self.init_seed} params={self.params.n_params}"]
        lines += [f"LAYR  W {w.shape[0]}x{w.shape[1]}  b {b.shape[0]}" for w, b in self.params.layers]
        return lines
