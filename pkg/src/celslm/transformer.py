"""A small decoder-only causal transformer with seeded random weights.

Attention only: each layer projects its input to per-head Q/K/V, runs causal
softmax attention with unscaled logits ``exp(q . k)``, concatenates the heads
and applies an output projection. The next layer consumes that output
directly. Token embeddings are supplied as real vectors; learned (seeded)
position embeddings are added and the ``gamma * r + b`` input transform is
applied once before the first layer.
"""
import hashlib
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ShapeError
from .tensor import as_matrix, matmul

SEGMENT_ORDER = {"context": 0, "user": 1, "generated": 2}
BYTES_PER_ELEMENT = 8


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    num_heads: int
    head_dim: int
    hidden_size: int | None = None
    max_positions: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.hidden_size is None:
            object.__setattr__(self, "hidden_size", self.num_heads * self.head_dim)
        if self.num_layers < 1 or self.num_heads < 1 or self.head_dim < 1:
            raise ValueError("num_layers, num_heads and head_dim must all be >= 1")
        if self.hidden_size != self.num_heads * self.head_dim:
            raise ValueError(
                f"hidden_size {self.hidden_size} != num_heads*head_dim "
                f"({self.num_heads}*{self.head_dim})"
            )
        if self.max_positions < 1:
            raise ValueError("max_positions must be >= 1")

    @classmethod
    def from_dict(cls, d):
        known = {"num_layers", "num_heads", "head_dim", "hidden_size", "max_positions", "seed"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return {
            "num_layers": self.num_layers,
            "num_heads": self.num_heads,
            "head_dim": self.head_dim,
            "hidden_size": self.hidden_size,
            "max_positions": self.max_positions,
            "seed": self.seed,
        }


@dataclass
class LayerWeights:
    wq: np.ndarray  # (heads, hidden, head_dim)
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray  # (hidden, hidden)


class Model:
    """Immutable-after-init weights for one toy model."""

    def __init__(self, config, layers, pos_emb, gamma, bias):
        self.config = config
        self.layers = layers
        self.pos_emb = pos_emb
        self.gamma = gamma
        self.bias = bias

    def checksum(self):
        """Hex SHA-256 over all weights, for golden comparisons."""
        h = hashlib.sha256()
        for lw in self.layers:
            for w in (lw.wq, lw.wk, lw.wv, lw.wo):
                h.update(np.ascontiguousarray(w).tobytes())
        for w in (self.pos_emb, self.gamma, self.bias):
            h.update(np.ascontiguousarray(w).tobytes())
        return h.hexdigest()

    def project_qkv(self, x, layer, head, counter=None):
        """Return ``(x @ W_Q, x @ W_K, x @ W_V)`` for one layer/head."""
        cfg = self.config
        if not 0 <= layer < cfg.num_layers:
            raise IndexError(f"layer {layer} out of range [0, {cfg.num_layers})")
        if not 0 <= head < cfg.num_heads:
            raise IndexError(f"head {head} out of range [0, {cfg.num_heads})")
        x = as_matrix(x, "x")
        if x.shape[1] != cfg.hidden_size:
            raise ShapeError(f"x has {x.shape[1]} columns, model hidden_size is {cfg.hidden_size}")
        lw = self.layers[layer]
        out = tuple(matmul(x, w[head]) for w in (lw.wq, lw.wk, lw.wv))
        if counter is not None:
            counter.macs += 3 * x.shape[0] * cfg.hidden_size * cfg.head_dim
        return out

    def input_transform(self, embeddings, start):
        return self.gamma * (embeddings + self.pos_emb[start:start + embeddings.shape[0]]) + self.bias


def init_model(config):
    """Draw all weights uniformly from [-0.1, 0.1] with a seeded generator."""
    rng = np.random.default_rng(config.seed)
    h, k, d = config.hidden_size, config.num_heads, config.head_dim
    layers = []
    for _ in range(config.num_layers):
        wq = rng.uniform(-0.1, 0.1, size=(k, h, d))
        wk = rng.uniform(-0.1, 0.1, size=(k, h, d))
        wv = rng.uniform(-0.1, 0.1, size=(k, h, d))
        wo = rng.uniform(-0.1, 0.1, size=(h, h))
        layers.append(LayerWeights(wq, wk, wv, wo))
    pos_emb = rng.uniform(-0.1, 0.1, size=(config.max_positions, h))
    return Model(config, layers, pos_emb, np.ones(h), np.zeros(h))


@dataclass
class OpCounter:
    """Exact tallies of the scalar operations a forward pass performs."""

    macs: int = 0
    exps: int = 0
    adds: int = 0
    compares: int = 0
    divs: int = 0

    @property
    def flops(self):
        # a multiply-add is two floating-point operations
        return 2 * self.macs + self.exps + self.adds + self.compares + self.divs

    def count_attention(self, nkeys, head_dim, value_dim=None):
        value_dim = head_dim if value_dim is None else value_dim
        self.macs += nkeys * head_dim + nkeys * value_dim
        self.exps += nkeys
        self.adds += 2 * nkeys  # shift subtraction + normalizer sum
        self.compares += nkeys - 1
        self.divs += value_dim

    def __add__(self, other):
        return OpCounter(
            self.macs + other.macs,
            self.exps + other.exps,
            self.adds + other.adds,
            self.compares + other.compares,
            self.divs + other.divs,
        )


def causal_attention(q, k, v, offset=0, counter=None):
    """Causal softmax attention with unscaled logits.

    Query row ``i`` attends keys ``0 .. offset + i``. Returns ``(O, sigma)``
    where ``sigma[i]`` is the raw normalizer ``sum_j exp(q_i . k_j)``.
    """
    q = as_matrix(q, "Q")
    k = as_matrix(k, "K")
    v = as_matrix(v, "V")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"Q dim {q.shape[1]} != K dim {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"K rows {k.shape[0]} != V rows {v.shape[0]}")
    if k.shape[0] < offset + q.shape[0]:
        raise ShapeError(
            f"{q.shape[0]} queries at offset {offset} need {offset + q.shape[0]} keys, got {k.shape[0]}"
        )
    out, mant, shift = kernels.causal_attention(q, k, v, offset)
    if counter is not None:
        for i in range(q.shape[0]):
            counter.count_attention(offset + i + 1, q.shape[1], v.shape[1])
    return out, mant * np.exp(shift)


class KVCache:
    """Per-layer, per-head keys and values plus a segment map.

    ``keys[l]`` and ``values[l]`` have shape ``(heads, positions, head_dim)``.
    ``positions`` holds absolute position indices and ``tags`` the segment
    ("context", "user" or "generated") of each cached row.
    """

    def __init__(self, keys, values, positions=None, tags=None, provenance=None):
        self.keys = [np.ascontiguousarray(k, dtype=np.float64) for k in keys]
        self.values = [np.ascontiguousarray(v, dtype=np.float64) for v in values]
        n = self.keys[0].shape[1] if self.keys else 0
        self.positions = list(range(n)) if positions is None else list(positions)
        self.tags = ["context"] * n if tags is None else list(tags)
        self.provenance = dict(provenance or {})
        self._validate()

    @classmethod
    def empty(cls, num_layers, num_heads, head_dim):
        z = [np.zeros((num_heads, 0, head_dim)) for _ in range(num_layers)]
        return cls(z, [a.copy() for a in z])

    def _validate(self):
        n = len(self.positions)
        if len(self.tags) != n:
            raise ShapeError("positions and tags differ in length")
        for l, (k, v) in enumerate(zip(self.keys, self.values)):
            if k.shape != v.shape:
                raise ShapeError(f"layer {l}: K shape {k.shape} != V shape {v.shape}")
            if k.shape[1] != n:
                raise ShapeError(f"layer {l}: {k.shape[1]} cached rows but {n} positions")
        if any(b <= a for a, b in zip(self.positions, self.positions[1:])):
            raise ValueError("cache positions must be strictly increasing")
        order = [SEGMENT_ORDER[t] for t in self.tags]
        if any(b < a for a, b in zip(order, order[1:])):
            raise ValueError("segments must be ordered context < user < generated")

    @property
    def num_layers(self):
        return len(self.keys)

    @property
    def num_heads(self):
        return self.keys[0].shape[0]

    @property
    def head_dim(self):
        return self.keys[0].shape[2]

    @property
    def num_positions(self):
        return len(self.positions)

    @property
    def next_position(self):
        return self.positions[-1] + 1 if self.positions else 0

    def append(self, new_keys, new_values, positions, tag):
        """Append rows to every layer. ``new_keys[l]`` is ``(heads, n, dim)``."""
        self.keys = [np.concatenate([a, b], axis=1) for a, b in zip(self.keys, new_keys)]
        self.values = [np.concatenate([a, b], axis=1) for a, b in zip(self.values, new_values)]
        self.positions.extend(positions)
        self.tags.extend([tag] * len(positions))
        self._validate()

    def copy(self):
        return KVCache(
            [k.copy() for k in self.keys],
            [v.copy() for v in self.values],
            self.positions,
            self.tags,
            self.provenance,
        )

    def segment_rows(self, *tags):
        return [i for i, t in enumerate(self.tags) if t in tags]

    def nbytes(self, bytes_per_element=BYTES_PER_ELEMENT):
        return sum(k.size + v.size for k, v in zip(self.keys, self.values)) * bytes_per_element


def _forward(model, cache, embeddings, tag, counter=None):
    cfg = model.config
    x_in = as_matrix(embeddings, "embeddings")
    n = x_in.shape[0]
    if x_in.shape[1] != cfg.hidden_size:
        raise ShapeError(f"embeddings have {x_in.shape[1]} columns, hidden_size is {cfg.hidden_size}")
    start = cache.next_position
    if start + n > cfg.max_positions:
        raise ValueError(f"position overflow: {start + n} > max_positions {cfg.max_positions}")
    if cache.num_layers != cfg.num_layers or (cache.num_positions and cache.head_dim != cfg.head_dim):
        raise ShapeError("cache is inconsistent with the model")
    offset = cache.num_positions
    x = model.input_transform(x_in, start)
    new_k, new_v, outputs = [], [], []
    for l, lw in enumerate(model.layers):
        heads_out, ks, vs = [], [], []
        for h in range(cfg.num_heads):
            q, k, v = model.project_qkv(x, l, h, counter)
            k_all = np.concatenate([cache.keys[l][h], k], axis=0)
            v_all = np.concatenate([cache.values[l][h], v], axis=0)
            o, _ = causal_attention(q, k_all, v_all, offset, counter)
            heads_out.append(o)
            ks.append(k)
            vs.append(v)
        x = matmul(np.concatenate(heads_out, axis=1), lw.wo)
        if counter is not None:
            counter.macs += n * cfg.hidden_size * cfg.hidden_size
        outputs.append(x)
        new_k.append(np.stack(ks))
        new_v.append(np.stack(vs))
    cache.append(new_k, new_v, range(start, start + n), tag)
    return outputs


def prefill(model, embeddings, tag="context", counter=None):
    """Run every layer over ``embeddings``; return ``(cache, layer_outputs)``."""
    cfg = model.config
    cache = KVCache.empty(cfg.num_layers, cfg.num_heads, cfg.head_dim)
    outputs = _forward(model, cache, embeddings, tag, counter)
    return cache, outputs


def extend(model, cache, embeddings, tag="user", counter=None):
    """Process further rows on top of ``cache`` (mutated in place)."""
    return _forward(model, cache, embeddings, tag, counter)


def decode_step(model, cache, embedding, tag="generated", counter=None):
    """Process one position; returns ``(final-layer output row, cache)``."""
    row = np.asarray(embedding, dtype=np.float64).reshape(1, -1)
    outputs = _forward(model, cache, row, tag, counter)
    return outputs[-1][0], cache


def layer_op_count(config, n_new, n_past=0):
    """Closed-form :class:`OpCounter` for one layer processing ``n_new`` rows
    on top of ``n_past`` cached rows. Matches what the instrumented forward
    pass tallies per layer."""
    h, k, d = config.hidden_size, config.num_heads, config.head_dim
    c = OpCounter()
    # each new row i attends n_past + i + 1 keys in every head
    keys = k * (n_new * n_past + n_new * (n_new + 1) // 2)
    c.macs += 3 * k * n_new * h * d + n_new * h * h + 2 * keys * d
    c.exps += keys
    c.adds += 2 * keys
    c.compares += keys - k * n_new
    c.divs += k * n_new * d
    return c


def layer_io_bytes(config, n_new, n_past=0, bytes_per_element=BYTES_PER_ELEMENT):
    """Bytes moved through memory by one layer: weights, the K/V rows read,
    and the input/output activations."""
    h, k, d = config.hidden_size, config.num_heads, config.head_dim
    weights = 3 * k * h * d + h * h
    kv = 2 * k * (n_past + n_new) * d
    acts = 2 * n_new * h
    return (weights + kv + acts) * bytes_per_element


def decode_attention_flops(num_keys, num_heads, head_dim, batch=1):
    """Instrumented FLOPs of the attention core (scores, softmax, weighted
    values) for one decode step against ``num_keys`` cached positions.

    Measured by running the instrumented attention wrapper on random data so
    the count comes from the executed path, not from a formula.
    """
    rng = np.random.default_rng(0)
    counter = OpCounter()
    for _ in range(batch * num_heads):
        q = rng.standard_normal((1, head_dim))
        kv = rng.standard_normal((num_keys, head_dim))
        causal_attention(q, kv, kv, offset=num_keys - 1, counter=counter)
    return counter.flops


def attention_flops_estimate(batch, seq_len, num_heads, head_dim):
    """Closed-form per-layer attention estimate ``8 * b * m * k * d``."""
    return 8 * batch * seq_len * num_heads * head_dim
