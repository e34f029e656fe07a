"""Segment-wise attention and exact recombination of partial results.

Attention over a key sequence split into a context segment (computed in the
cloud) and a user segment (computed at the edge) can be evaluated per segment
and merged exactly: each segment reports its partial output and its softmax
normalizer, and the merged output is the normalizer-weighted average of the
partial outputs.

Normalizers are carried as ``mantissa * exp(shift)`` where ``shift`` is the
segment's largest logit, so merging never overflows even when the two
segments' logits differ by hundreds.
"""
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import EmptySegmentError, ShapeError
from .tensor import as_matrix, as_vector, matmul
from .transformer import KVCache, _forward, decode_step, prefill


@dataclass(frozen=True)
class SegmentAttention:
    o: np.ndarray
    mantissa: float
    shift: float

    @property
    def sigma(self):
        """The raw normalizer ``sum_j exp(q . k_j)`` (may overflow to inf)."""
        try:
            return self.mantissa * math.exp(self.shift)
        except OverflowError:
            return math.inf

    @property
    def log_sigma(self):
        return math.log(self.mantissa) + self.shift


@dataclass(frozen=True)
class MergeWeights:
    alpha_ctx: float
    alpha_user: float


def segment_attention(q, k, v):
    q = as_vector(q, "q")
    k = as_matrix(k, "K")
    v = as_matrix(v, "V")
    if k.shape[0] == 0:
        raise EmptySegmentError("empty segment")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"K rows {k.shape[0]} != V rows {v.shape[0]}")
    if k.shape[1] != q.shape[0]:
        raise ShapeError(f"q dim {q.shape[0]} != K dim {k.shape[1]}")
    o, mant, shift = kernels.segment_attention(q, k, v)
    return SegmentAttention(o, mant, shift)


def merge_attention(ctx, user):
    """Combine two segments' partial attention.

    ``ctx`` may be ``None`` (no context rows): the user segment then carries
    all the weight. Returns ``(o_t, MergeWeights)``.
    """
    if ctx is None:
        return user.o.copy(), MergeWeights(0.0, 1.0)
    if user is None:
        return ctx.o.copy(), MergeWeights(1.0, 0.0)
    if ctx.o.shape != user.o.shape:
        raise ShapeError(f"head_dim mismatch: {ctx.o.shape[0]} vs {user.o.shape[0]}")
    shift = max(ctx.shift, user.shift)
    a = ctx.mantissa * math.exp(ctx.shift - shift)
    b = user.mantissa * math.exp(user.shift - shift)
    total = a + b
    w = MergeWeights(a / total, b / total)
    return w.alpha_ctx * ctx.o + w.alpha_user * user.o, w


def _split_kv(kv):
    k, v = kv
    return np.asarray(k, dtype=np.float64), np.asarray(v, dtype=np.float64)


def assemble_context(shared, local, peer=None, num_layers=None, num_heads=None, head_dim=None):
    """Build a context-only :class:`KVCache` from per-layer sources.

    ``shared`` (cloud), ``peer`` and ``local`` map 1-based layer numbers to
    ``(K, V)`` pairs of shape ``(heads, positions, head_dim)``. Together they
    must cover layers ``1..num_layers`` exactly once. The cache's
    ``provenance`` records where each layer came from.
    """
    sources = [("cloud", shared or {}), ("peer", peer or {}), ("local", local or {})]
    seen = {}
    for name, mapping in sources:
        for layer in mapping:
            if layer in seen:
                raise ValueError(f"duplicate layer {layer} (from {seen[layer]} and {name})")
            seen[layer] = name
    if num_layers is None:
        num_layers = max(seen) if seen else 0
    gaps = [l for l in range(1, num_layers + 1) if l not in seen]
    if gaps:
        raise ValueError("missing layer " + ", ".join(str(g) for g in gaps))
    extra = sorted(l for l in seen if not 1 <= l <= num_layers)
    if extra:
        raise ValueError(f"layers out of range 1..{num_layers}: {extra}")

    keys, values = [], []
    rows = None
    for layer in range(1, num_layers + 1):
        mapping = dict(sources)[seen[layer]]
        k, v = _split_kv(mapping[layer])
        if k.ndim != 3 or k.shape != v.shape:
            raise ShapeError(f"layer {layer}: K {k.shape} and V {v.shape} must match and be 3-D")
        if head_dim is not None and k.shape[2] != head_dim:
            raise ShapeError(f"layer {layer}: head_dim {k.shape[2]} != edge head_dim {head_dim}")
        if num_heads is not None and k.shape[0] != num_heads:
            raise ShapeError(f"layer {layer}: {k.shape[0]} heads != edge heads {num_heads}")
        if rows is None:
            rows, head_dim, num_heads = k.shape[1], k.shape[2], k.shape[0]
        elif k.shape[1] != rows:
            raise ShapeError(f"layer {layer}: {k.shape[1]} context positions, expected {rows}")
        keys.append(k)
        values.append(v)
    return KVCache(keys, values, provenance=seen)


def _merged_forward(model, context, user_cache, embeddings, tag):
    """Forward ``embeddings`` through ``model`` with every attention call split
    into a context segment (``context``) and the local user/generated segment
    (``user_cache``, mutated), merged per layer and head."""
    cfg = model.config
    n = embeddings.shape[0]
    s = context.num_positions if context is not None else 0
    start = user_cache.next_position if user_cache.num_positions else s
    if start + n > cfg.max_positions:
        raise ValueError(f"position overflow: {start + n} > max_positions {cfg.max_positions}")
    x = model.input_transform(embeddings, start)
    offset = user_cache.num_positions
    new_k, new_v, outputs = [], [], []
    for l, lw in enumerate(model.layers):
        heads_out, ks, vs = [], [], []
        for h in range(cfg.num_heads):
            q, k, v = model.project_qkv(x, l, h)
            k_user = np.concatenate([user_cache.keys[l][h], k], axis=0)
            v_user = np.concatenate([user_cache.values[l][h], v], axis=0)
            rows = []
            for i in range(n):
                upto = offset + i + 1
                usr = segment_attention(q[i], k_user[:upto], v_user[:upto])
                ctx = None
                if s:
                    ctx = segment_attention(q[i], context.keys[l][h], context.values[l][h])
                o, _ = merge_attention(ctx, usr)
                rows.append(o)
            heads_out.append(np.stack(rows))
            ks.append(k)
            vs.append(v)
        x = matmul(np.concatenate(heads_out, axis=1), lw.wo)
        outputs.append(x)
        new_k.append(np.stack(ks))
        new_v.append(np.stack(vs))
    user_cache.append(new_k, new_v, range(start, start + n), tag)
    return outputs


def collaborative_decode(edge_model, context_cache, user_embeddings, steps):
    """Prefill the user prompt and decode ``steps`` positions autoregressively.

    Every attention call attends the shared (read-only) ``context_cache`` and
    the edge-local user/generated segment separately and merges them. The
    first output is the final-layer output at the last user position; each
    later step feeds the previous output back in as the next embedding.
    Returns a ``(steps, hidden)`` array.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    cfg = edge_model.config
    user_embeddings = as_matrix(user_embeddings, "user_embeddings")
    if context_cache is not None and context_cache.num_positions == 0:
        context_cache = None
    if context_cache is not None:
        if context_cache.num_layers != cfg.num_layers or context_cache.head_dim != cfg.head_dim \
                or context_cache.num_heads != cfg.num_heads:
            raise ShapeError("context cache does not match the edge model (prune it first)")
    user_cache = KVCache.empty(cfg.num_layers, cfg.num_heads, cfg.head_dim)
    outs = _merged_forward(edge_model, context_cache, user_cache, user_embeddings, "user")
    results = [outs[-1][-1]]
    for _ in range(steps - 1):
        outs = _merged_forward(edge_model, context_cache, user_cache, results[-1][None, :], "generated")
        results.append(outs[-1][-1])
    return np.stack(results)


def plain_decode(model, user_embeddings, steps, context_embeddings=None):
    """Reference path without segment merging: monolithic prefill (of the
    optional context followed by the user prompt), then standard decoding."""
    user_embeddings = as_matrix(user_embeddings, "user_embeddings")
    if context_embeddings is not None and len(context_embeddings):
        cache, _ = prefill(model, context_embeddings)
        outs = _forward(model, cache, user_embeddings, "user")
    else:
        cache, outs = prefill(model, user_embeddings, tag="user")
    results = [outs[-1][-1]]
    for _ in range(steps - 1):
        out, cache = decode_step(model, cache, results[-1])
        results.append(out)
    return np.stack(results)


def random_merge_case(rng, max_len=64, max_dim=16):
    """One random ``(q, K, V, split)`` case; logits are scaled up to a few
    tens so the normalizers span many orders of magnitude."""
    d = int(rng.integers(1, max_dim + 1))
    n = int(rng.integers(2, 2 * max_len + 1))
    split = int(rng.integers(1, min(n, max_len + 1)))
    scale = 10.0 ** rng.uniform(-1.0, 0.5)
    q = rng.standard_normal(d) * scale
    k = rng.standard_normal((n, d))
    v = rng.standard_normal((n, d))
    return q, k, v, split


def merge_deviation(q, k, v, split):
    """``(max |merged - monolithic|, |alpha_ctx + alpha_user - 1|)`` for one case.
    The monolithic reference is a max-shifted softmax over all rows."""
    ctx = segment_attention(q, k[:split], v[:split])
    usr = segment_attention(q, k[split:], v[split:])
    merged, w = merge_attention(ctx, usr)
    logits = k @ q
    p = np.exp(logits - logits.max())
    ref = (p / p.sum()) @ v
    return float(np.max(np.abs(merged - ref))), abs(w.alpha_ctx + w.alpha_user - 1.0)


def merge_identity_suite(trials, seed, tol=1e-9):
    """Run ``trials`` random merge cases. Returns a dict with the worst
    deviations and, if the tolerance was exceeded, the offending case."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    worst, worst_alpha, failure = 0.0, 0.0, None
    for i in range(trials):
        q, k, v, split = random_merge_case(rng)
        dev, adev = merge_deviation(q, k, v, split)
        worst_alpha = max(worst_alpha, adev)
        if dev > worst:
            worst = dev
        if failure is None and dev > tol:
            failure = {"trial": i, "split": split, "q": q, "k": k, "v": v, "deviation": dev}
    return {"trials": trials, "seed": seed, "tolerance": tol, "max_abs_deviation": worst,
            "max_alpha_sum_deviation": worst_alpha, "failure": failure}
