"""Acceptance criteria. Each check prints one PASS/FAIL line.

Run under pytest (lines are collected in the terminal summary) or directly:
``python tests/test_acceptance.py``.
"""
import copy
import json
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from oracles import hsic_explicit, prune_error, prune_optimum  # noqa: E402

from celslm.cache_merge import merge_attention, segment_attention  # noqa: E402
from celslm.cost_pipeline import pipeline_schedule  # noqa: E402
from celslm.head_prune import (  # noqa: E402
    EXAMPLE_BANDWIDTH, EXAMPLE_FLOPS_RATE, WORKED_EXAMPLE, PruneSpec, delta_flops, delta_io_bytes,
    savings_report, select_channels,
)
from celslm.layer_match import SimilarityConfig, cka, hsic, match_models, rsm  # noqa: E402
from celslm.sim import MODES, run, sweep  # noqa: E402
from celslm.transformer import (  # noqa: E402
    ModelConfig, attention_flops_estimate, decode_attention_flops, decode_step, init_model, prefill,
)

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
RESULTS = []

pytestmark = pytest.mark.acceptance


def report(n, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] AC{n:<2d} {title}: {detail}"
    RESULTS.append(line)
    print(line)
    return ok


def _load(name):
    return json.loads((CONFIGS / name).read_text())


# 1 ------------------------------------------------------------------------
def check_merge_identity():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst, worst_alpha = 0.0, 0.0
    for _ in range(1000):
        d = int(rng.integers(1, 17))
        n_ctx, n_user = int(rng.integers(1, 65)), int(rng.integers(1, 65))
        q = rng.standard_normal(d) * 10.0 ** rng.uniform(-1, 0.5)
        k, v = rng.standard_normal((n_ctx + n_user, d)), rng.standard_normal((n_ctx + n_user, d))
        o, w = merge_attention(segment_attention(q, k[:n_ctx], v[:n_ctx]),
                               segment_attention(q, k[n_ctx:], v[n_ctx:]))
        z = k @ q
        p = np.exp(z - z.max())
        ref = p @ v / p.sum()
        worst = max(worst, float(np.max(np.abs(o - ref))))
        worst_alpha = max(worst_alpha, abs(w.alpha_ctx + w.alpha_user - 1.0))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-9 and worst_alpha <= 1e-12 and dt < 5
    return report(1, "merge identity", ok,
                  f"1000 cases, max|dev|={worst:.3g}, max|alpha sum-1|={worst_alpha:.3g}, {dt:.2f}s")


# 2 ------------------------------------------------------------------------
def check_incremental_decoding():
    rng = np.random.default_rng(99)
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(100):
        cfg = ModelConfig(int(rng.integers(1, 5)), int(rng.integers(1, 5)), int(rng.integers(1, 5)),
                          max_positions=32, seed=i)
        model = init_model(cfg)
        n = int(rng.integers(2, 13))
        split = int(rng.integers(1, n))
        emb = rng.standard_normal((n, cfg.hidden_size))
        _, full = prefill(model, emb)
        cache, _ = prefill(model, emb[:split])
        rows = [decode_step(model, cache, e)[0] for e in emb[split:]]
        worst = max(worst, float(np.max(np.abs(np.stack(rows) - full[-1][split:]))))
    dt = time.perf_counter() - t0
    return report(2, "incremental == monolithic decoding", worst <= 1e-9 and dt < 10,
                  f"100 sequences, max|dev|={worst:.3g}, {dt:.2f}s")


# 3 ------------------------------------------------------------------------
def check_cka_invariance():
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    worst = {"scale": 0.0, "orthogonal": 0.0, "permutation": 0.0}
    for _ in range(100):
        x = rng.standard_normal((16, 8))
        for a in (0.5, 2.5, -3.0):
            worst["scale"] = max(worst["scale"], abs(cka(x, a * x) - 1))
        q, _ = np.linalg.qr(rng.standard_normal((8, 8)))
        worst["orthogonal"] = max(worst["orthogonal"], abs(cka(x, x @ q) - 1))
        worst["permutation"] = max(worst["permutation"], abs(cka(x, x[:, rng.permutation(8)]) - 1))
    const = np.full((16, 8), 1.7)
    h_const = abs(hsic_explicit(rsm(const), rsm(const)))
    h_lib = abs(hsic(rsm(const), rsm(const)))
    dt = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-9 and h_lib <= 1e-12 and h_const <= 1e-12 and dt < 5
    detail = ", ".join(f"{k} {v:.2g}" for k, v in worst.items())
    return report(3, "CKA invariances", ok, f"max|CKA-1|: {detail}; HSIC(const)={h_lib:.2g}, {dt:.2f}s")


# 4 ------------------------------------------------------------------------
def check_self_match():
    model = init_model(ModelConfig(4, 2, 8, seed=11))
    rep = match_models(model, model, SimilarityConfig())
    pairs = [(m.edge_layer, m.cloud_layer) for m in rep.matches]
    diag = pairs == [(l, l) for l in range(1, 5)]
    worst = max(abs(m.cka - 1) for m in rep.matches) if rep.matches else math.inf
    return report(4, "self-match diagonal", diag and worst <= 1e-9,
                  f"pairs={pairs}, max|CKA-1|={worst:.2g}")


# 5 ------------------------------------------------------------------------
def check_savings_example():
    df, dio = delta_flops(WORKED_EXAMPLE), delta_io_bytes(WORKED_EXAMPLE)
    rep = savings_report(WORKED_EXAMPLE, EXAMPLE_FLOPS_RATE, EXAMPLE_BANDWIDTH)
    ms = rep.compute_seconds * 1e3
    ok = df == 134217728 and dio == 67174400 and abs(ms - 1.342) / 1.342 <= 0.005
    return report(5, "head-dim savings worked example", ok,
                  f"delta_flops={df}, compute saving={ms:.4f} ms, delta_io={dio} B, "
                  f"comm saving={rep.comm_seconds:.5f} s at 1e7 B/s")


# 6 ------------------------------------------------------------------------
def check_pruning_bound():
    t0 = time.perf_counter()
    rates = {}
    for d in (4, 6, 8):
        rng = np.random.default_rng(600 + d)
        spec = PruneSpec(0.5, d)
        good = 0
        for _ in range(200):
            q, k = rng.standard_normal((8, d)), rng.standard_normal((8, d))
            got = prune_error(q, k, select_channels(q, k, spec).kept)
            good += got <= 1.1 * prune_optimum(q, k, spec.retained) + 1e-12
        rates[d] = good / 200
    exact = True
    rng = np.random.default_rng(6)
    for d in (4, 6, 8):
        q, k = rng.standard_normal((8, d)), rng.standard_normal((8, d))
        for lam in (0.0, 1.0):
            spec = PruneSpec(lam, d)
            got = prune_error(q, k, select_channels(q, k, spec).kept)
            exact &= got == pytest.approx(prune_optimum(q, k, spec.retained), abs=1e-12)
    dt = time.perf_counter() - t0
    ok = min(rates.values()) >= 0.95 and exact and dt < 30
    detail = ", ".join(f"D={d}: {r:.1%}" for d, r in rates.items())
    return report(6, "pruning within 10% of optimum", ok, f"{detail}; lambda in {{0,1}} exact={exact}, {dt:.2f}s")


# 7 ------------------------------------------------------------------------
def check_pipeline_algebra():
    rng = np.random.default_rng(7)
    bad = 0
    for _ in range(1000):
        n = int(rng.integers(1, 20))
        layers = list(zip(rng.uniform(0, 10, n), rng.uniform(0, 10, n)))
        tr = pipeline_schedule(layers)
        bad += tr.pipelined_total > tr.sequential_total
    xs = rng.uniform(0, 10, 12).tolist()
    zeros = [0.0] * 12
    ident = (pipeline_schedule(list(zip(zeros, xs))).pipelined_total == sum(xs)
             and pipeline_schedule(list(zip(xs, zeros))).pipelined_total == sum(xs))
    hand = pipeline_schedule([(2, 3), (1, 2), (4, 5)])
    ok = bad == 0 and ident and (hand.pipelined_total, hand.sequential_total) == (14, 17)
    return report(7, "pipeline algebra", ok,
                  f"violations={bad}/1000, boundary identities={ident}, "
                  f"hand case {hand.pipelined_total:g} vs {hand.sequential_total:g}")


# 8 ------------------------------------------------------------------------
def check_sim_determinism():
    same, conserved, private = True, True, True
    for cfg in ("bottleneck.json", "outage.json", "minimal.json"):
        doc = _load(cfg)
        for mode in MODES:
            a, b = run(doc, mode), run(copy.deepcopy(doc), mode)
            same &= a.event_log_sha256() == b.event_log_sha256()
            agg = a.aggregates()
            conserved &= agg["requests"] == agg["completed"] + agg["failed"]
            if mode in ("ce_lslm", "naive_edge"):
                private &= a.counters["cloud_bound_user_bytes"] == 0
    return report(8, "simulator determinism and conservation", same and conserved and private,
                  f"identical logs={same}, issued==completed+failed={conserved}, zero user upload={private}")


# 9 ------------------------------------------------------------------------
def check_trend():
    t0 = time.perf_counter()
    rates = [1, 2, 4, 8, 16, 32]
    rows = sweep(_load("bottleneck.json"), rates)
    lat = {m: [rep.aggregates()["avg_latency_s"] for r, rep in rows if rep.mode == m] for m in MODES}
    thr = {m: [rep.aggregates()["throughput_rps"] for r, rep in rows if rep.mode == m] for m in MODES}
    # equal loads can differ by float rounding of absolute timestamps; 1 ns slack
    mono = all(b >= a - 1e-9 for m in MODES for a, b in zip(lat[m], lat[m][1:]))
    faster = lat["ce_lslm"][-1] < lat["cached_cloud"][-1]
    ratio = thr["ce_lslm"][-1] / thr["cached_cloud"][-1]
    dt = time.perf_counter() - t0
    ok = mono and faster and ratio >= 2 and dt < 60
    return report(9, "latency/throughput trends", ok,
                  f"monotone={mono}, latency@32 ce_lslm={lat['ce_lslm'][-1]:.3f}s vs "
                  f"cached_cloud={lat['cached_cloud'][-1]:.3f}s, throughput ratio={ratio:.2f}, {dt:.2f}s")


# 10 -----------------------------------------------------------------------
def check_disconnection():
    doc = _load("outage.json")
    seeded, bare = copy.deepcopy(doc), copy.deepcopy(doc)
    for n in seeded["nodes"]:
        if n["role"] == "edge":
            n["historical_cache"] = ["sys"]
    for n in bare["nodes"]:
        n.pop("historical_cache", None)
    a, b = run(seeded, "ce_lslm"), run(bare, "ce_lslm")
    all_done = all(r.status == "completed" for r in a.records)
    all_failed = all(r.status == "failed" and r.reason == "cloud unreachable" for r in b.records)
    return report(10, "disconnection resilience", all_done and all_failed,
                  f"seeded: {len(a.completed)}/{len(a.records)} completed; "
                  f"unseeded: {len(b.failed)}/{len(b.records)} failed 'cloud unreachable'")


# 11 -----------------------------------------------------------------------
def check_flops_crosscheck():
    b, k, d = 1, 4, 16
    parts, ok = [], True
    for m in (16, 64):
        got = decode_attention_flops(m, k, d, b)
        est = attention_flops_estimate(b, m, k, d)
        rel = abs(got - est) / est
        ok &= rel <= 0.05
        parts.append(f"m={m}: instrumented {got} vs 8bmkd {est} (ratio {got / est:.3f})")
    return report(11, "FLOPs accounting cross-check", ok, "; ".join(parts))


CHECKS = [
    check_merge_identity, check_incremental_decoding, check_cka_invariance, check_self_match,
    check_savings_example, check_pruning_bound, check_pipeline_algebra, check_sim_determinism,
    check_trend, check_disconnection, check_flops_crosscheck,
]


@pytest.mark.parametrize("check", CHECKS, ids=[f"AC{i}_{c.__name__[6:]}" for i, c in enumerate(CHECKS, 1)])
def test_acceptance(check):
    assert check()


if __name__ == "__main__":
    results = [c() for c in CHECKS]
    print(f"{sum(results)}/{len(results)} criteria passed")
    sys.exit(0 if all(results) else 1)
