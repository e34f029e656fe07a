import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from celslm.errors import ShapeError
from celslm.head_prune import (
    EXAMPLE_BANDWIDTH, WORKED_EXAMPLE, EXAMPLE_FLOPS_RATE, ChannelMask, DeltaParams, PruneSpec, delta_flops,
    delta_io_bytes, prune_cache, prune_objective, prune_objective_direct, savings_report, select_channels,
)
from celslm.transformer import ModelConfig, init_model, prefill

from oracles import prune_error, prune_optimum


def qk(seed, s=8, d=6):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((s, d)), rng.standard_normal((s, d))


@pytest.mark.parametrize("lam,d,r", [(0.0, 8, 8), (1.0, 8, 0), (0.5, 6, 3), (0.2, 80, 64), (0.3, 10, 7), (0.25, 3, 2)])
def test_retained(lam, d, r):
    assert PruneSpec(lam, d).retained == r


def test_spec_validation():
    with pytest.raises(ValueError):
        PruneSpec(1.5, 4)
    with pytest.raises(ValueError):
        PruneSpec(0.5, 0)


def test_mask_invariants():
    m = ChannelMask(5, (3, 0))
    assert m.kept == (0, 3) and m.dropped == (1, 2, 4)
    np.testing.assert_array_equal(np.diag(m.as_diagonal()), [1, 0, 0, 1, 0])
    with pytest.raises(ValueError):
        ChannelMask(3, (1, 1))
    with pytest.raises(ValueError):
        ChannelMask(3, (3,))


@given(st.integers(0, 2**16), st.integers(1, 8))
def test_exact_channel_decomposition(seed, d):
    q, k = qk(seed, 6, d)
    total = sum(np.multiply.outer(q[:, i], k[:, i]) for i in range(d))
    np.testing.assert_allclose(q @ k.T, total, atol=1e-12)
    mask = ChannelMask(d, tuple(range(0, d, 2)))
    assert prune_objective(q, k, mask) == pytest.approx(prune_objective_direct(q, k, mask), abs=1e-12)
    assert prune_objective(q, k, mask) == pytest.approx(prune_error(q, k, mask.kept), abs=1e-12)


def test_objective_extremes():
    q, k = qk(0, 5, 4)
    assert prune_objective(q, k, ChannelMask.full(4)) == 0.0
    assert prune_objective(q, k, ChannelMask(4, ())) == pytest.approx(np.linalg.norm(q @ k.T), rel=1e-12)
    drop2 = ChannelMask(4, (0, 1, 3))
    assert prune_objective(q, k, drop2) == pytest.approx(np.linalg.norm(np.outer(q[:, 2], k[:, 2])), abs=1e-12)
    with pytest.raises(ShapeError):
        prune_objective(q, k, ChannelMask(5, ()))


@given(st.integers(0, 2**16), st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]))
def test_greedy_never_beats_optimum(seed, lam):
    q, k = qk(seed)
    spec = PruneSpec(lam, 6)
    mask = select_channels(q, k, spec)
    assert len(mask.kept) == spec.retained
    opt = prune_optimum(q, k, spec.retained)
    assert prune_objective(q, k, mask) >= opt - 1e-12
    if spec.retained in (0, 6):
        assert prune_objective(q, k, mask) == pytest.approx(opt, abs=1e-12)


def test_select_channels_tie_break():
    q = np.ones((3, 4))
    mask = select_channels(q, q, PruneSpec(0.5, 4))
    assert mask.kept == (0, 1)


def test_select_channels_prefers_large_columns():
    q, k = qk(1, 8, 4)
    q[:, 2] *= 100
    assert 2 in select_channels(q, k, PruneSpec(0.75, 4)).kept


def test_worked_example():
    assert delta_flops(WORKED_EXAMPLE) == 134217728
    assert delta_io_bytes(WORKED_EXAMPLE) == 67174400
    rep = savings_report(WORKED_EXAMPLE, EXAMPLE_FLOPS_RATE, EXAMPLE_BANDWIDTH)
    assert rep.compute_seconds == pytest.approx(1.342e-3, rel=5e-3)
    assert rep.comm_seconds == pytest.approx(6.71744, rel=1e-12)


def test_hand_evaluations():
    assert delta_flops(DeltaParams(1, 2, 1, 4, 2, 1)) == 32
    assert delta_io_bytes(DeltaParams(1, 1, 1, 2, 1, 1)) == 8
    same = DeltaParams(2, 3, 4, 5, 5, 6)
    assert delta_flops(same) == 0 and delta_io_bytes(same) == 0
    rep = savings_report(same, 1.0, 1.0)
    assert (rep.compute_seconds, rep.comm_seconds) == (0.0, 0.0)


@given(st.integers(1, 4), st.integers(1, 64), st.integers(1, 8), st.integers(1, 16), st.integers(0, 16), st.integers(1, 8))
def test_delta_linearity(b, m, k, d_e, dd, L):
    p = DeltaParams(b, m, k, d_e + dd, d_e, L)
    unit_l = DeltaParams(b, m, k, d_e + dd, d_e, 1)
    assert delta_flops(p) == L * delta_flops(unit_l)
    assert delta_io_bytes(p) == L * delta_io_bytes(unit_l)
    if dd:
        one = DeltaParams(b, m, k, d_e + 1, d_e, L)
        assert delta_flops(p) == dd * delta_flops(one)
        assert delta_io_bytes(p) == dd * delta_io_bytes(one)


def test_delta_params_validation():
    with pytest.raises(ValueError):
        DeltaParams(1, 1, 1, 2, 3, 1)
    with pytest.raises(ValueError):
        DeltaParams(0, 1, 1, 2, 1, 1)


def test_savings_report_formats():
    rep = savings_report(WORKED_EXAMPLE, EXAMPLE_FLOPS_RATE, EXAMPLE_BANDWIDTH)
    assert len(rep.to_text().splitlines()) == 2
    assert json.loads(rep.to_json())["delta_flops"] == 134217728
    with pytest.raises(ValueError):
        savings_report(WORKED_EXAMPLE, 0, 1)


def test_prune_cache(rng):
    m = init_model(ModelConfig(2, 2, 6, seed=1))
    cache, _ = prefill(m, rng.standard_normal((4, 12)))
    full = prune_cache(cache, ChannelMask.full(6))
    for a, b in zip(full.keys, cache.keys):
        np.testing.assert_array_equal(a, b)
    small = prune_cache(cache, ChannelMask(6, (1, 4)))
    assert small.head_dim == 2 and small.tags == cache.tags
    np.testing.assert_array_equal(small.values[1], cache.values[1][:, :, [1, 4]])
    with pytest.raises(ShapeError):
        prune_cache(cache, ChannelMask.full(5))


@given(st.integers(0, 2**16), st.sampled_from([0.25, 0.5, 0.75]))
def test_refinement_never_hurts(seed, lam):
    q, k = qk(seed, 8, 8)
    spec = PruneSpec(lam, 8)
    plain = select_channels(q, k, spec, refine=False)
    scores = np.linalg.norm(q, axis=0) * np.linalg.norm(k, axis=0)
    assert set(plain.kept) == set(np.argsort(-scores, kind="stable")[: spec.retained].tolist())
    assert prune_objective(q, k, select_channels(q, k, spec)) <= prune_objective(q, k, plain) + 1e-12
