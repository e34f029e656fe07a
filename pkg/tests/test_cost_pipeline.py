import pytest
from hypothesis import given
from hypothesis import strategies as st

from celslm.cost_pipeline import (
    CostModel, LayerCost, cache_source, comm_time, feasibility_check, layer_compute_time, pipeline_schedule,
    total_sequential,
)
from celslm.errors import LinkDownError

times = st.lists(st.tuples(st.floats(0, 100), st.floats(0, 100)), min_size=1, max_size=12)


def test_hand_case():
    tr = pipeline_schedule([(2, 3), (1, 2), (4, 5)])
    assert tr.t_pip == [2, 3, 4]
    assert tr.pipelined_total == 14 and tr.sequential_total == 17


@given(times)
def test_pipelined_bounds(layers):
    tr = pipeline_schedule(layers)
    comm, comp = sum(c for c, _ in layers), sum(p for _, p in layers)
    assert tr.pipelined_total <= tr.sequential_total * (1 + 1e-12)
    assert tr.pipelined_total >= max(comm, comp) * (1 - 1e-12)


@given(st.lists(st.floats(0, 100), min_size=1, max_size=10))
def test_boundary_identities(xs):
    zeros = [0.0] * len(xs)
    assert pipeline_schedule(list(zip(zeros, xs))).pipelined_total == sum(xs)
    assert pipeline_schedule(list(zip(xs, zeros))).pipelined_total == sum(xs)


@given(times, st.sampled_from([0.5, 2.0, 4.0]))
def test_scaling(layers, alpha):
    a = pipeline_schedule(layers)
    b = pipeline_schedule([(alpha * c, alpha * p) for c, p in layers])
    assert b.pipelined_total == alpha * a.pipelined_total
    assert b.sequential_total == alpha * a.sequential_total


def test_schedule_validation():
    with pytest.raises(ValueError):
        pipeline_schedule([])
    with pytest.raises(ValueError):
        pipeline_schedule([(1, -1)])
    with pytest.raises(ValueError):
        pipeline_schedule([(1, 1)], sources=["moon"])
    with pytest.raises(ValueError):
        total_sequential([])


def test_trace_outputs():
    tr = pipeline_schedule([(2, 3), (1, 2)], ["local", "cloud"], boundary=1)
    lines = tr.to_csv().splitlines()
    assert lines[0] == "layer,source,t_comm,t_comp,t_pip" and lines[2].startswith("2,cloud,")
    assert tr.to_dict()["meta"]["boundary"] == 1


def test_layer_compute_time():
    hw = CostModel(1e9, 1e8, decode_overhead=0.5)
    assert layer_compute_time(LayerCost(2e9, 1e8), hw) == 2.0 + 1.0 + 0.5
    assert layer_compute_time(LayerCost(), CostModel(1, 1)) == 0.0


def test_comm_time():
    assert comm_time(0, 10) == 0.0
    assert comm_time(100, 10) == 10.0
    with pytest.raises(LinkDownError, match="link down"):
        comm_time(1, 0)


def test_cost_validation():
    with pytest.raises(ValueError):
        CostModel(0, 1)
    with pytest.raises(ValueError):
        LayerCost(flops=-1)


def test_cache_source():
    assert cache_source(4, 1.0, 0.1, boundary=2, M=4) == "cloud"
    assert cache_source(2, 1.0, 0.1, boundary=2, M=4) == "peer"
    assert cache_source(1, 0.1, 1.0, boundary=2, M=4) == "local"
    assert cache_source(1, 1.0, 1.0, boundary=2, M=4) == "local"
    with pytest.raises(ValueError):
        cache_source(5, 1, 1, 2, 4)


def test_feasibility():
    hw = CostModel(1, 1, net_bandwidth=10.0, edge_memory=100, t_max=2)
    assert feasibility_check([LayerCost()] * 3, hw) == []
    layers = [LayerCost(kv_bytes=20, req_bytes=50), LayerCost(kv_bytes=21, req_bytes=101)]
    v = feasibility_check(layers, hw)
    assert [(x.layer, x.constraint) for x in v] == [(2, "memory"), (2, "transfer")]
    assert "layer 2" in str(v[0])


def test_feasibility_order_invariant(rng):
    hw = CostModel(1, 1, net_bandwidth=lambda link, l: 10.0, edge_memory=100, t_max=2)
    layers = [LayerCost(kv_bytes=int(k), req_bytes=int(r)) for k, r in rng.integers(0, 40, (6, 2)) * 4]
    feasible = not feasibility_check(layers, hw)
    assert feasible == (not feasibility_check(layers[::-1], hw))
    kinds = sorted(x.constraint for x in feasibility_check(layers, hw))
    assert kinds == sorted(x.constraint for x in feasibility_check(layers[::-1], hw))


def test_bandwidth_callable():
    hw = CostModel(1, 1, net_bandwidth=lambda link, l: 5.0 * l)
    assert hw.bandwidth("cloud", 3) == 15.0
    assert hw.t_max == float("inf")
