"""Analytic latency model: per-layer compute and transfer times, sequential
and layer-pipelined totals, feasibility constraints and cache-source choice.

Layers are numbered from 1 in this module.
"""
import csv
import io
from dataclasses import dataclass, field

from .errors import LinkDownError
from .serialize import dumps

SOURCES = ("local", "peer", "cloud")


@dataclass(frozen=True)
class CostModel:
    flops_rate: float
    mem_bandwidth: float
    decode_overhead: float = 0.0
    net_bandwidth: object = 1e9  # bytes/s, or a callable (link, layer) -> bytes/s
    edge_memory: float = float("inf")
    t_max: float = float("inf")

    def __post_init__(self):
        if self.flops_rate <= 0 or self.mem_bandwidth <= 0:
            raise ValueError("flops_rate and mem_bandwidth must be positive")
        if self.decode_overhead < 0:
            raise ValueError("decode_overhead must be non-negative")
        if self.edge_memory <= 0 or self.t_max <= 0:
            raise ValueError("edge_memory and t_max must be positive")

    def bandwidth(self, link, layer):
        if callable(self.net_bandwidth):
            return self.net_bandwidth(link, layer)
        return self.net_bandwidth


@dataclass(frozen=True)
class LayerCost:
    flops: int = 0
    io_bytes: int = 0
    kv_bytes: int = 0
    req_bytes: int = 0

    def __post_init__(self):
        if min(self.flops, self.io_bytes, self.kv_bytes, self.req_bytes) < 0:
            raise ValueError("layer costs must be non-negative")


def layer_compute_time(c, hw):
    return c.flops / hw.flops_rate + c.io_bytes / hw.mem_bandwidth + hw.decode_overhead


def comm_time(nbytes, bandwidth):
    if bandwidth <= 0:
        raise LinkDownError("link down")
    if nbytes == 0:
        return 0.0
    return nbytes / bandwidth


def total_sequential(layers):
    """Compute and transfer fully serialized: ``sum(t_comm) + sum(t_comp)``."""
    if not layers:
        raise ValueError("need at least one layer")
    return sum(c for c, _ in layers) + sum(p for _, p in layers)


@dataclass(frozen=True)
class Violation:
    layer: int
    constraint: str
    lhs: float
    rhs: float

    def __str__(self):
        return f"layer {self.layer}: {self.constraint}: {self.lhs:.6g} > {self.rhs:.6g}"


def feasibility_check(layers, hw, link="cloud"):
    """Per-layer check of the memory and transfer-deadline constraints.

    Returns an empty list iff ``max(req_bytes) <= edge_memory`` and every
    layer's ``kv_bytes <= bandwidth * t_max``.
    """
    out = []
    for l, c in enumerate(layers, start=1):
        if c.req_bytes > hw.edge_memory:
            out.append(Violation(l, "memory", c.req_bytes, hw.edge_memory))
        budget = hw.bandwidth(link, l) * hw.t_max
        if c.kv_bytes > budget:
            out.append(Violation(l, "transfer", c.kv_bytes, budget))
    return out


def cache_source(l, cost_local, cost_peer, boundary, M):
    """Layers above ``boundary`` come from the cloud; the rest from the cheaper
    of local compute and a peer (ties go to local)."""
    if not 1 <= l <= M:
        raise ValueError(f"layer {l} out of range 1..{M}")
    if l > boundary:
        return "cloud"
    return "peer" if cost_peer < cost_local else "local"


@dataclass
class ScheduleTrace:
    sources: list
    t_comm: list
    t_comp: list
    t_pip: list
    sequential_total: float
    pipelined_total: float
    meta: dict = field(default_factory=dict)

    def rows(self):
        for i, (s, c, p, t) in enumerate(zip(self.sources, self.t_comm, self.t_comp, self.t_pip), 1):
            yield i, s, c, p, t

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "source", "t_comm", "t_comp", "t_pip"])
        for i, s, c, p, t in self.rows():
            w.writerow([i, s, f"{c:.17g}", f"{p:.17g}", f"{t:.17g}"])
        return buf.getvalue()

    def to_dict(self):
        return {
            "meta": self.meta,
            "layers": [
                {"layer": i, "source": s, "t_comm": c, "t_comp": p, "t_pip": t}
                for i, s, c, p, t in self.rows()
            ],
            "sequential_total": self.sequential_total,
            "pipelined_total": self.pipelined_total,
        }

    def to_json(self):
        return dumps(self.to_dict())


def pipeline_schedule(layers, sources=None, boundary=None):
    """Overlap layer ``l``'s cache transfer with layer ``l-1``'s computation.

    ``t_pip[l] = max(t_comm[l], t_comp[l-1])`` (with ``t_comp[0] = 0``) and the
    total adds the last layer's compute, which nothing can hide.
    """
    if not layers:
        raise ValueError("need at least one layer")
    comm = [float(c) for c, _ in layers]
    comp = [float(p) for _, p in layers]
    if min(comm + comp) < 0:
        raise ValueError("times must be non-negative")
    if sources is None:
        sources = ["local"] * len(layers)
    if len(sources) != len(layers):
        raise ValueError("one source per layer required")
    for s in sources:
        if s not in SOURCES:
            raise ValueError(f"unknown source {s!r}")
    pip = []
    prev = 0.0
    for c, p in zip(comm, comp):
        pip.append(max(c, prev))
        prev = p
    total = sum(pip) + comp[-1]
    meta = {"total_rule": "sum_l max(t_comm[l], t_comp[l-1]) + t_comp[last]"}
    if boundary is not None:
        meta["boundary"] = boundary
    return ScheduleTrace(list(sources), comm, comp, pip, total_sequential(layers), total, meta)
