"""Scenario configuration: JSON schema, validation and resolution.

A scenario is one JSON document. ``build_scenario`` validates it, fills in
defaults, expands an ``arrival`` block into concrete requests and derives
every random quantity from the single master ``seed``.
"""
import copy
from dataclasses import dataclass, field

import jsonschema
import numpy as np

from ..cost_pipeline import CostModel
from ..head_prune import PruneSpec
from ..serialize import dumps
from ..transformer import ModelConfig

INF = float("inf")

_rate = {"anyOf": [{"type": "number", "minimum": 0}, {"enum": ["inf", "Infinity"]}]}
_pos_rate = {"anyOf": [{"type": "number", "exclusiveMinimum": 0}, {"enum": ["inf", "Infinity"]}]}
_model = {
    "type": "object",
    "required": ["num_layers", "num_heads", "head_dim"],
    "additionalProperties": False,
    "properties": {
        "num_layers": {"type": "integer", "minimum": 1},
        "num_heads": {"type": "integer", "minimum": 1},
        "head_dim": {"type": "integer", "minimum": 1},
        "hidden_size": {"type": "integer", "minimum": 1},
        "max_positions": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer"},
    },
}
_hw = {
    "type": "object",
    "required": ["flops_rate", "mem_bandwidth"],
    "additionalProperties": False,
    "properties": {
        "flops_rate": {"type": "number", "exclusiveMinimum": 0},
        "mem_bandwidth": {"type": "number", "exclusiveMinimum": 0},
        "decode_overhead": {"type": "number", "minimum": 0},
    },
}
_req_lengths = {
    "system_prompt": {"type": "string"},
    "user_len": {"type": "integer", "minimum": 1},
    "output_len": {"type": "integer", "minimum": 1},
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["nodes", "links", "models", "cost", "system_prompts"],
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer"},
        "models": {
            "type": "object",
            "required": ["cloud", "edge"],
            "additionalProperties": False,
            "properties": {"cloud": _model, "edge": _model},
        },
        "nodes": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["id", "role"],
                "additionalProperties": False,
                "properties": {
                    "id": {"type": "string", "minLength": 1},
                    "role": {"enum": ["cloud", "edge"]},
                    "memory_bytes": {"type": "number", "exclusiveMinimum": 0},
                    "batch_width": {"type": "integer", "minimum": 1},
                    "historical_cache": {"type": "array", "items": {"type": "string"}},
                },
            },
        },
        "links": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["endpoints", "bandwidth"],
                "additionalProperties": False,
                "properties": {
                    "endpoints": {"type": "array", "items": {"type": "string"}, "minItems": 2, "maxItems": 2},
                    "bandwidth": _rate,
                    "propagation_delay": {"type": "number", "minimum": 0},
                    "outages": {
                        "type": "array",
                        "items": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
                    },
                },
            },
        },
        "peer_links": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "topology": {"enum": ["full_mesh", "none"]},
                "bandwidth": _rate,
                "propagation_delay": {"type": "number", "minimum": 0},
            },
        },
        "system_prompts": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["id", "length"],
                "additionalProperties": False,
                "properties": {"id": {"type": "string"}, "length": {"type": "integer", "minimum": 1}},
            },
        },
        "requests": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["arrival", "edge", "user_len", "output_len"],
                "additionalProperties": False,
                "properties": {"arrival": {"type": "number", "minimum": 0}, "edge": {"type": "string"}, **_req_lengths},
            },
        },
        "arrival": {
            "type": "object",
            "required": ["rate", "count", "user_len", "output_len"],
            "additionalProperties": False,
            "properties": {
                "rate": {"type": "number", "exclusiveMinimum": 0},
                "count": {"type": "integer", "minimum": 1},
                "distribution": {"enum": ["fixed", "poisson"]},
                "start": {"type": "number", "minimum": 0},
                "edges": {"type": "array", "items": {"type": "string"}},
                **_req_lengths,
            },
        },
        "cost": {
            "type": "object",
            "required": ["cloud", "edge"],
            "additionalProperties": False,
            "properties": {
                "cloud": _hw,
                "edge": _hw,
                "t_max": {"type": "number", "exclusiveMinimum": 0},
                "edge_memory": {"type": "number", "exclusiveMinimum": 0},
                "bytes_per_token": {"type": "integer", "minimum": 1},
                "disk_bandwidth": _pos_rate,
            },
        },
        "prune": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"lambda": {"type": "number", "minimum": 0, "maximum": 1}},
        },
        "match": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "theta_cka": {"type": "number"},
                "theta_rsa": {"type": "number"},
                "cloud_layers": {"type": "integer", "minimum": 0},
                "boundary": {"type": "integer", "minimum": 0},
            },
        },
    },
    "oneOf": [{"required": ["requests"]}, {"required": ["arrival"]}],
}


class ScenarioError(ValueError):
    """Config document failed validation; ``path`` locates the field."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path or '<root>'}: {message}")


def _num(x):
    if isinstance(x, str):
        return INF
    return float(x)


@dataclass(frozen=True)
class NodeSpec:
    id: str
    role: str
    memory_bytes: float = INF
    batch_width: int = 1
    historical_cache: tuple = ()


@dataclass(frozen=True)
class LinkSpec:
    endpoints: tuple
    bandwidth: float
    propagation_delay: float = 0.0
    outages: tuple = ()

    def next_up(self, t):
        """Earliest time >= t at which the link is not in an outage window."""
        for start, end in self.outages:
            if start <= t < end:
                return end
        return t

    def finish_time(self, t, duration):
        """Completion time of ``duration`` seconds of transmission starting at
        ``t``, pausing through outage windows."""
        remaining = duration
        for start, end in self.outages:
            if end <= t:
                continue
            if start > t:
                if t + remaining <= start:
                    return t + remaining
                remaining -= start - t
            t = max(t, end)
        return t + remaining


@dataclass(frozen=True)
class RequestSpec:
    request_id: int
    arrival: float
    edge: str
    system_prompt: str
    s: int
    u: int
    output: int
    content_seed: int


@dataclass
class Scenario:
    seed: int
    models: dict
    nodes: list
    links: list
    requests: list
    system_prompts: dict
    cost: dict
    prune_lambda: float
    theta_cka: float
    theta_rsa: float
    cloud_layers: int | None
    boundary: int | None
    peer_topology: str
    source: dict = field(default_factory=dict, repr=False)

    @property
    def cloud(self):
        return next(n for n in self.nodes if n.role == "cloud")

    @property
    def edges(self):
        return [n for n in self.nodes if n.role == "edge"]

    def link(self, a, b):
        for l in self.links:
            if set(l.endpoints) == {a, b}:
                return l
        return None

    def to_dict(self):
        return {
            "seed": self.seed,
            "models": {k: v.to_dict() for k, v in self.models.items()},
            "nodes": [
                {"id": n.id, "role": n.role, "memory_bytes": n.memory_bytes,
                 "batch_width": n.batch_width, "historical_cache": list(n.historical_cache)}
                for n in self.nodes
            ],
            "links": [
                {"endpoints": list(l.endpoints), "bandwidth": l.bandwidth,
                 "propagation_delay": l.propagation_delay, "outages": [list(o) for o in l.outages]}
                for l in self.links
            ],
            "system_prompts": dict(self.system_prompts),
            "requests": [
                {"request_id": r.request_id, "arrival": r.arrival, "edge": r.edge,
                 "system_prompt": r.system_prompt, "s": r.s, "u": r.u, "output": r.output,
                 "content_seed": r.content_seed}
                for r in self.requests
            ],
            "cost": {
                role: {"flops_rate": hw.flops_rate, "mem_bandwidth": hw.mem_bandwidth,
                       "decode_overhead": hw.decode_overhead}
                for role, hw in self.cost.items() if isinstance(hw, CostModel)
            } | {k: v for k, v in self.cost.items() if not isinstance(v, CostModel)},
            "prune_lambda": self.prune_lambda,
            "theta_cka": self.theta_cka,
            "theta_rsa": self.theta_rsa,
            "cloud_layers": self.cloud_layers,
            "boundary": self.boundary,
            "peer_topology": self.peer_topology,
        }

    def to_json(self):
        return dumps(self.to_dict())


def _validate_schema(doc):
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path = "/".join(str(p) for p in err.absolute_path)
        raise ScenarioError(path, err.message)


def arrival_times(count, rate, distribution, seed, start=0.0):
    """Arrival instants. Poisson gaps are drawn at unit rate from ``seed`` and
    divided by ``rate``, so different rates share the same gap sequence."""
    if distribution == "fixed":
        gaps = np.ones(count)
    else:
        gaps = np.random.default_rng([seed, 1]).exponential(1.0, size=count)
    gaps[0] = 0.0
    return (start + np.cumsum(gaps) / rate).tolist()


def build_scenario(doc):
    """Validate ``doc`` and resolve it into a :class:`Scenario`."""
    doc = copy.deepcopy(doc)
    _validate_schema(doc)
    seed = int(doc.get("seed", 42))

    nodes = []
    seen_ids = set()
    for i, n in enumerate(doc["nodes"]):
        if n["id"] in seen_ids:
            raise ScenarioError(f"nodes/{i}/id", f"duplicate node id {n['id']!r}")
        seen_ids.add(n["id"])
        nodes.append(NodeSpec(n["id"], n["role"], float(n.get("memory_bytes", INF)),
                              int(n.get("batch_width", 1)), tuple(n.get("historical_cache", ()))))
    clouds = [n for n in nodes if n.role == "cloud"]
    edges = [n for n in nodes if n.role == "edge"]
    if len(clouds) != 1:
        raise ScenarioError("nodes", f"exactly one cloud node required, found {len(clouds)}")
    if not edges:
        raise ScenarioError("nodes", "at least one edge node required")
    cloud_id = clouds[0].id

    prompts = {}
    for i, p in enumerate(doc["system_prompts"]):
        if p["id"] in prompts:
            raise ScenarioError(f"system_prompts/{i}/id", f"duplicate prompt id {p['id']!r}")
        prompts[p["id"]] = p["length"]
    for n in edges:
        for sp in n.historical_cache:
            if sp not in prompts:
                raise ScenarioError(f"nodes/{n.id}/historical_cache", f"unknown system prompt {sp!r}")

    links = []
    for i, l in enumerate(doc["links"]):
        a, b = l["endpoints"]
        for j, e in enumerate((a, b)):
            if e not in seen_ids:
                raise ScenarioError(f"links/{i}/endpoints/{j}", f"unknown node {e!r}")
        if a == b:
            raise ScenarioError(f"links/{i}/endpoints", "a link needs two distinct endpoints")
        outages = [tuple(float(x) for x in o) for o in l.get("outages", [])]
        for j, (s, e) in enumerate(outages):
            if e <= s:
                raise ScenarioError(f"links/{i}/outages/{j}", "outage end must exceed start")
            if j and s < outages[j - 1][1]:
                raise ScenarioError(f"links/{i}/outages/{j}", "outage windows must be sorted and non-overlapping")
        if any(set(x.endpoints) == {a, b} for x in links):
            raise ScenarioError(f"links/{i}/endpoints", f"duplicate link {a}-{b}")
        links.append(LinkSpec((a, b), _num(l["bandwidth"]), float(l.get("propagation_delay", 0.0)), tuple(outages)))
    for n in edges:
        if not any(set(l.endpoints) == {n.id, cloud_id} for l in links):
            raise ScenarioError("links", f"edge {n.id!r} has no link to the cloud")

    peer = doc.get("peer_links", {})
    topology = peer.get("topology", "full_mesh")
    if topology == "full_mesh" and "bandwidth" in peer:
        for i, a in enumerate(edges):
            for b in edges[i + 1:]:
                if not any(set(l.endpoints) == {a.id, b.id} for l in links):
                    links.append(LinkSpec((a.id, b.id), _num(peer["bandwidth"]),
                                          float(peer.get("propagation_delay", 0.0))))

    models = {k: ModelConfig.from_dict(v) for k, v in doc["models"].items()}
    mc, me = models["cloud"], models["edge"]
    if mc.num_heads != me.num_heads:
        raise ScenarioError("models/edge/num_heads", "edge and cloud models must have the same head count")
    if me.head_dim > mc.head_dim:
        raise ScenarioError("models/edge/head_dim", "edge head_dim cannot exceed cloud head_dim")
    lam = doc.get("prune", {}).get("lambda")
    if lam is None:
        lam = 1.0 - me.head_dim / mc.head_dim
    elif PruneSpec(lam, mc.head_dim).retained != me.head_dim:
        raise ScenarioError("prune/lambda",
                            f"lambda={lam} keeps {PruneSpec(lam, mc.head_dim).retained} channels, "
                            f"edge head_dim is {me.head_dim}")

    c = doc["cost"]
    cost = {
        "cloud": CostModel(**{k: float(v) for k, v in c["cloud"].items()}),
        "edge": CostModel(**{k: float(v) for k, v in c["edge"].items()}),
        "t_max": float(c.get("t_max", 60.0)),
        "edge_memory": float(c.get("edge_memory", INF)),
        "bytes_per_token": int(c.get("bytes_per_token", 4)),
        "disk_bandwidth": _num(c.get("disk_bandwidth", 1e9)),
    }

    rng = np.random.default_rng([seed, 2])
    requests = []
    if "requests" in doc:
        raw = [(i, r) for i, r in enumerate(doc["requests"])]
        items = [(f"requests/{i}", r["arrival"], r) for i, r in raw]
    else:
        a = doc["arrival"]
        targets = a.get("edges") or [n.id for n in edges]
        times = arrival_times(a["count"], a["rate"], a.get("distribution", "poisson"), seed, a.get("start", 0.0))
        items = [("arrival", t, {**a, "edge": targets[i % len(targets)]}) for i, t in enumerate(times)]
    for rid, (path, t, r) in enumerate(items):
        if r["edge"] not in {n.id for n in edges}:
            raise ScenarioError(f"{path}/edge", f"{r['edge']!r} is not an edge node")
        sp = r.get("system_prompt", next(iter(prompts)))
        if sp not in prompts:
            raise ScenarioError(f"{path}/system_prompt", f"unknown system prompt {sp!r}")
        s, u, out = prompts[sp], r["user_len"], r["output_len"]
        for role, m in models.items():
            if s + u + out > m.max_positions:
                raise ScenarioError(path, f"s+u+output={s + u + out} exceeds {role} max_positions {m.max_positions}")
        requests.append(RequestSpec(rid, float(t), r["edge"], sp, s, u, out, int(rng.integers(0, 2**31))))
    requests.sort(key=lambda r: (r.arrival, r.request_id))

    m = doc.get("match", {})
    n_cloud = m.get("cloud_layers")
    if n_cloud is not None and n_cloud > me.num_layers:
        raise ScenarioError("match/cloud_layers", f"cannot exceed edge num_layers {me.num_layers}")
    return Scenario(
        seed=seed, models=models, nodes=nodes, links=links, requests=requests,
        system_prompts=prompts, cost=cost, prune_lambda=float(lam),
        theta_cka=float(m.get("theta_cka", 0.5)), theta_rsa=float(m.get("theta_rsa", 0.3)),
        cloud_layers=n_cloud, boundary=m.get("boundary"), peer_topology=topology, source=doc,
    )
