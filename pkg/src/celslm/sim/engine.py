"""Discrete-event simulation of cloud/edge serving under four strategies.

``naive_cloud``   edge uploads the whole prompt; cloud prefills and decodes.
``cached_cloud``  cloud keeps the system-prompt KV; only the user turn is sent.
``naive_edge``    edge recomputes everything locally; no network.
``ce_lslm``       cloud precomputes the system-prompt KV once; edges fetch the
                  deep block of layers from the cloud (or a historical copy),
                  the shallow block locally or from a peer, and prefill the
                  user turn layer by layer as each cache layer arrives.

All queues (compute slots, links) are FIFO simpy resources, so service is
work conserving.
"""
import copy
from functools import lru_cache

import simpy

from ..cost_pipeline import LayerCost, cache_source, comm_time, layer_compute_time
from ..layer_match import SimilarityConfig, match_models
from ..transformer import BYTES_PER_ELEMENT, init_model, layer_io_bytes, layer_op_count
from .metrics import MetricsReport, RequestRecord
from .scenario import INF, build_scenario

MODES = ("naive_cloud", "cached_cloud", "naive_edge", "ce_lslm")
UNREACHABLE = "cloud unreachable"


@lru_cache(maxsize=32)
def _matched_cloud_layers(edge_cfg, cloud_cfg, theta_cka, theta_rsa, seed):
    cfg = SimilarityConfig(theta_cka, theta_rsa)
    report = match_models(init_model(edge_cfg), init_model(cloud_cfg), cfg, seed=seed)
    return len(report.shared_layers)


def resolve_split(scenario):
    """``(n, boundary)``: number of edge layers sourced from the cloud and the
    last locally-sourced layer. Without an explicit ``cloud_layers`` the count
    of matched layers is used."""
    M = scenario.models["edge"].num_layers
    n = scenario.cloud_layers
    if n is None:
        n = _matched_cloud_layers(scenario.models["edge"], scenario.models["cloud"],
                                  scenario.theta_cka, scenario.theta_rsa, scenario.seed)
    boundary = scenario.boundary if scenario.boundary is not None else M - n
    return n, min(max(boundary, 0), M)


class _Link:
    def __init__(self, env, spec):
        self.spec = spec
        self.res = simpy.Resource(env, capacity=1)


class Simulation:
    def __init__(self, scenario, mode):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
        self.sc = scenario
        self.mode = mode
        self.env = simpy.Environment()
        self.slots = {n.id: simpy.Resource(self.env, capacity=n.batch_width) for n in scenario.nodes}
        self.links = {frozenset(l.endpoints): _Link(self.env, l) for l in scenario.links}
        self.cloud_id = scenario.cloud.id
        self.events = []
        self.counters = {"transmitted_bytes": 0, "cloud_bound_user_bytes": 0, "context_computations": 0}
        self.hist = {n.id: set(n.historical_cache) for n in scenario.edges}
        self.shallow = {n.id: set() for n in scenario.edges}
        self.published = {}
        self.ctx_ready = {}
        self.records = {}
        self.bpt = scenario.cost["bytes_per_token"]
        self.t_max = scenario.cost["t_max"]
        self.n_cloud, self.boundary = resolve_split(scenario)

    # -- helpers ---------------------------------------------------------
    def log(self, event, node, request=None, **detail):
        self.events.append({"time": self.env.now, "event": event, "node": node,
                            "request": request, "detail": detail})

    @lru_cache(maxsize=None)
    def layer_time(self, role, n_new, n_past):
        cfg = self.sc.models[role]
        c = LayerCost(layer_op_count(cfg, n_new, n_past).flops, layer_io_bytes(cfg, n_new, n_past))
        return layer_compute_time(c, self.sc.cost[role])

    def block_time(self, role, n_new, n_past):
        return self.layer_time(role, n_new, n_past) * self.sc.models[role].num_layers

    def kv_layer_bytes(self, s):
        e = self.sc.models["edge"]
        return 2 * e.num_heads * s * e.head_dim * BYTES_PER_ELEMENT

    def transfer(self, a, b, nbytes, deadline, request=None):
        """FIFO transmission over the a-b link; returns False if the link is
        not usable before ``deadline``."""
        link = self.links[frozenset((a, b))]
        spec = link.spec
        with link.res.request() as req:
            yield req
            now = self.env.now
            up_at = INF if spec.bandwidth == 0 else spec.next_up(now)
            if up_at > deadline:
                self.log("link_down", a, request, peer=b)
                yield self.env.timeout(max(0.0, deadline - now))
                return False
            if up_at > now:
                self.log("link_wait", a, request, peer=b, until=up_at)
                yield self.env.timeout(up_at - now)
            dur = 0.0 if spec.bandwidth == INF else comm_time(nbytes, spec.bandwidth)
            end = spec.finish_time(self.env.now, dur)
            yield self.env.timeout(end - self.env.now)
        yield self.env.timeout(spec.propagation_delay)
        self.counters["transmitted_bytes"] += nbytes
        return True

    def decode(self, role, rec, past, steps):
        per = self.sc.models[role].num_layers
        for t in range(steps):
            yield self.env.timeout(self.layer_time(role, 1, past + t) * per)
            if t == 0:
                rec.ttft = self.env.now

    def finish(self, rec):
        rec.completion = self.env.now
        rec.status = "completed"
        self.log("complete", rec.edge, rec.request_id, tokens=rec.tokens)

    def fail(self, rec, reason):
        rec.completion = None
        rec.ttft = None
        rec.status = "failed"
        rec.reason = reason
        self.log("fail", rec.edge, rec.request_id, reason=reason)

    # -- processes -------------------------------------------------------
    def precompute(self, prompts):
        for sp in prompts:
            with self.slots[self.cloud_id].request() as req:
                yield req
                yield self.env.timeout(self.block_time("cloud", self.sc.system_prompts[sp], 0))
            self.counters["context_computations"] += 1
            self.log("context_compute", self.cloud_id, system_prompt=sp)
            self.ctx_ready[sp].succeed()

    def arrive(self, r, body):
        yield self.env.timeout(r.arrival)
        rec = self.records[r.request_id]
        self.log("arrival", r.edge, r.request_id, system_prompt=r.system_prompt)
        yield from body(r, rec)

    def cloud_request(self, r, rec):
        cached = self.mode == "cached_cloud"
        deadline = r.arrival + self.t_max
        tokens = r.u if cached else r.s + r.u
        ok = yield from self.transfer(r.edge, self.cloud_id, tokens * self.bpt, deadline, r.request_id)
        if not ok:
            self.fail(rec, UNREACHABLE)
            return
        self.counters["cloud_bound_user_bytes"] += r.u * self.bpt
        if cached:
            yield self.ctx_ready[r.system_prompt]
        with self.slots[self.cloud_id].request() as req:
            yield req
            rec.start = self.env.now
            self.log("start", self.cloud_id, r.request_id)
            if cached:
                yield self.env.timeout(self.block_time("cloud", r.u, r.s))
            else:
                yield self.env.timeout(self.block_time("cloud", r.s + r.u, 0))
            yield from self.decode("cloud", rec, r.s + r.u, r.output)
        first_token = rec.ttft
        ok = yield from self.transfer(self.cloud_id, r.edge, r.output * self.bpt, deadline, r.request_id)
        if not ok:
            self.fail(rec, UNREACHABLE)
            return
        rec.ttft = first_token + self.links[frozenset((r.edge, self.cloud_id))].spec.propagation_delay
        self.finish(rec)

    def edge_request(self, r, rec):
        with self.slots[r.edge].request() as req:
            yield req
            rec.start = self.env.now
            self.log("start", r.edge, r.request_id)
            yield self.env.timeout(self.block_time("edge", r.s + r.u, 0))
            yield from self.decode("edge", rec, r.s + r.u, r.output)
        self.finish(rec)

    def _fetch(self, layers, ready, source, r, wait_for=None):
        """Deliver the cache of ``layers`` one after another, signalling each."""
        deadline = r.arrival + self.t_max
        nbytes = self.kv_layer_bytes(r.s)
        if wait_for is not None:
            yield wait_for
        for i, l in enumerate(layers):
            if source == "historical":
                bw = self.sc.cost["disk_bandwidth"]
                yield self.env.timeout(0.0 if bw == INF else nbytes / bw)
                ok = True
            else:
                ok = yield from self.transfer(source, r.edge, nbytes, deadline, r.request_id)
            self.log("layer_ready", r.edge, r.request_id, layer=l, source=source, ok=ok)
            ready[l].succeed(ok)
            if not ok:
                for rest in layers[i + 1:]:
                    ready[rest].succeed(False)
                return

    def _peer_cost(self, edge, sp, nbytes):
        best = None
        for p in sorted(self.published.get(sp, ())):
            link = self.links.get(frozenset((edge, p)))
            if p == edge or link is None or link.spec.bandwidth == 0:
                continue
            if link.spec.next_up(self.env.now) > self.env.now:
                continue
            bw = link.spec.bandwidth
            c = (0.0 if bw == INF else nbytes / bw) + link.spec.propagation_delay
            if best is None or c < best[0]:
                best = (c, p)
        return best

    def collab_request(self, r, rec):
        env = self.env
        M = self.sc.models["edge"].num_layers
        b = self.boundary
        sp = r.system_prompt
        with self.slots[r.edge].request() as req:
            yield req
            rec.start = env.now
            self.log("start", r.edge, r.request_id)
            ready = {l: env.event() for l in range(1, M + 1)}
            comp = {}
            sources = {}
            deep = [l for l in range(1, M + 1) if l > b]
            shallow = [l for l in range(1, M + 1) if l <= b]
            if deep:
                if sp in self.hist[r.edge]:
                    env.process(self._fetch(deep, ready, "historical", r))
                    via = "historical"
                else:
                    env.process(self._fetch(deep, ready, self.cloud_id, r, self.ctx_ready[sp]))
                    via = "cloud"
                for l in deep:
                    sources[l] = via
                    comp[l] = self.layer_time("edge", r.u, r.s)
            if shallow:
                if sp in self.shallow[r.edge]:
                    for l in shallow:
                        sources[l] = "local"
                        comp[l] = self.layer_time("edge", r.u, r.s)
                        ready[l].succeed(True)
                else:
                    peer = self._peer_cost(r.edge, sp, self.kv_layer_bytes(r.s))
                    cost_local = self.layer_time("edge", r.s, 0)
                    cost_peer = INF if peer is None else peer[0]
                    from_peer = []
                    for l in shallow:
                        src = cache_source(l, cost_local, cost_peer, b, M)
                        sources[l] = src
                        if src == "peer":
                            from_peer.append(l)
                            comp[l] = self.layer_time("edge", r.u, r.s)
                        else:
                            # context and user rows in one pass
                            comp[l] = self.layer_time("edge", r.s + r.u, 0)
                            ready[l].succeed(True)
                    if from_peer:
                        env.process(self._fetch(from_peer, ready, peer[1], r))
            rec.sources = [sources[l] for l in range(1, M + 1)]
            for l in range(1, M + 1):
                ok = yield ready[l]
                if not ok:
                    self.fail(rec, UNREACHABLE)
                    return
                yield env.timeout(comp[l])
            yield from self.decode("edge", rec, r.s + r.u, r.output)
            self.hist[r.edge].add(sp)
            self.shallow[r.edge].add(sp)
            self.published.setdefault(sp, set()).add(r.edge)
            self.log("cache_store", r.edge, r.request_id, system_prompt=sp)
        self.finish(rec)

    # -- driver ----------------------------------------------------------
    def run(self):
        for r in self.sc.requests:
            self.records[r.request_id] = RequestRecord(r.request_id, r.edge, r.system_prompt, r.arrival, r.output)
        if self.mode in ("cached_cloud", "ce_lslm"):
            prompts = sorted({r.system_prompt for r in self.sc.requests})
            for sp in prompts:
                self.ctx_ready[sp] = self.env.event()
            self.env.process(self.precompute(prompts))
        body = {
            "naive_cloud": self.cloud_request,
            "cached_cloud": self.cloud_request,
            "naive_edge": self.edge_request,
            "ce_lslm": self.collab_request,
        }[self.mode]
        for r in self.sc.requests:
            self.env.process(self.arrive(r, body))
        self.env.run()
        meta = {"queue_discipline": "FIFO", "peer_topology": self.sc.peer_topology}
        if self.mode == "ce_lslm":
            meta.update(cloud_layers=self.n_cloud, boundary=self.boundary)
        records = [self.records[r.request_id] for r in sorted(self.sc.requests, key=lambda r: r.request_id)]
        return MetricsReport(self.mode, self.sc.seed, records, dict(self.counters), self.events, meta)


def run(scenario, mode):
    """Simulate ``scenario`` (a :class:`Scenario` or a config dict) under ``mode``."""
    if isinstance(scenario, dict):
        scenario = build_scenario(scenario)
    return Simulation(scenario, mode).run()


def sweep(doc, rates, modes=MODES):
    """Run every mode at every arrival rate. ``doc`` must use an ``arrival``
    block; its rate is overridden. Returns ``[(rate, MetricsReport), ...]``."""
    if "arrival" not in doc:
        raise ValueError("sweep needs a config with an 'arrival' block")
    out = []
    for rate in rates:
        d = copy.deepcopy(doc)
        d["arrival"]["rate"] = rate
        sc = build_scenario(d)
        for mode in modes:
            out.append((rate, run(sc, mode)))
    return out
