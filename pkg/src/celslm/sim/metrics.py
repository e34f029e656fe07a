"""Per-request records and aggregate metrics of one simulation run."""
import csv
import io
from dataclasses import dataclass, field

from ..serialize import dumps, dumps_line, sha256_bytes


@dataclass
class RequestRecord:
    request_id: int
    edge: str
    system_prompt: str
    arrival: float
    tokens: int
    start: float | None = None
    ttft: float | None = None
    completion: float | None = None
    status: str = "pending"
    reason: str | None = None
    sources: list = field(default_factory=list)

    @property
    def latency(self):
        return None if self.completion is None else self.completion - self.arrival

    @property
    def ms_per_token(self):
        return None if self.completion is None else 1000.0 * self.latency / self.tokens

    def to_dict(self):
        return {
            "request_id": self.request_id,
            "edge": self.edge,
            "system_prompt": self.system_prompt,
            "status": self.status,
            "reason": self.reason,
            "arrival": self.arrival,
            "start": self.start,
            "ttft_s": None if self.ttft is None else self.ttft - self.arrival,
            "latency_s": self.latency,
            "tokens": self.tokens,
            "ms_per_token": self.ms_per_token,
            "sources": list(self.sources),
        }


@dataclass
class MetricsReport:
    mode: str
    seed: int
    records: list
    counters: dict
    events: list = field(default_factory=list, repr=False)
    meta: dict = field(default_factory=dict)

    @property
    def completed(self):
        return [r for r in self.records if r.status == "completed"]

    @property
    def failed(self):
        return [r for r in self.records if r.status == "failed"]

    def aggregates(self):
        done = self.completed
        out = {
            "requests": len(self.records),
            "completed": len(done),
            "failed": len(self.failed),
            "tokens": sum(r.tokens for r in done),
        }
        if done:
            first = min(r.arrival for r in self.records)
            last = max(r.completion for r in done)
            span = last - first
            out["avg_latency_s"] = sum(r.latency for r in done) / len(done)
            out["avg_ttft_s"] = sum(r.ttft - r.arrival for r in done) / len(done)
            out["normalized_latency_ms_per_token"] = sum(r.ms_per_token for r in done) / len(done)
            out["throughput_rps"] = len(done) / span if span > 0 else float("inf")
        else:
            out.update(avg_latency_s=None, avg_ttft_s=None,
                       normalized_latency_ms_per_token=None, throughput_rps=0.0)
        return out

    def failure_reasons(self):
        reasons = {}
        for r in self.failed:
            reasons[r.reason] = reasons.get(r.reason, 0) + 1
        return reasons

    def event_log(self):
        return "".join(dumps_line(e) + "\n" for e in self.events)

    def event_log_sha256(self):
        return sha256_bytes(self.event_log().encode())

    def to_dict(self):
        return {
            "mode": self.mode,
            "seed": self.seed,
            "meta": self.meta,
            "aggregates": self.aggregates(),
            "failure_reasons": self.failure_reasons(),
            "counters": self.counters,
            "event_log_sha256": self.event_log_sha256(),
            "requests": [r.to_dict() for r in self.records],
        }

    def to_json(self):
        return dumps(self.to_dict())

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ["request_id", "mode", "edge", "system_prompt", "status", "reason", "arrival",
                "ttft_s", "latency_s", "tokens", "ms_per_token"]
        w.writerow(cols)
        for r in self.records:
            d = r.to_dict() | {"mode": self.mode}
            w.writerow(["" if d[c] is None else (f"{d[c]:.17g}" if isinstance(d[c], float) else d[c])
                        for c in cols])
        return buf.getvalue()


SWEEP_COLUMNS = ["rate", "mode", "completed", "failed", "avg_latency_s",
                 "normalized_latency_ms_per_token", "throughput_rps"]


def sweep_csv(rows):
    """``rows`` is a list of ``(rate, MetricsReport)``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for rate, rep in rows:
        a = rep.aggregates()
        vals = [rate, rep.mode] + [a[c] for c in SWEEP_COLUMNS[2:]]
        w.writerow(["" if v is None else (f"{v:.17g}" if isinstance(v, float) else v) for v in vals])
    return buf.getvalue()
