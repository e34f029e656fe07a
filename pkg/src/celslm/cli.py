"""Command-line front end.

Every subcommand writes its artifacts under ``--out`` together with a
``manifest.json`` listing each file's sha256. Exit codes: 0 success,
1 property violation, 2 usage or config error.
"""
import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .cache_merge import merge_identity_suite
from .cost_pipeline import CostModel, LayerCost, comm_time, feasibility_check, layer_compute_time, pipeline_schedule
from .errors import LinkDownError
from .head_prune import (
    EXAMPLE_BANDWIDTH, EXAMPLE_FLOPS_RATE, WORKED_EXAMPLE, ChannelMask, DeltaParams, PruneSpec,
    prune_objective, savings_report, select_channels,
)
from .layer_match import SimilarityConfig, match_models
from .serialize import dumps, sha256_file
from .sim import MODES, ScenarioError, build_scenario, run, sweep, sweep_csv
from .transformer import ModelConfig, init_model

EXIT_OK, EXIT_VIOLATION, EXIT_USAGE = 0, 1, 2
DEFAULT_RATES = "1,2,4,8,16,32"


class ConfigError(Exception):
    pass


@dataclass
class RunManifest:
    subcommand: str
    config: str | None
    seed: int
    out: str
    artifacts: dict = field(default_factory=dict)

    def write(self, name, text):
        path = os.path.join(self.out, name)
        with open(path, "w", newline="") as f:
            f.write(text)
        self.artifacts[name] = sha256_file(path)
        return path

    def close(self):
        doc = {"subcommand": self.subcommand, "config": self.config, "seed": self.seed,
               "out": self.out, "artifacts": [{"path": k, "sha256": v} for k, v in self.artifacts.items()]}
        with open(os.path.join(self.out, "manifest.json"), "w") as f:
            f.write(dumps(doc))


def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as f:
            doc = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return doc


def _manifest(args):
    os.makedirs(args.out, exist_ok=True)
    return RunManifest(args.command, args.config, args.seed, args.out)


def _g(x):
    return "-" if x is None else f"{x:.6g}"


# -- subcommands ---------------------------------------------------------
def cmd_verify_merge(args):
    if args.trials < 1:
        raise ConfigError("--trials must be >= 1")
    rep = merge_identity_suite(args.trials, args.seed)
    man = _manifest(args)
    man.write("verify_merge.json", dumps(rep))
    man.close()
    print(f"seed={args.seed} trials={args.trials} max_abs_deviation={rep['max_abs_deviation']:.6g} "
          f"max_alpha_sum_deviation={rep['max_alpha_sum_deviation']:.6g}")
    if rep["failure"] is not None:
        print(f"violation at trial {rep['failure']['trial']}; case written to verify_merge.json", file=sys.stderr)
        return EXIT_VIOLATION
    return EXIT_OK


def _model_cfg(doc, key, default):
    try:
        return ModelConfig.from_dict(doc.get(key, default))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{key}: {e}") from e


def cmd_match_layers(args):
    doc = _load_config(args.config)
    edge = _model_cfg(doc, "edge", {"num_layers": 4, "num_heads": 2, "head_dim": 8, "seed": args.seed})
    cloud = _model_cfg(doc, "cloud", {"num_layers": 6, "num_heads": 2, "head_dim": 16, "seed": args.seed + 1})
    try:
        cfg = SimilarityConfig(float(doc.get("theta_cka", 0.5)), float(doc.get("theta_rsa", 0.3)),
                               int(doc.get("num_probe_samples", 64)))
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    rep = match_models(init_model(edge), init_model(cloud), cfg, seed=args.seed)
    man = _manifest(args)
    d = rep.to_dict()
    d["seed"] = args.seed
    man.write("layer_match.json", dumps(d))
    man.write("similarity.csv", rep.to_csv())
    man.close()
    print(f"seed={args.seed} edge_layers={edge.num_layers} cloud_layers={cloud.num_layers}")
    for m in rep.matches:
        print(f"  edge {m.edge_layer} -> cloud {m.cloud_layer}  cka={m.cka:.6f} rsa={m.rsa:.6f}")
    if not rep.shared_layers:
        print("warning: no layer pair passes the thresholds; no shared layers", file=sys.stderr)
    return EXIT_OK


def cmd_prune(args):
    doc = _load_config(args.config)
    rng = np.random.default_rng(args.seed)
    if "q" in doc and "k" in doc:
        q, k = np.asarray(doc["q"], float), np.asarray(doc["k"], float)
    else:
        s, d = int(doc.get("seq_len", 8)), int(doc.get("head_dim", 8))
        q, k = rng.standard_normal((s, d)), rng.standard_normal((s, d))
    if q.ndim != 2 or q.shape != k.shape:
        raise ConfigError(f"q and k must be matrices of the same shape, got {q.shape} and {k.shape}")
    try:
        spec = PruneSpec(float(doc.get("lambda", args.prune_lambda)), q.shape[1])
    except ValueError as e:
        raise ConfigError(str(e)) from e
    mask = select_channels(q, k, spec)
    rep = {"seed": args.seed, "lambda": spec.lam, "head_dim": spec.head_dim, "retained": spec.retained,
           "kept": list(mask.kept), "dropped": list(mask.dropped),
           "objective": prune_objective(q, k, mask),
           "full_norm": prune_objective(q, k, ChannelMask(spec.head_dim, ()))}
    if spec.head_dim <= 12:
        rep["optimum"] = min(prune_objective(q, k, ChannelMask(spec.head_dim, c))
                             for c in combinations(range(spec.head_dim), spec.retained))
    man = _manifest(args)
    man.write("prune.json", dumps(rep))
    man.close()
    print(f"seed={args.seed} lambda={spec.lam:.6g} retained={spec.retained}/{spec.head_dim} kept={list(mask.kept)}")
    print(f"objective={rep['objective']:.6g} optimum={_g(rep.get('optimum'))} full={rep['full_norm']:.6g}")
    return EXIT_OK


def cmd_cost(args):
    doc = _load_config(args.config)
    if args.paper_example:
        p, fr, bw = WORKED_EXAMPLE, EXAMPLE_FLOPS_RATE, EXAMPLE_BANDWIDTH
    else:
        vals = {f: doc.get(f) for f in ("b", "m", "k", "d_c", "d_e", "L")}
        for f in vals:
            flag = getattr(args, f.lower() if f != "L" else "num_layers")
            if flag is not None:
                vals[f] = flag
        missing = [f for f, v in vals.items() if v is None]
        if missing:
            raise ConfigError(f"missing parameters: {', '.join(missing)} (or use --paper-example)")
        try:
            p = DeltaParams(**{f: int(v) for f, v in vals.items()})
        except ValueError as e:
            raise ConfigError(str(e)) from e
        fr = args.flops_rate or doc.get("flops_rate", EXAMPLE_FLOPS_RATE)
        bw = args.bandwidth or doc.get("bandwidth", EXAMPLE_BANDWIDTH)
    try:
        rep = savings_report(p, float(fr), float(bw))
    except ValueError as e:
        raise ConfigError(str(e)) from e
    man = _manifest(args)
    d = rep.to_dict()
    d["seed"] = args.seed
    man.write("cost.json", dumps(d))
    man.write("cost.txt", rep.to_text())
    man.close()
    sys.stdout.write(rep.to_text())
    return EXIT_OK


def cmd_feasibility(args):
    doc = _load_config(args.config)
    try:
        hw_doc = dict(doc.get("cost", {"flops_rate": 1e9, "mem_bandwidth": 1e9}))
        hw = CostModel(**{k: float(v) for k, v in hw_doc.items()})
        layers = [LayerCost(**{k: int(v) for k, v in l.items()}) for l in doc.get("layers", [])]
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    if not layers:
        raise ConfigError("config needs a nonempty 'layers' list")
    M = len(layers)
    boundary = int(doc.get("boundary", M - int(doc.get("cloud_layers", 0))))
    sources = doc.get("sources") or ["cloud" if l > boundary else "local" for l in range(1, M + 1)]
    viol = feasibility_check(layers, hw)
    times = []
    for l, c in enumerate(layers, start=1):
        try:
            t_comm = comm_time(c.kv_bytes, hw.bandwidth("cloud", l)) if sources[l - 1] != "local" else 0.0
        except LinkDownError:
            t_comm = float("inf")
        times.append((t_comm, layer_compute_time(c, hw)))
    try:
        trace = pipeline_schedule(times, sources, boundary)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    rep = {"seed": args.seed, "feasible": not viol,
           "violations": [{"layer": v.layer, "constraint": v.constraint, "lhs": v.lhs, "rhs": v.rhs} for v in viol],
           "schedule": trace.to_dict()}
    man = _manifest(args)
    man.write("feasibility.json", dumps(rep))
    man.write("schedule.csv", trace.to_csv())
    man.close()
    print(f"feasible={'yes' if not viol else 'no'} sequential={trace.sequential_total:.6g} s "
          f"pipelined={trace.pipelined_total:.6g} s boundary={boundary}")
    for v in viol:
        print(f"  {v}")
    return EXIT_OK


def _scenario_doc(args):
    doc = _load_config(args.config)
    if args.config is None:
        raise ConfigError("--config is required")
    if args.seed_given or "seed" not in doc:
        doc["seed"] = args.seed
    args.seed = doc["seed"]
    return doc


def _modes(args):
    return MODES if args.mode in (None, "all") else (args.mode,)


SUMMARY_HEADER = f"{'mode':<13}{'completed':>10}{'failed':>8}{'avg_ttft_s':>13}{'avg_total_s':>13}" \
                 f"{'tx_bytes':>12}{'user_upload_bytes':>19}"


def _summary_row(rep):
    a = rep.aggregates()
    return (f"{rep.mode:<13}{a['completed']:>10d}{a['failed']:>8d}{_g(a['avg_ttft_s']):>13}"
            f"{_g(a['avg_latency_s']):>13}{rep.counters['transmitted_bytes']:>12d}"
            f"{rep.counters['cloud_bound_user_bytes']:>19d}")


def cmd_simulate(args):
    doc = _scenario_doc(args)
    try:
        sc = build_scenario(doc)
    except ScenarioError as e:
        raise ConfigError(str(e)) from e
    man = _manifest(args)
    man.write("scenario.json", sc.to_json())
    print(f"seed={sc.seed}")
    print(SUMMARY_HEADER)
    for mode in _modes(args):
        rep = run(sc, mode)
        man.write(f"metrics_{mode}.json", rep.to_json())
        man.write(f"metrics_{mode}.csv", rep.to_csv())
        man.write(f"events_{mode}.ndjson", rep.event_log())
        print(_summary_row(rep))
    man.close()
    return EXIT_OK


def cmd_sweep(args):
    doc = _scenario_doc(args)
    try:
        rates = [float(x) for x in args.rates.split(",") if x.strip()]
    except ValueError as e:
        raise ConfigError(f"--rates: {e}") from e
    if not rates or min(rates) <= 0:
        raise ConfigError("--rates must be a comma-separated list of positive numbers")
    try:
        rows = sweep(doc, rates, _modes(args))
    except (ScenarioError, ValueError) as e:
        raise ConfigError(str(e)) from e
    man = _manifest(args)
    man.write("sweep.csv", sweep_csv(rows))
    man.write("sweep.json", dumps({"seed": doc["seed"], "rates": rates, "rows": [
        {"rate": r, "mode": rep.mode, **rep.aggregates(), "event_log_sha256": rep.event_log_sha256()}
        for r, rep in rows]}))
    man.close()
    print(f"seed={doc['seed']}")
    print(f"{'rate':>6} " + SUMMARY_HEADER)
    for r, rep in rows:
        print(f"{r:>6g} " + _summary_row(rep))
    return EXIT_OK


# -- parser --------------------------------------------------------------
def build_parser():
    p = argparse.ArgumentParser(prog="celslm", description=__doc__.splitlines()[0], allow_abbrev=False)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, allow_abbrev=False)
        sp.add_argument("--config", default=None, help="JSON config path")
        sp.add_argument("--out", default=os.path.join("out", name), help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="master seed (default 42)")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("verify-merge", cmd_verify_merge, "random merge-identity property suite")
    sp.add_argument("--trials", type=int, default=1000)
    add("match-layers", cmd_match_layers, "CKA/RSA layer matching between two toy models")
    sp = add("prune", cmd_prune, "greedy channel selection with brute-force comparison")
    sp.add_argument("--lambda", dest="prune_lambda", type=float, default=0.5)
    sp = add("cost", cmd_cost, "FLOPs and I/O savings of reduced head dimension")
    sp.add_argument("--paper-example", action="store_true", help="use the published worked example")
    for f in ("b", "m", "k", "d-c", "d-e"):
        sp.add_argument(f"--{f}", type=int, default=None)
    sp.add_argument("--num-layers", type=int, default=None)
    sp.add_argument("--flops-rate", type=float, default=None)
    sp.add_argument("--bandwidth", type=float, default=None, help="bytes/s")
    add("feasibility", cmd_feasibility, "per-layer constraints and pipelined schedule")
    for name, fn in (("simulate", cmd_simulate), ("sweep", cmd_sweep)):
        sp = add(name, fn, f"{name} a scenario")
        sp.add_argument("--mode", choices=MODES + ("all",), default="all")
        if name == "sweep":
            sp.add_argument("--rates", default=DEFAULT_RATES, help="comma-separated request rates")
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    args.seed_given = args.seed is not None
    if args.seed is None:
        args.seed = 42
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"celslm {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
