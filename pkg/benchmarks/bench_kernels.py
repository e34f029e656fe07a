"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N] [--json PATH]

Both backends are also checked for bit-identical output on every case.
"""
import argparse
import json
import sys
import timeit

import numpy as np

from celslm import kernels


def cases(rng):
    a, b = rng.standard_normal((64, 64)), rng.standard_normal((64, 64))
    q, k, v = rng.standard_normal((64, 16)), rng.standard_normal((128, 16)), rng.standard_normal((128, 16))
    m = rng.standard_normal((64, 256))
    return [
        ("matmul 64x64x64", "matmul", (a, b)),
        ("softmax_rows 64x256", "softmax_rows", (m,)),
        ("segment_attention 128x16", "segment_attention", (q[0], k, v)),
        ("causal_attention 64q/128k d=16", "causal_attention", (q, k, v, 64)),
    ]


def same(x, y):
    if isinstance(x, tuple):
        return all(same(a, b) for a, b in zip(x, y))
    return np.array_equal(x, y)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--json", default=None, help="write results to this path")
    args = p.parse_args(argv)
    try:
        backends = {"python": kernels.get_backend("python"), "cython": kernels.get_backend("cython")}
    except ImportError:
        print("compiled extension not built; run `pip install -e . --no-build-isolation`", file=sys.stderr)
        return 1
    rng = np.random.default_rng(0)
    rows = []
    print(f"{'case':<34}{'python ms':>12}{'cython ms':>12}{'speedup':>10}  identical")
    for name, fn, fargs in cases(rng):
        t = {}
        for b, mod in backends.items():
            f = getattr(mod, fn)
            n = 1 if b == "python" else 20
            t[b] = min(timeit.repeat(lambda: f(*fargs), number=n, repeat=args.repeat)) / n * 1e3
        ident = same(backends["python"].__dict__[fn](*fargs), backends["cython"].__dict__[fn](*fargs))
        rows.append({"case": name, "python_ms": t["python"], "cython_ms": t["cython"],
                     "speedup": t["python"] / t["cython"], "identical": bool(ident)})
        print(f"{name:<34}{t['python']:>12.4f}{t['cython']:>12.4f}{t['python'] / t['cython']:>9.1f}x  {ident}")
    if args.json:
        with open(args.json, "w") as f:
            json.dump(rows, f, indent=2)
    return 0 if all(r["identical"] for r in rows) else 1


if __name__ == "__main__":
    sys.exit(main())
