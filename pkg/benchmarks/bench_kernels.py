#!/usr/bin/env python3
"""Time the numba kernels against the numpy fallback.

Each backend runs in its own interpreter because the choice is made at import
time from GRIDSIM_DISABLE_JIT.  Usage:

    python3 benchmarks/bench_kernels.py [--flows 1000] [--links 40] [--repeat 20]
"""

import argparse
import json
import os
import subprocess
import sys

CHILD = r"""
import json, sys, time
import numpy as np
from gridsim import kernels

flows, links, repeat, seed = (int(a) for a in sys.argv[1:5])
rng = np.random.default_rng(seed)

# random paths of 1..4 links, a few window caps
lens = rng.integers(1, 5, flows)
ptr = np.concatenate([[0], np.cumsum(lens)])
idx = np.concatenate([rng.choice(links, n, replace=False) for n in lens])
link_cap = rng.uniform(1e9, 1e10, links)
flow_cap = np.where(rng.random(flows) < 0.3, rng.uniform(1e8, 1e9, flows), np.inf)
weight = np.ones(flows)

# fixed-step integrator on one shared resource, 50 claims
m = 50
join = rng.uniform(0, 10, m)
work = rng.uniform(1, 100, m)
cptr = np.arange(m + 1)
cidx = np.zeros(m, dtype=np.int64)

kernels.warmup()
t0 = time.perf_counter()
for _ in range(repeat):
    rates = kernels.progressive_fill(ptr, idx, link_cap, flow_cap, weight)
fill = (time.perf_counter() - t0) / repeat
t0 = time.perf_counter()
done = kernels.integrate_fixed_step(join, work, np.ones(m), np.full(m, np.inf), cptr, cidx,
                                    np.array([10.0]), 1e-3, 1e4)
integ = time.perf_counter() - t0
print(json.dumps({"backend": kernels.BACKEND, "fill_s": fill, "integrate_s": integ,
                  "rate_sum": float(rates.sum()), "last_done": float(np.nanmax(done))}))
"""


def run_backend(disable: bool, args: argparse.Namespace) -> dict:
    env = dict(os.environ)
    env["GRIDSIM_DISABLE_JIT"] = "1" if disable else "0"
    out = subprocess.run(
        [sys.executable, "-c", CHILD, str(args.flows), str(args.links), str(args.repeat), str(args.seed)],
        env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--flows", type=int, default=1000)
    ap.add_argument("--links", type=int, default=40)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()

    jit = run_backend(False, args)
    ref = run_backend(True, args)
    print(f"{'kernel':<22}{jit['backend']:>12}{ref['backend']:>12}{'speedup':>10}")
    for key, label in (("fill_s", "progressive_fill"), ("integrate_s", "integrate_fixed_step")):
        print(f"{label:<22}{jit[key]:>11.4f}s{ref[key]:>11.4f}s{ref[key] / jit[key]:>9.1f}x")
    # both backends must give the same answer
    agree = (abs(jit["rate_sum"] - ref["rate_sum"]) <= 1e-9 * ref["rate_sum"]
             and abs(jit["last_done"] - ref["last_done"]) <= 1e-6 * ref["last_done"])
    print("results agree" if agree else "RESULTS DIFFER")
    sys.exit(0 if agree else 1)


if __name__ == "__main__":
    main()
