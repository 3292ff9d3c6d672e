"""Compiled kernels against the pure-numpy fallback.

Each backend runs in its own interpreter because ``SMBA_DISABLE_NUMBA`` is read
at import time. Both runs solve the same instance with the same seed, so the
final objective values must agree.

    python3 benchmarks/bench_numba_vs_numpy.py --n 50 --m 100 --iters 10000
"""
import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, time
import numpy as np
from smba import BACKEND, GenSpec, SolverConfig, StepsizeSchedule, gen_instance, qcqp_as_problem, run

n, m, iters, method, repeats = int(sys.argv[1]), int(sys.argv[2]), int(sys.argv[3]), sys.argv[4], int(sys.argv[5])
inst, x0, _ = gen_instance(GenSpec(n, m, seed=1))
prob = qcqp_as_problem(inst)
cfg = SolverConfig(StepsizeSchedule.sqrt_log(1.0 / prob.objective.lipschitz_grad), max_iters=iters, stopping=None)
t0 = time.perf_counter()
run(prob, SolverConfig(cfg.schedule, max_iters=10, stopping=None), x0, method=method)
warmup = time.perf_counter() - t0
times = []
for _ in range(repeats):
    tr = run(prob, cfg, x0, method=method)
    times.append(tr.wall_time)
print(json.dumps({"backend": BACKEND, "warmup": warmup, "times": times, "f_final": float(tr.f[-1])}))
"""


def run_backend(disable, args):
    env = dict(os.environ, SMBA_DISABLE_NUMBA="1" if disable else "0")
    cmd = [sys.executable, "-c", WORKER, str(args.n), str(args.m), str(args.iters), args.method, str(args.repeats)]
    res = subprocess.run(cmd, env=env, capture_output=True, text=True, check=True)
    return json.loads(res.stdout)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--m", type=int, default=100)
    p.add_argument("--iters", type=int, default=10_000)
    p.add_argument("--method", choices=["smba", "max-violation"], default="smba")
    p.add_argument("--repeats", type=int, default=3)
    args = p.parse_args()

    results = [run_backend(False, args), run_backend(True, args)]
    print(f"n = {args.n}, m = {args.m}, {args.iters} {args.method} iterations, best of {args.repeats}")
    print(f"{'backend':>8} {'warmup [s]':>11} {'run [s]':>9} {'us/iter':>8}  final f")
    for r in results:
        best = min(r["times"])
        print(f"{r['backend']:>8} {r['warmup']:11.3f} {best:9.3f} {1e6 * best / args.iters:8.2f}  {r['f_final']!r}")
    fast, slow = (min(r["times"]) for r in results)
    print(f"speedup {slow / fast:.1f}x")
    if results[0]["f_final"] != results[1]["f_final"]:
        print("warning: backends disagree on the final objective value")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
