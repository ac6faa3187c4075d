"""Compare the numba and pure-numpy backends.

Two levels:

* kernels: row gather and scatter-add at embedding-lookup sizes, both
  implementations timed in one process;
* end to end: one melo outer step (recurrent, dims 32, batch 8), run in a
  fresh interpreter per backend so the env flag takes effect at import.

Usage: python3 benchmarks/bench_kernels.py [--repeats N]
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

STEP_SNIPPET = r"""
import json, time
import numpy as np
from metarec import BACKEND, data as D, meta as M
from metarec.recommender import RecommenderConfig
seqs = D.synthesize([D.GENEROUS, D.FAIR, D.GRUMPY], [.7, .2, .1], 64, 200, 0)
eps = [D.build_episode(s) for s in seqs]
L = M.MetaLearner(RecommenderConfig("recurrent", 201, 32, 32, 1, 10), M.TrainConfig(mode="melo"))
theta, phi = L.init_params(0)
batch = D.collate(eps[:8])
L.meta_gradient(theta, phi, batch)  # warm-up (and numba compile)
times = []
for _ in range({repeats}):
    t = time.perf_counter()
    L.meta_gradient(theta, phi, batch)
    times.append(time.perf_counter() - t)
print(json.dumps({{"backend": BACKEND, "best_ms": 1e3 * min(times), "median_ms": 1e3 * float(np.median(times))}}))
"""


def bench_kernels(repeats: int) -> list[dict]:
    from metarec import _kernels as K

    rng = np.random.default_rng(0)
    rows_out = []
    for n_rows, d, n in ((201, 32, 8 * 25 * 10), (201, 32, 8 * 25 * 30), (5001, 64, 8 * 25 * 30)):
        table = rng.normal(size=(n_rows, d))
        rows = rng.integers(-1, n_rows, size=n)
        grad = rng.normal(size=(n, d))
        entry = {"rows": n_rows, "dim": d, "lookups": n}
        impls = {"numpy": (K.gather_rows_np, K.scatter_add_rows_np)}
        if K.USE_NUMBA:
            impls["numba"] = (K.gather_rows, K.scatter_add_rows)
            K.gather_rows(table, rows, -1)
            K.scatter_add_rows(grad, rows, n_rows, -1)
        for name, (gather, scatter) in impls.items():
            tg = min(timeit.repeat(lambda: gather(table, rows, -1), number=20, repeat=repeats)) / 20
            ts = min(timeit.repeat(lambda: scatter(grad, rows, n_rows, -1), number=20, repeat=repeats)) / 20
            entry[f"{name}_gather_us"] = round(1e6 * tg, 1)
            entry[f"{name}_scatter_us"] = round(1e6 * ts, 1)
        rows_out.append(entry)
    return rows_out


def bench_step(repeats: int) -> list[dict]:
    out = []
    for flag in ("0", "1"):
        env = dict(os.environ, METAREC_DISABLE_NUMBA=flag)
        proc = subprocess.run(
            [sys.executable, "-c", STEP_SNIPPET.format(repeats=repeats)], env=env, capture_output=True, text=True, check=True
        )
        out.append(json.loads(proc.stdout.strip().splitlines()[-1]))
    return out


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    print("kernels (microseconds per call, best of repeats)")
    for r in bench_kernels(args.repeats):
        print("  " + json.dumps(r))
    print("melo outer step (milliseconds)")
    for r in bench_step(args.repeats):
        print("  " + json.dumps(r))


if __name__ == "__main__":
    main()
