"""Compare the numba and numpy kernel backends.

The backend is chosen at import time from FEDSIGN_BACKEND, so each
configuration runs in a subprocess.  Workloads: raw conv/pool kernels
at the desk-scale shapes, plus a short CNN training loop.

    python3 benchmarks/bench_kernels.py
"""

import json
import os
import subprocess
import sys
import time

WORKER = """
import json, os, sys, time
import numpy as np
from fedsign import kernels
from fedsign.data import make_synthetic
from fedsign.nn import build_cnn, fit, rng_for

def timeit(fn, repeat):
    fn()  # warmup (and numba compilation)
    start = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - start) / repeat

rng = rng_for("bench")
x = rng.normal(size=(64, 8, 8, 8))
w = rng.normal(size=(3, 3, 8, 16))
b = rng.normal(size=16)
y = kernels.conv2d_forward(x, w, b)
dy = rng.normal(size=y.shape)

results = {"backend": kernels.BACKEND}
results["conv2d_forward"] = timeit(lambda: kernels.conv2d_forward(x, w, b), 20)
results["conv2d_backward"] = timeit(lambda: kernels.conv2d_backward(x, w, dy), 20)
results["maxpool2_forward"] = timeit(lambda: kernels.maxpool2_forward(y), 50)

ds = make_synthetic(4, 50, seed=1, kind="images")
def train():
    net = build_cnn(8, 1, [8, 16], 4, seed=2)
    fit(net, ds.inputs, ds.labels, epochs=2, lr=0.01, seed=3)
results["cnn_train_2_epochs"] = timeit(train, 3)
print(json.dumps(results))
"""


def run_backend(backend):
    env = dict(os.environ, FEDSIGN_BACKEND=backend)
    out = subprocess.run([sys.executable, "-c", WORKER], env=env,
                         capture_output=True, text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main():
    rows = [run_backend(b) for b in ("numpy", "numba")]
    names = [k for k in rows[0] if k != "backend"]
    width = max(len(n) for n in names)
    print(f"{'workload':<{width}}  {'numpy':>12}  {'numba':>12}  speedup")
    for name in names:
        a, b = rows[0][name], rows[1][name]
        print(f"{name:<{width}}  {a * 1e3:>10.3f}ms  {b * 1e3:>10.3f}ms  {a / b:>6.2f}x")


if __name__ == "__main__":
    main()
