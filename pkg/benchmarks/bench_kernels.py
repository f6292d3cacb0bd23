"""Compare the numba and numpy conv1d kernels, then a full desk train step.

    python benchmarks/bench_kernels.py [--repeat 20]

Kernel timings call both implementations directly in one process. The train
step is timed in two subprocesses, one with MOLRE_NUMBA=0.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from mmolre import _kernels

# (B, T, C_in, C_out, K): desk expert, mid-size, full-width low-rank expert
SIZES = [(16, 8, 32, 8, 3), (16, 10, 128, 32, 3), (8, 50, 768, 128, 3), (8, 50, 128, 768, 1)]

STEP_SNIPPET = """
import time
from mmolre import config as C
from mmolre._kernels import backend_name
from mmolre.data import generate_dataset
from mmolre.model import AdamW, build_variant, train_step
cfg = C.resolve(preset="desk")
data = generate_dataset(C.dataset_config(cfg))
tcfg = C.train_config(cfg)
m = build_variant("mmolre", C.molre_config(cfg), C.fusion_config(cfg))
opt = AdamW.from_config(m.named_parameters(), tcfg)
train_step(m, data, opt, tcfg)
t0 = time.perf_counter()
for i in range({n}):
    train_step(m, data, opt, tcfg, i)
print(backend_name(), (time.perf_counter() - t0) / {n} * 1e3)
"""


def best_ms(fn, repeat):
    fn()  # warm-up (and numba compile)
    return min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e3


def bench_kernels(repeat):
    if not _kernels.HAS_NUMBA:
        print("numba not installed; only the numpy path is available")
        return
    rng = np.random.default_rng(0)
    print(f"{'B,T,Cin,Cout,K':>22} {'fwd np':>9} {'fwd nb':>9} {'bwd np':>9} {'bwd nb':>9}  (ms, best of {repeat})")
    for B, T, c_in, c_out, K in SIZES:
        x = rng.normal(size=(B, T, c_in))
        w = rng.normal(size=(K, c_in, c_out))
        b = rng.normal(size=c_out)
        g = rng.normal(size=(B, T, c_out))
        pad = (K - 1) // 2
        row = [
            best_ms(lambda: _kernels.conv1d_forward_np(x, w, b, pad), repeat),
            best_ms(lambda: _kernels._conv1d_forward_nb(x, w, b, pad), repeat),
            best_ms(lambda: _kernels.conv1d_backward_np(x, w, g, pad), repeat),
            best_ms(lambda: _kernels._conv1d_backward_nb(x, w, g, pad), repeat),
        ]
        label = f"{B},{T},{c_in},{c_out},{K}"
        print(f"{label:>22} " + " ".join(f"{v:9.3f}" for v in row))


def bench_train_step(n):
    print(f"\ndesk train step, mean of {n} steps:")
    for flag in ("1", "0"):
        env = {**os.environ, "MOLRE_NUMBA": flag}
        proc = subprocess.run(
            [sys.executable, "-c", STEP_SNIPPET.format(n=n)], env=env, capture_output=True, text=True, check=True
        )
        backend, ms = proc.stdout.split()
        print(f"  {backend:6s} {float(ms):8.2f} ms/step")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--steps", type=int, default=30)
    args = ap.parse_args()
    bench_kernels(args.repeat)
    bench_train_step(args.steps)


if __name__ == "__main__":
    main()
