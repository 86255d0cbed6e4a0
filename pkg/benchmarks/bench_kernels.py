"""Compiled vs pure-Python kernel timings, plus end-to-end training steps.

    python benchmarks/bench_kernels.py [--repeat 20] [--steps 20]

Kernel timings call both implementations directly in this process.  The
training comparison runs a short pretraining in a subprocess per backend so
the import-time dispatch (``ROVIT_PURE_PYTHON``) is exercised for real.
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from rovit import _kernels_py

try:
    from rovit import _kernels as compiled
except ImportError:
    compiled = None


def _inputs(rng):
    # shapes seen in training: B=8 CPE crops of a 64x64 upsampled grid, 14x14 output, D=32
    grid = rng.normal(size=(8, 64, 64, 32))
    ys = rng.uniform(0, 63, size=(8, 196))
    xs = rng.uniform(0, 63, size=(8, 196))
    grad = rng.normal(size=(8, 196, 32))
    S = rng.normal(scale=5.0, size=(8, 8))
    return grid, ys, xs, grad, S


def kernel_table(repeat):
    grid, ys, xs, grad, S = _inputs(np.random.default_rng(0))
    calls = {
        "bilinear_gather": lambda m: m.bilinear_gather(grid, ys, xs),
        "bilinear_scatter": lambda m: m.bilinear_scatter(grad, ys, xs, 64, 64),
        "focal_terms": lambda m: m.focal_terms(S, 2.0),
    }
    rows = []
    for name, fn in calls.items():
        py = min(timeit.repeat(lambda: fn(_kernels_py), number=10, repeat=repeat)) / 10
        cy = min(timeit.repeat(lambda: fn(compiled), number=10, repeat=repeat)) / 10 if compiled else float("nan")
        rows.append((name, py, cy))
    return rows


_STEP_SCRIPT = """
import json, time
from rovit import kernels
from rovit.config import RunConfig
from rovit.train import pretrain
cfg = RunConfig().replace(run__steps={steps}, run__log_every=0, vit__pe_mode="cpe")
pretrain(cfg.replace(run__steps=2))
t0 = time.perf_counter()
res = pretrain(cfg)
print(json.dumps({{"backend": kernels.BACKEND, "seconds": time.perf_counter() - t0, "loss": float(res.losses[-1])}}))
"""


def training_steps(steps):
    out = {}
    for flag in ("0", "1"):
        env = dict(os.environ, ROVIT_PURE_PYTHON=flag)
        proc = subprocess.run([sys.executable, "-c", _STEP_SCRIPT.format(steps=steps)], env=env,
                              capture_output=True, text=True, check=True)
        rec = json.loads(proc.stdout.strip().splitlines()[-1])
        out[rec["backend"]] = rec
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--steps", type=int, default=20)
    args = ap.parse_args()

    if compiled is None:
        print("compiled extension not built; only the python column is meaningful")
    print(f"{'kernel':<18}{'python ms':>11}{'compiled ms':>13}{'speedup':>9}")
    for name, py, cy in kernel_table(args.repeat):
        print(f"{name:<18}{py * 1e3:>11.3f}{cy * 1e3:>13.3f}{py / cy:>8.1f}x")

    runs = training_steps(args.steps)
    print(f"\ntraining, {args.steps} CPE steps (B=8, dim 32, depth 2):")
    for backend, rec in sorted(runs.items()):
        print(f"  {backend:<9} {rec['seconds']:7.2f}s  {rec['seconds'] / args.steps * 1e3:7.1f} ms/step  "
              f"last loss {rec['loss']:.6f}")
    if len(runs) == 2:
        # scatter accumulation order differs, so agreement is to rounding, not bitwise
        diff = abs(runs["compiled"]["loss"] - runs["python"]["loss"])
        print(f"  |last loss difference| = {diff:.1e}")


if __name__ == "__main__":
    main()
