"""Compare the numba and pure-numpy kernel paths.

Runs each kernel on representative shapes under both backends, checks the
outputs agree, and times a full training step in a subprocess per backend
(the backend is fixed at import time by CROCO_DISABLE_NUMBA).

    python benchmarks/bench_kernels.py
"""

import os
import subprocess
import sys
import time

import numpy as np

from croco import kernels


def timeit(fn, *args, repeat=5):
    fn(*args)  # warm-up / JIT compile
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t)
    return best


def kernel_table():
    rng = np.random.default_rng(0)
    xp = rng.standard_normal((64, 34, 34, 3)).astype(np.float32)
    cols = rng.standard_normal((64, 8, 8, 9, 64)).astype(np.float32)
    dem = rng.standard_normal((3, 640, 640))
    scores = rng.standard_normal((512, 3249))
    targets = rng.integers(0, 3249, 512)
    cases = [
        ("im2col 64x34x34x3 s2", "im2col", (xp, 3, 2, 16, 16)),
        ("col2im 64x8x8x9x64 s2", "col2im", (cols, 18, 18, 3, 2)),
        ("block_mean 3x640x640 f10", "block_mean", (dem, 10)),
        ("count_rank 512x3249", "count_rank", (scores, targets)),
    ]
    print(f"{'kernel':28s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}  agree")
    for label, name, args in cases:
        np_fn = getattr(kernels, name + "_numpy")
        t_np = timeit(np_fn, *args)
        if kernels.HAS_NUMBA:
            nb_fn = getattr(kernels, name + "_numba")
            t_nb = timeit(nb_fn, *args)
            agree = np.allclose(np_fn(*args), nb_fn(*args), rtol=1e-6, atol=1e-6)
            print(f"{label:28s} {1e3 * t_np:10.3f} {1e3 * t_nb:10.3f} {t_np / t_nb:8.2f}  {agree}")
        else:
            print(f"{label:28s} {1e3 * t_np:10.3f} {'n/a':>10s}")


STEP_SCRIPT = r"""
import time, numpy as np
from croco import kernels
from croco.encoder import init_branch
from croco.sampling import PairBatch
from croco.trainer import TrainConfig, train_step, OptimizerState
rng = np.random.default_rng(0)
n, p = 32, 32
batch = PairBatch(rng.standard_normal((n, 3, p, p)).astype(np.float32),
                  rng.standard_normal((n, 3, p, p)).astype(np.float32),
                  np.zeros((n, 2), dtype=int))
cfg = TrainConfig(batch_size=n)
rgb, dem = init_branch("RGB", "desk", 0), init_branch("DEM", "desk", 0)
st = OptimizerState()
train_step(rgb, dem, batch, cfg, st)
t = time.perf_counter()
for _ in range(20):
    train_step(rgb, dem, batch, cfg, st)
print(kernels.backend(), (time.perf_counter() - t) / 20)
"""


def step_table():
    print("\ntrain_step (desk arch, N=32, 32 px patches), seconds per step")
    for flag in ("0", "1"):
        env = dict(os.environ, CROCO_DISABLE_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", STEP_SCRIPT], env=env, capture_output=True, text=True, check=True)
        backend, sec = out.stdout.split()
        print(f"  {backend:6s} {float(sec):.4f}")


if __name__ == "__main__":
    kernel_table()
    step_table()
