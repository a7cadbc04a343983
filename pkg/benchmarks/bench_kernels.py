"""Compare the numba and numpy kernel paths.

Per-kernel timings run in-process (both tables are importable side by side);
the end-to-end chip forward/backward timing is repeated in a subprocess per
backend so ``ALIEN_NUMBA`` takes effect at import time.

    python benchmarks/bench_kernels.py [--repeat 5] [--batch 16]
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from alien import _kernels as K

# (input shape, kernel size) for the convolutions of the detector stack at batch 16
CONV_SHAPES = [
    ((80, 80, 3), 3),
    ((78, 78, 16), 3),
    ((38, 38, 16), 5),
    ((34, 34, 16), 3),
    ((32, 32, 16), 5),
    ((14, 14, 16), 3),
    ((12, 12, 32), 5),
]
POOL_SHAPES = [(76, 76, 16), (28, 28, 16), (8, 8, 32), (2, 2, 32)]


def timeit(fn, repeat):
    fn()  # warm-up (includes jit compilation)
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def kernel_table(batch, repeat):
    rng = np.random.default_rng(0)
    rows = []
    for shape, k in CONV_SHAPES:
        x = rng.random((batch,) + shape, dtype=np.float32)
        cols = K.im2col_numpy(x, k)
        rows.append((f"im2col k={k} {shape}", timeit(lambda: K.im2col_numpy(x, k), repeat),
                     timeit(lambda: K.im2col_numba(x, k), repeat)))
        rows.append((f"col2im k={k} {shape}", timeit(lambda: K.col2im_numpy(cols, x.shape, k), repeat),
                     timeit(lambda: K.col2im_numba(cols, x.shape, k), repeat)))
    for shape in POOL_SHAPES:
        x = rng.random((batch,) + shape, dtype=np.float32)
        out, idx = K.maxpool2_forward_numpy(x)
        rows.append((f"maxpool fwd {shape}", timeit(lambda: K.maxpool2_forward_numpy(x), repeat),
                     timeit(lambda: K.maxpool2_forward_numba(x), repeat)))
        rows.append((f"maxpool bwd {shape}", timeit(lambda: K.maxpool2_backward_numpy(out, idx), repeat),
                     timeit(lambda: K.maxpool2_backward_numba(out, idx), repeat)))
    return rows


_E2E = """
import sys, time, numpy as np
from alien.model import build_alien
from alien import _kernels
batch, repeat = int(sys.argv[1]), int(sys.argv[2])
m = build_alien(0)
x = np.random.default_rng(0).random((batch, 80, 80, 3), dtype=np.float32)
def step():
    out = m.forward(x, train=True)
    m.backward(np.ones_like(out))
step()
best = min((lambda t: (step(), time.perf_counter() - t)[1])(time.perf_counter()) for _ in range(repeat))
print(_kernels.BACKEND, best / batch * 1e3)
"""


def end_to_end(batch, repeat):
    out = {}
    for flag in ("1", "0"):
        env = dict(os.environ, ALIEN_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", _E2E, str(batch), str(repeat)],
                             env=env, capture_output=True, text=True, check=True)
        name, ms = res.stdout.split()
        out[name] = float(ms)
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--batch", type=int, default=16)
    args = ap.parse_args()

    print(f"numba available: {K.HAVE_NUMBA}; active backend: {K.BACKEND}")
    print(f"{'kernel':<34} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, t_np, t_nb in kernel_table(args.batch, args.repeat):
        print(f"{name:<34} {t_np * 1e3:10.3f} {t_nb * 1e3:10.3f} {t_np / t_nb:8.2f}")
    e2e = end_to_end(args.batch, args.repeat)
    print()
    print("full detector stack forward+backward, ms per chip:")
    for name, ms in e2e.items():
        print(f"  {name:<6} {ms:8.2f}")


if __name__ == "__main__":
    main()
