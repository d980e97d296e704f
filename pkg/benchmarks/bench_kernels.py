"""Compiled vs pure-numpy kernels on training-sized shapes.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints one ``key=value`` record per kernel and shape.
"""

import argparse
import timeit

import numpy as np

from mirrornet import _fallback, kernels
from mirrornet.tensor import kernel_taps

try:
    from mirrornet import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None


def _cases(rng):
    # (label, N, H, W, C, dilation) at the four backbone levels of a batch of 10
    for label, h, c, d in [("l0", 32, 16, 1), ("l1", 16, 32, 2), ("l2", 8, 64, 4), ("l3", 4, 128, 1)]:
        x = rng.standard_normal((10, h, h, c)).astype(np.float32)
        taps = kernel_taps(3, d, d).astype(np.int32)
        yield label, x, taps


def bench(repeat: int) -> list:
    rng = np.random.default_rng(0)
    impls = {"python": _fallback}
    if _compiled is not None:
        impls["cython"] = _compiled
    rows = []
    for label, x, taps in _cases(rng):
        n, h, w, c = x.shape
        cols = _fallback.im2col(x, taps, 1, h, w)
        for name, mod in impls.items():
            t_fwd = min(timeit.repeat(lambda: mod.im2col(x, taps, 1, h, w), number=1, repeat=repeat))
            t_bwd = min(timeit.repeat(lambda: mod.col2im(cols, n, h, w, c, taps, 1, h, w),
                                      number=1, repeat=repeat))
            rows.append(f"kernel=im2col shape={label} impl={name} ms={1e3 * t_fwd:.3f}")
            rows.append(f"kernel=col2im shape={label} impl={name} ms={1e3 * t_bwd:.3f}")
    pos = np.stack(np.mgrid[0:32, 0:32], -1).reshape(-1, 2).astype(np.float64)
    rgb = rng.uniform(0, 255, (len(pos), 3))
    for name, mod in impls.items():
        t = min(timeit.repeat(lambda: mod.crf_kernel_rows(pos, rgb, 0, len(pos), 4.0, 3.0, 30.0, 13.0, 3.0),
                              number=1, repeat=repeat))
        rows.append(f"kernel=crf_rows shape=32x32 impl={name} ms={1e3 * t:.3f}")
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    print(f"active_backend={kernels.BACKEND}")
    for row in bench(args.repeat):
        print(row)


if __name__ == "__main__":
    main()
