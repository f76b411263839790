"""Time the compiled kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from viptt import _kernels


def cases(rng):
    x = rng.normal(size=(16, 8, 32, 32))
    w = rng.normal(size=(16, 8, 3, 3))
    b = rng.normal(size=16)
    dy = rng.normal(size=(16, 16, 32, 32))
    vol = rng.random((16, 64, 64))
    return {
        "conv2d_forward 16x8x32x32 k3": lambda k: k.conv2d_forward(x, w, b, 1),
        "conv2d_backward 16x8x32x32 k3": lambda k: k.conv2d_backward(x, w, dy, 1),
        "maxpool2_forward 16x8x32x32": lambda k: k.maxpool2_forward(x),
        "rotate_bilinear 16x64x64": lambda k: k.rotate_bilinear(vol, 0.3),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = _kernels.available_backends()
    if "cython" not in backends:
        print("compiled kernels not built; only the python backend is timed")
    mods = {name: _kernels.get_backend(name) for name in backends}
    print(f"{'kernel':34s}" + "".join(f"{n:>12s}" for n in mods) + ("     speedup" if len(mods) == 2 else ""))
    for label, fn in cases(np.random.default_rng(0)).items():
        times = {}
        for name, mod in mods.items():
            fn(mod)  # warm up
            times[name] = min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat))
        row = f"{label:34s}" + "".join(f"{t * 1e3:10.2f}ms" for t in times.values())
        if len(times) == 2:
            row += f"{times['python'] / times['cython']:11.2f}x"
        print(row)


if __name__ == "__main__":
    main()
