"""Compare the compiled and numpy kernel backends on the shapes training actually uses.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import time

import numpy as np

from liseg import kernels
from liseg.autodiff import Tensor, backward, conv3d
from liseg.metrics import hausdorff
from liseg.stunet import build_stunet, forward, preset


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases():
    rng = np.random.default_rng(0)
    xp = rng.standard_normal((16, 34, 34, 34))
    cols = kernels.get_backend("python").im2col3d(xp, 3, 3, 3, 1, 1, 1, 32, 32, 32)
    x = Tensor(rng.standard_normal((1, 16, 32, 32, 32)), requires_grad=True)
    w = Tensor(rng.standard_normal((16, 16, 3, 3, 3)) * 0.1, requires_grad=True)
    b = Tensor(np.zeros(16), requires_grad=True)
    mask_a = np.zeros((64, 64, 64), bool)
    mask_a[10:50, 12:40, 20:60] = True
    mask_b = np.roll(mask_a, 3, axis=0)
    net = build_stunet(preset("toy"), 0)
    vol = rng.standard_normal((1, 1, 32, 32, 32))

    def conv_fwd_bwd():
        backward(conv3d(x, w, b, 1, 1).sum())

    return [
        ("im2col 16ch 32^3 k3", lambda k: k.im2col3d(xp, 3, 3, 3, 1, 1, 1, 32, 32, 32)),
        ("col2im 16ch 32^3 k3", lambda k: k.col2im3d(cols, 16, 34, 34, 34, 3, 3, 3, 1, 1, 1, 32, 32, 32)),
        ("edt 64^3", lambda k: k.edt_sq(mask_a.astype(np.uint8), (1.0, 1.0, 1.0))),
        ("conv3d fwd+bwd 16->16 32^3", lambda k: conv_fwd_bwd()),
        ("hausdorff 64^3 pair", lambda k: hausdorff(mask_a, mask_b)),
        ("toy network forward 32^3", lambda k: forward(net, vol)),
    ]


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args()
    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled kernels are not built; only the numpy fallback is timed")
    print(f"{'case':<30}" + "".join(f"{b:>12}" for b in backends) + ("   speedup" if len(backends) == 2 else ""))
    for name, fn in cases():
        row = []
        for b in backends:
            previous = kernels.use_backend(b)
            try:
                impl = kernels.get_backend(b)
                row.append(best_of(lambda: fn(impl), args.repeat))
            finally:
                kernels.use_backend(previous)
        line = f"{name:<30}" + "".join(f"{t * 1e3:>10.1f}ms" for t in row)
        if len(row) == 2:
            line += f"   {row[0] / row[1]:>6.1f}x"
        print(line)


if __name__ == "__main__":
    main()
