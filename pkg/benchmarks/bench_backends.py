"""Compare the compiled kernels with the NumPy fallback.

Times each hot kernel on supernet-sized inputs, then one forward+backward
step of the broad search supernet, under both backends.

    python3 benchmarks/bench_backends.py --repeat 5
"""

import argparse
import statistics
import time

import numpy as np

from bdarts.engine import Tensor, backward, kernels, set_backend
from bdarts.engine import functional as F
from bdarts.topology import BroadConfig, build_broad


def _kernel_cases(batch, c, hw, dtype, rng):
    x = rng.standard_normal((batch, c, hw, hw)).astype(dtype)
    dw3 = rng.standard_normal((c, 1, 3, 3)).astype(dtype)
    dw5 = rng.standard_normal((c, 1, 5, 5)).astype(dtype)
    pw = rng.standard_normal((c, c, 1, 1)).astype(dtype)
    g = rng.standard_normal(x.shape).astype(dtype)
    xhat, inv = kernels.bn_forward(x, 1e-5)
    return {
        "depthwise 3x3 fwd": lambda: kernels.conv2d_forward(x, dw3, 1, 1, 1, c),
        "depthwise 5x5 dil2 fwd": lambda: kernels.conv2d_forward(x, dw5, 1, 4, 2, c),
        "depthwise 3x3 bwd input": lambda: kernels.conv2d_backward_input(g, dw3, hw, hw, 1, 1, 1, c),
        "depthwise 3x3 bwd weight": lambda: kernels.conv2d_backward_weight(g, x, 3, 3, 1, 1, 1, c),
        "pointwise fwd": lambda: kernels.conv2d_forward(x, pw, 1, 0, 1, 1),
        "max pool 3x3 fwd": lambda: kernels.maxpool2d_forward(x, 3, 1, 1),
        "avg pool 3x3 fwd": lambda: kernels.avgpool2d_forward(x, 3, 1, 1),
        "batchnorm fwd": lambda: kernels.bn_forward(x, 1e-5),
        "batchnorm bwd": lambda: kernels.bn_backward(g, xhat, inv),
    }


def _time(fn, repeat):
    fn()  # warm caches and lazy imports
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def _supernet_step(c0, batch, hw, dtype, rng):
    net = build_broad(BroadConfig(2, 0, 1, c0, 10), "search", dtype=dtype)
    x = Tensor(rng.standard_normal((batch, 3, hw, hw)).astype(dtype))
    y = rng.integers(0, 10, batch)
    params = net.parameters() + net.arch_parameters()

    def step():
        backward(F.cross_entropy(net(x), y))
        for p in params:
            p.grad = None

    return step


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--dtype", choices=("float32", "float64"), default="float64")
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--skip-step", action="store_true", help="kernels only")
    args = p.parse_args(argv)

    if kernels._ckernels is None:
        raise SystemExit("compiled kernels are not built; run pip install -e . --no-build-isolation")
    dtype = np.dtype(args.dtype).type
    results = {}
    for name in ("cython", "numpy"):
        prev = set_backend(name)
        try:
            rng = np.random.default_rng(0)
            cases = _kernel_cases(args.batch, args.channels, args.size, dtype, rng)
            if not args.skip_step:
                cases["broad supernet step"] = _supernet_step(4, args.batch, args.size, dtype, rng)
            results[name] = {k: _time(fn, args.repeat) for k, fn in cases.items()}
        finally:
            set_backend(prev)

    print(f"batch {args.batch}  channels {args.channels}  size {args.size}  {args.dtype}  "
          f"median of {args.repeat}")
    print(f"{'kernel':<26} {'cython (ms)':>12} {'numpy (ms)':>12} {'speedup':>8}")
    for k in results["cython"]:
        c, n = results["cython"][k], results["numpy"][k]
        print(f"{k:<26} {1e3 * c:>12.3f} {1e3 * n:>12.3f} {n / c:>7.2f}x")


if __name__ == "__main__":
    main()
