"""Time the GRU recurrence on the compiled and numpy backends.

    python benchmarks/bench_gru.py --batch 48 --steps 50 --hidden 256
"""

import argparse
import time

import numpy as np

from omoq.autodiff import Tensor, gru_layer, kernels, ops


def _time(fn, repeats):
    fn()  # warm-up
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--batch", type=int, default=48)
    ap.add_argument("--steps", type=int, default=50)
    ap.add_argument("--input", type=int, default=256)
    ap.add_argument("--hidden", type=int, default=256)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    dt = np.dtype(args.dtype)
    b, t, d, h = args.batch, args.steps, args.input, args.hidden
    scale = 1 / np.sqrt(h)
    x = Tensor(rng.standard_normal((b, t, d)).astype(dt))
    params = [Tensor((rng.uniform(-scale, scale, s)).astype(dt), requires_grad=True)
              for s in ((3 * h, d), (3 * h, h), (3 * h,), (3 * h,))]
    lengths = rng.integers(t // 2, t + 1, size=b)
    mask = (np.arange(t)[None, :] < lengths[:, None]).astype(dt)

    def fwd():
        return gru_layer(x, *params, mask=mask)

    def fwd_bwd():
        for p in params:
            p.grad = None
        ops.sum(fwd()).backward()

    print(f"GRU B={b} T={t} D={d} H={h} {args.dtype}, best of {args.repeats}")
    results = {}
    outputs = {}
    for name in kernels.available():
        kernels.use_backend(name)
        outputs[name] = fwd().data
        results[name] = (_time(fwd, args.repeats), _time(fwd_bwd, args.repeats))
        print(f"  {name:7s} forward {results[name][0] * 1e3:8.2f} ms   forward+backward {results[name][1] * 1e3:8.2f} ms")
    if len(results) == 2:
        print(f"  speed-up (python / cython): forward {results['python'][0] / results['cython'][0]:.2f}x, "
              f"forward+backward {results['python'][1] / results['cython'][1]:.2f}x")
        print(f"  max |difference| between backends: {np.max(np.abs(outputs['python'] - outputs['cython'])):.2e}")
    else:
        print("  compiled backend unavailable; build with `pip install -e . --no-build-isolation`")


if __name__ == "__main__":
    main()
