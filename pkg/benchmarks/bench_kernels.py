"""Compare the compiled and pure-Python kernel backends.

    python3 benchmarks/bench_kernels.py [--repeats 5] [--quick]

Each kernel runs on identical inputs under every available backend; the
table reports the median wall time and the speedup of each backend over
the pure-Python one. Outputs are also checked for agreement.
"""

import argparse
import statistics
import time

import numpy as np

from frcnn.kernels import available_backends, get_backend


def _time(fn, repeats):
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def _rects(rng, n, Hf, Wf):
    h = rng.integers(1, Hf + 1, n)
    w = rng.integers(1, Wf + 1, n)
    r = rng.integers(0, Hf - h + 1)
    c = rng.integers(0, Wf - w + 1)
    return np.stack([r, c, h, w], axis=1).astype(np.int64)


def cases(rng, quick):
    C, Hf, Wf = (16, 38, 50) if quick else (64, 38, 50)
    R = 64 if quick else 128
    fm = rng.normal(size=(C, Hf, Wf))
    rects = _rects(rng, R, Hf, Wf)
    grad = rng.normal(size=(R, C, 7, 7))

    n_boxes = 500 if quick else 2000
    xy = rng.uniform(0, 500, (n_boxes, 2))
    wh = rng.uniform(10, 150, (n_boxes, 2))
    boxes = np.concatenate([xy, xy + wh], axis=1)

    m = 64 if quick else 256
    a_T = np.ascontiguousarray(rng.normal(size=(m, m)))

    def fwd(k):
        return lambda: k.roi_pool_forward(fm, rects, 7, 7)

    def bwd(k):
        argmax = k.roi_pool_forward(fm, rects, 7, 7)[1]
        return lambda: k.roi_pool_backward(grad, argmax, fm.size)

    def nms(k):
        return lambda: k.nms_sorted(boxes, 0.3)

    def svd(k):
        # the kernel rotates its input in place, so every call gets a fresh copy
        def run():
            g = k.jacobi_svd(a_T.copy(), 1e-10, 60)[0]
            return np.sort(np.sqrt(np.einsum("ij,ij->i", g, g)))
        return run

    return [
        (f"roi_pool_forward R={R} C={C} 7x7", fwd),
        (f"roi_pool_backward R={R} C={C} 7x7", bwd),
        (f"nms_sorted n={n_boxes}", nms),
        (f"jacobi_svd {m}x{m}", svd),
    ]


def _agree(a, b):
    if isinstance(a, tuple):
        return all(_agree(x, y) for x, y in zip(a, b))
    if isinstance(a, np.ndarray):
        return a.shape == b.shape and np.allclose(a, b, rtol=1e-9, atol=1e-9)
    return True


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--quick", action="store_true", help="smaller inputs")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    backends = available_backends()
    rng = np.random.default_rng(args.seed)
    print("kernel\t" + "\t".join(f"{b}_ms" for b in backends) + "\tspeedup")
    for name, make in cases(rng, args.quick):
        fns = {b: make(get_backend(b)) for b in backends}
        outs = {b: fn() for b, fn in fns.items()}
        if not _agree(outs[backends[0]], outs["python"]):
            raise SystemExit(f"{name}: backends disagree")
        times = {b: _time(fn, args.repeats) for b, fn in fns.items()}
        speed = times["python"] / times[backends[0]]
        print(name + "\t" + "\t".join(f"{1e3 * times[b]:.3f}" for b in backends) + f"\t{speed:.1f}x")


if __name__ == "__main__":
    main()
