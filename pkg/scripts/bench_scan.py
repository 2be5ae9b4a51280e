"""Time the sequential and chunked scan kernels and the fused forward/backward."""
import argparse
import time

import numpy as np

from mambadfuse import tensor as T
from mambadfuse.scan import default_chunk, discretize, fused_scan, scan_chunked, scan_sequential


def _time(fn, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--tokens", type=int, nargs="+", default=[256, 1024, 4096])
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--d-state", type=int, default=4)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--repeat", type=int, default=3)
    args = p.parse_args()

    rng = np.random.default_rng(0)
    B, C, D = args.batch, args.channels, args.d_state
    print(f"{'N':>6} {'chunk':>6} {'sequential':>11} {'chunked':>9} {'fused fwd+bwd':>14}")
    for n in args.tokens:
        a = T.Tensor(-rng.uniform(0.1, 3.0, size=(C, D)), requires_grad=True)
        b = T.Tensor(rng.normal(size=(B, n, D)), requires_grad=True)
        c = T.Tensor(rng.normal(size=(B, n, D)), requires_grad=True)
        delta = T.Tensor(rng.uniform(1e-3, 1.0, size=(B, n, C)), requires_grad=True)
        x = T.Tensor(rng.normal(size=(B, n, C)), requires_grad=True)
        chunk = default_chunk(n)
        with T.no_grad():
            disc = discretize(a, b, delta)
        disc.c = c
        t_seq = _time(lambda: scan_sequential(disc, x), args.repeat)
        t_chk = _time(lambda: scan_chunked(disc, x, chunk), args.repeat)

        def fwd_bwd():
            T.tsum(fused_scan(x, delta, a, b, c, chunk=chunk)).backward()

        t_fused = _time(fwd_bwd, args.repeat)
        print(f"{n:>6} {chunk:>6} {t_seq * 1e3:>9.1f}ms {t_chk * 1e3:>7.1f}ms {t_fused * 1e3:>12.1f}ms")


if __name__ == "__main__":
    main()
