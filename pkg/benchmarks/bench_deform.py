"""Compare the compiled and pure-torch deformable-convolution backends.

Usage::

    python3 benchmarks/bench_deform.py [--channels 16] [--size 64] [--repeat 5]

Reports median forward and forward+backward wall time per backend, the
speedup, and the max absolute difference between the two outputs.
"""

import argparse
import statistics
import time

import torch

from edpn import deform


def _time(fn, repeat):
    fn()  # warm-up
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return statistics.median(times)


def run(channels=16, size=64, batch=5, repeat=5, dtype=torch.float32, seed=0):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(batch, channels, size, size, generator=g, dtype=dtype)
    off = 2.0 * torch.randn(batch, 18, size, size, generator=g, dtype=dtype)
    w = 0.1 * torch.randn(channels, channels, 3, 3, generator=g, dtype=dtype)
    backends = ["torch"] + (["cython"] if deform.HAVE_EXTENSION else [])
    rows, outs = {}, {}
    for be in backends:
        def fwd():
            with torch.no_grad():
                return deform.deform_conv2d(x, off, w, padding=1, backend=be)

        def fwd_bwd():
            xs, os_, ws = (t.detach().requires_grad_() for t in (x, off, w))
            deform.deform_conv2d(xs, os_, ws, padding=1, backend=be).square().sum().backward()

        outs[be] = fwd()
        rows[be] = (_time(fwd, repeat), _time(fwd_bwd, repeat))
    return rows, outs


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--channels", type=int, default=16)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--batch", type=int, default=5)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    torch.set_num_threads(1)
    rows, outs = run(args.channels, args.size, args.batch, args.repeat)
    print(f"deform_conv2d B={args.batch} C={args.channels} {args.size}x{args.size}, 3x3, float32")
    print(f"{'backend':<8} {'fwd ms':>9} {'fwd+bwd ms':>11}")
    for be, (f, fb) in rows.items():
        print(f"{be:<8} {f * 1e3:9.2f} {fb * 1e3:11.2f}")
    if "cython" in rows:
        tf, tfb = rows["torch"]
        cf, cfb = rows["cython"]
        print(f"speedup  {tf / cf:9.2f}x {tfb / cfb:10.2f}x")
        print(f"max |cython - torch| = {(outs['cython'] - outs['torch']).abs().max().item():.3e}")
    else:
        print("compiled extension unavailable; only the fallback was timed")


if __name__ == "__main__":
    main()
