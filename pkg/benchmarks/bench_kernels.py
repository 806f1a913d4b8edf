"""Compiled vs numpy kernels, plus one full ViT train step on each backend.

    python3 benchmarks/bench_kernels.py [--repeat 20]
"""
import argparse
import timeit

import numpy as np

from proteus.autodiff import backward, kernels
from proteus.autodiff import ops
from proteus.vit import ViTConfig, init_params, vit_forward


def kernel_cases(rows, width, rng):
    x = rng.standard_normal((rows, width))
    g = rng.standard_normal((rows, width))
    w, b = rng.standard_normal(width), rng.standard_normal(width)

    def cases(k):
        y, xhat, rstd = k.layer_norm_forward(x, w, b, 1e-6)
        s = k.softmax_forward(x)
        lp = k.log_softmax_forward(x)
        flat, gflat = x.reshape(-1), g.reshape(-1)
        return {
            "gelu_fwd": lambda: k.gelu_forward(flat),
            "gelu_bwd": lambda: k.gelu_backward(flat, gflat),
            "layer_norm_fwd": lambda: k.layer_norm_forward(x, w, b, 1e-6),
            "layer_norm_bwd": lambda: k.layer_norm_backward(g, xhat, rstd, w),
            "softmax_fwd": lambda: k.softmax_forward(x),
            "softmax_bwd": lambda: k.softmax_backward(s, g),
            "log_softmax_fwd": lambda: k.log_softmax_forward(x),
            "log_softmax_bwd": lambda: k.log_softmax_backward(lp, g),
        }

    return cases


def vit_step(cfg, params, images):
    out = vit_forward(params, cfg, images)
    loss = ops.mean(ops.mul(out.patches, out.patches))
    backward(loss, params)


def best_ms(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e3


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--rows", type=int, default=16 * 17 * 2)
    ap.add_argument("--width", type=int, default=128)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    build = kernel_cases(args.rows, args.width, rng)
    backends = sorted(kernels.BACKENDS)
    if "compiled" not in backends:
        print("compiled extension not built; timing the numpy backend only")
    table = {name: build(kernels.BACKENDS[name]) for name in backends}

    print(f"kernels on ({args.rows}, {args.width}) float64, best of {args.repeat} [ms]")
    print(f"{'kernel':<18}" + "".join(f"{b:>12}" for b in backends) + ("   speedup" if len(backends) > 1 else ""))
    for case in table[backends[0]]:
        times = [best_ms(table[b][case], args.repeat) for b in backends]
        line = f"{case:<18}" + "".join(f"{t:>12.4f}" for t in times)
        if len(backends) > 1:
            line += f"{times[1] / times[0]:>10.2f}x"
        print(line)

    cfg = ViTConfig(dim=32, depth=2, heads=2)
    params = init_params(cfg, seed=0)
    images = rng.standard_normal((16, cfg.channels, cfg.image_size, cfg.image_size))
    print(f"\nViT forward+backward (dim {cfg.dim}, depth {cfg.depth}, batch 16), best of {args.repeat} [ms]")
    previous = kernels.backend_name()
    for b in backends:
        kernels.set_backend(b)
        print(f"{b:<18}{best_ms(lambda: vit_step(cfg, params, images), args.repeat):>12.3f}")
    kernels.set_backend(previous)


if __name__ == "__main__":
    main()
