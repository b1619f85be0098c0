"""Compiled kernels vs the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Times the rasterizer forward and backward passes on a 64x64 view of the
reference toy scene and the range coder on 10^5 symbols, for each backend.
"""

import argparse
import time

import numpy as np

from splatcodec import _pykernels, coder, data, renderer

try:
    from splatcodec import _ckernels
except ImportError:
    _ckernels = None


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def raster_args():
    gaussians, ds = data.make_toy_scene()
    means, covs, opacity, colors = renderer.gaussians_to_arrays(gaussians)
    cam = ds.cameras[0]
    ps = renderer.project_splats(means, covs, opacity, colors, cam)
    args = tuple(np.ascontiguousarray(a, dtype=np.float64) for a in
                 (ps.mean2d, ps.conic, ps.opacity, ps.color, ps.radius))
    return args, cam.width, cam.height


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    repeat = ap.parse_args().repeat

    args, w, h = raster_args()
    bg = np.zeros(3)
    rng = np.random.default_rng(0)
    pmfs = rng.dirichlet(np.ones(64), size=100_000)
    cdf, starts = coder.ragged_cdf(pmfs.reshape(-1), np.full(len(pmfs), 64))
    symbols = np.array([rng.choice(64, p=p) for p in pmfs[:100_000]], dtype=np.int64)
    lens = np.full(len(symbols), 64, dtype=np.int64)

    backends = [("python", _pykernels)] + ([("cython", _ckernels)] if _ckernels else [])
    rows = {}
    for name, k in backends:
        img, final_t, n_contrib = k.rasterize_forward(*args, w, h, bg, True, 16, 1)
        grad = np.ones_like(img)

        def encode():
            enc = k.RangeEncoder()
            enc.encode_cdf(cdf, starts, symbols)
            return enc.finish()

        blob = encode()
        rows[name] = {
            "forward": best_of(lambda: k.rasterize_forward(*args, w, h, bg, True, 16, 1), repeat),
            "backward": best_of(lambda: k.rasterize_backward(*args, w, h, bg, final_t, n_contrib,
                                                             grad, 16, 1), repeat),
            "encode": best_of(encode, repeat),
            "decode": best_of(lambda: k.RangeDecoder(blob).decode_cdf(cdf, starts, lens), repeat),
        }

    print(f"{'kernel':<10}" + "".join(f"{n:>12}" for n in rows) + ("     speedup" if len(rows) > 1 else ""))
    for op in ("forward", "backward", "encode", "decode"):
        line = f"{op:<10}" + "".join(f"{rows[n][op] * 1e3:>10.2f}ms" for n in rows)
        if len(rows) > 1:
            line += f"{rows['python'][op] / rows['cython'][op]:>11.1f}x"
        print(line)


if __name__ == "__main__":
    main()
