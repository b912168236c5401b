"""Time the compiled pooling kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Shapes match one default training step: two 48x48 images (12x12 feature
map, 32 channels) and 1152 ROIs pooled onto a 4x4 grid.
"""
import argparse
import timeit

import numpy as np

from aod import kernels
from aod.backbone import STRIDE, roi_bins


def workload(seed=0, n_rois=1152, dtype=np.float32):
    rng = np.random.default_rng(seed)
    feats = rng.random((2, 32, 12, 12)).astype(dtype)
    cx, cy = rng.uniform(10, 38, (2, n_rois))
    w, h = rng.uniform(12, 30, (2, n_rois))
    rois = roi_bins(np.stack([cx, cy, w, h], axis=1), STRIDE, 12, 12)
    bidx = rng.integers(0, 2, n_rois).astype(np.int64)
    pool_in = rng.random((2, 16, 48, 48)).astype(dtype)
    return feats, bidx, rois, pool_in


def bench(mod, args, repeat):
    feats, bidx, rois, pool_in = args
    out, arg = mod.roi_pool_forward(feats, bidx, rois, 4, 4)
    g = np.ones_like(out)
    mp, mp_arg = mod.maxpool2d_forward(pool_in, 2)
    mg = np.ones_like(mp)
    cases = {
        "roi_pool_forward": lambda: mod.roi_pool_forward(feats, bidx, rois, 4, 4),
        "roi_pool_backward": lambda: mod.roi_pool_backward(g, bidx, arg, 2, 32, 12, 12),
        "maxpool2d_forward": lambda: mod.maxpool2d_forward(pool_in, 2),
        "maxpool2d_backward": lambda: mod.maxpool2d_backward(mg, mp_arg, 48, 48),
    }
    return {k: min(timeit.repeat(f, number=1, repeat=repeat)) * 1e3 for k, f in cases.items()}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    work = workload()
    found = kernels.backends()
    results = {name: bench(mod, work, args.repeat) for name, mod in found.items()}
    print(f"{'kernel':<20}" + "".join(f"{n + ' ms':>14}" for n in results) + ("   speedup" if len(results) > 1 else ""))
    for k in results["python"]:
        row = f"{k:<20}" + "".join(f"{results[n][k]:>14.3f}" for n in results)
        if "cython" in results:
            row += f"{results['python'][k] / results['cython'][k]:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
