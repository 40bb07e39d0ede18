"""Compare the numba and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Times conv forward/backward, max pooling and one training epoch of a small
genome on each backend and prints the median wall time per call.
"""

import argparse
import statistics
import time

import numpy as np

from wsevo import kernels
from wsevo.dataset import SynthConfig, generate_synthetic
from wsevo.genome import instantiate, vgg_genome
from wsevo.preprocess import DatasetStats, compute_dsm_sigma, prepare_samples
from wsevo.tensor import TrainConfig, train


def timeit(fn, repeat):
    fn()  # warm-up (triggers JIT compilation on the numba backend)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def cases():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((8, 16, 32, 32)).astype(np.float32)
    w = rng.standard_normal((16, 16, 3, 3)).astype(np.float32)
    b = np.zeros(16, np.float32)
    dy = rng.standard_normal((8, 16, 32, 32)).astype(np.float32)
    pooled, idx = kernels.maxpool2d_forward(x)

    samples = generate_synthetic(SynthConfig(n=32, tile_px=32), seed=0)
    data = prepare_samples(samples, DatasetStats(compute_dsm_sigma([s.dsm for s in samples])))
    model = instantiate(vgg_genome((8, 16), id=1), data.input_shape)
    cfg = TrainConfig(epochs=1, batch_size=8)

    return {
        "conv2d forward 8x16x32x32": lambda: kernels.conv2d_forward(x, w, b, 1, 1),
        "conv2d backward 8x16x32x32": lambda: kernels.conv2d_backward(x, w, dy, 1, 1),
        "maxpool forward": lambda: kernels.maxpool2d_forward(x),
        "maxpool backward": lambda: kernels.maxpool2d_backward(pooled, idx, x.shape),
        "train 1 epoch (32 tiles, vgg 8-16)": lambda: train(model, data, cfg),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not kernels.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")

    results = {}
    for name in kernels.BACKENDS:
        kernels.set_backend(name)
        results[name] = {case: timeit(fn, args.repeat) for case, fn in cases().items()}

    print(f"{'case':<38}{'numba (ms)':>12}{'numpy (ms)':>12}{'speed-up':>10}")
    for case in results["numba"]:
        a, b = results["numba"][case] * 1e3, results["numpy"][case] * 1e3
        print(f"{case:<38}{a:>12.2f}{b:>12.2f}{b / a:>9.1f}x")


if __name__ == "__main__":
    main()
