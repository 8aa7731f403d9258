"""Time the numba kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20]

The first numba call (JIT compile or cache load) is excluded from timing.
"""

import argparse
import timeit

from vstar import kernels
from vstar.tensor_core import SeededRng


def cases(rng):
    q = rng.normal((256, 2, 48, 16))
    k = rng.normal((256, 2, 48, 16))
    v = rng.normal((256, 2, 48, 16))
    delta = kernels.numpy_impl.gaussian_toeplitz(48, 1.0)
    probs = kernels.numpy_impl.attention_probs(q, k, delta, True)
    feats = rng.normal((48, 768))
    a = kernels.numpy_impl.softmax_rows(rng.normal((64, 64)))
    m = rng.normal((512, 64))
    return {
        "softmax_rows 512x64": lambda impl: impl.softmax_rows(m),
        "gaussian_toeplitz 64": lambda impl: impl.gaussian_toeplitz(64, 1.0),
        "attention_probs S256 H2 N48": lambda impl: impl.attention_probs(q, k, delta, True),
        "attention_apply S256 H2 N48": lambda impl: impl.attention_apply(probs, v),
        "cosine_similarity 48x768": lambda impl: impl.cosine_similarity(feats),
        "band_profile 64": lambda impl: impl.band_profile(a),
        "band_energy 64": lambda impl: impl.band_energy(a, 2),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not kernels.NUMBA_AVAILABLE:
        raise SystemExit("numba is not installed; nothing to compare")
    print(f"{'kernel':32s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, fn in cases(SeededRng(0)).items():
        fn(kernels.numba_impl)  # warm-up / compile
        t_np = min(timeit.repeat(lambda: fn(kernels.numpy_impl), number=1, repeat=args.repeat))
        t_nb = min(timeit.repeat(lambda: fn(kernels.numba_impl), number=1, repeat=args.repeat))
        print(f"{name:32s} {t_np * 1e3:10.3f} {t_nb * 1e3:10.3f} {t_np / t_nb:8.2f}")


if __name__ == "__main__":
    main()
