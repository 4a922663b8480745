"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--repeat 20]

Each kernel is warmed up once (so numba compilation is excluded) and then
timed with ``timeit``; the table reports the best per-call time.
"""

import argparse
import timeit

import numpy as np

from awpo import kernels


def _cases(rng):
    G, K, A = 50, 8, 6
    offsets = np.arange(0, G * A + 1, A, dtype=np.int64)
    theta = rng.normal(size=G * A)
    probs = np.exp(kernels.block_log_softmax_numpy(theta, offsets))
    r_out = rng.choice([0.0, 0.5, 1.0, 1.75, 2.0], size=(G, K))
    r_mix = r_out + rng.random((G, K))
    prompt_idx = np.repeat(np.arange(G, dtype=np.int64), K)
    actions = rng.integers(0, A, size=G * K).astype(np.int64)
    old_logp = kernels.block_log_softmax_numpy(theta, offsets)[offsets[prompt_idx] + actions] + rng.normal(0, 0.1, G * K)
    adv = rng.normal(size=G * K)
    uniforms = rng.random(G * K)
    thetas = rng.normal(size=(2000, G * A))
    values = rng.random(G * A)
    weights = np.full(G, 1.0 / G)
    d = 12
    small_off = np.array([0, 4, 8, 12], dtype=np.int64)
    block_of = np.repeat(np.arange(3, dtype=np.int64), 4)
    small_probs = np.full(d, 0.25)
    draws = rng.integers(0, d, size=(20000, 8)).astype(np.int64)
    small_adv = rng.normal(size=d)
    nan = float("nan")
    return {
        "group_advantages": (r_out, r_mix, 1e-6, 0.5, 2.0, 0.5, 1.5, 1.0, 2.0, 1e-6, nan, nan),
        "block_log_softmax": (theta, offsets),
        "clipped_surrogate": (theta, offsets, prompt_idx, actions, old_logp, adv, 0.2),
        "sample_blocks": (probs, offsets, prompt_idx, uniforms),
        "expected_values": (thetas, offsets, values, weights),
        "score_estimates": (draws, block_of, small_off, small_probs, small_adv),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    cases = _cases(np.random.default_rng(args.seed))
    print(f"{'kernel':<20}{'numpy (us)':>14}{'numba (us)':>14}{'speedup':>10}")
    for name, call_args in cases.items():
        times = {}
        for backend in ("numpy", "numba"):
            fn = getattr(kernels, f"{name}_{backend}")
            fn(*call_args)
            best = min(timeit.repeat(lambda: fn(*call_args), number=5, repeat=args.repeat)) / 5
            times[backend] = best * 1e6
        print(f"{name:<20}{times['numpy']:>14.1f}{times['numba']:>14.1f}{times['numpy'] / times['numba']:>9.1f}x")


if __name__ == "__main__":
    main()
