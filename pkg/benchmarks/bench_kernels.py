"""Compare the compiled counting kernels against the pure-Python fallback.

Both lanes expose the same two functions; this script times them on
synthetic cohorts of configurable size and prints per-call latency plus
the speedup ratio. Run from the repository root:

    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --patients 2000 --codes 200
"""

from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from causaldx._kernels import _fallback

try:
    from causaldx._kernels import _core
except ImportError:
    _core = None


def synthetic_cohort(rng, patients, codes, max_visits, max_codes_per_visit):
    """Flattened visit structure in the layout the kernels consume."""
    flat_codes = []
    visit_ptr = [0]
    patient_ptr = [0]
    for _p in range(patients):
        for _v in range(rng.integers(1, max_visits + 1)):
            size = int(rng.integers(1, max_codes_per_visit + 1))
            visit = rng.choice(codes, size=min(size, codes), replace=False)
            flat_codes.extend(int(c) for c in visit)
            visit_ptr.append(len(flat_codes))
        patient_ptr.append(len(visit_ptr) - 1)
    return (
        np.asarray(flat_codes, dtype=np.int32),
        np.asarray(visit_ptr, dtype=np.int64),
        np.asarray(patient_ptr, dtype=np.int64),
    )


def time_call(fn, repeats):
    samples = []
    for _ in range(repeats):
        started = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - started)
    return min(samples), statistics.median(samples)


def check_agreement(args_transition, args_config):
    """The two lanes must agree bit for bit before timing means anything."""
    if _core is None:
        return
    num_a, den_a = _fallback.transition_counts(*args_transition)
    num_b, den_b = _core.transition_counts(*args_transition)
    assert np.array_equal(num_a, num_b) and np.array_equal(den_a, den_b)
    counts_a, ones_a = _fallback.node_config_counts(*args_config)
    counts_b, ones_b = _core.node_config_counts(*args_config)
    assert np.array_equal(counts_a, counts_b) and np.array_equal(ones_a, ones_b)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--patients", type=int, default=500)
    parser.add_argument("--codes", type=int, default=120)
    parser.add_argument("--max-visits", type=int, default=8)
    parser.add_argument("--codes-per-visit", type=int, default=6)
    parser.add_argument("--parents", type=int, default=4)
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    rng = np.random.default_rng(args.seed)
    codes, visit_ptr, patient_ptr = synthetic_cohort(
        rng, args.patients, args.codes, args.max_visits, args.codes_per_visit
    )
    ad = rng.integers(0, 2, size=(args.patients, args.codes)).astype(np.uint8)
    ad = np.ascontiguousarray(ad)
    parents = np.arange(1, 1 + args.parents, dtype=np.int32)

    transition_args = (codes, visit_ptr, patient_ptr, args.codes)
    config_args = (ad, 0, parents)
    check_agreement(transition_args, config_args)

    print(f"cohort: {args.patients} patients, {args.codes} codes, "
          f"{len(visit_ptr) - 1} visits, {len(codes)} code mentions")
    lanes = [("python", _fallback)]
    if _core is not None:
        lanes.append(("cython", _core))
    else:
        print("compiled lane unavailable; timing the fallback only")

    results = {}
    for name, module in lanes:
        best_t, median_t = time_call(
            lambda m=module: m.transition_counts(*transition_args), args.repeats
        )
        best_c, median_c = time_call(
            lambda m=module: m.node_config_counts(*config_args), args.repeats
        )
        results[name] = (best_t, best_c)
        print(f"{name:>7}  transition_counts  best {best_t * 1e3:8.3f} ms  "
              f"median {median_t * 1e3:8.3f} ms")
        print(f"{name:>7}  node_config_counts best {best_c * 1e6:8.1f} us  "
              f"median {median_c * 1e6:8.1f} us")

    if len(results) == 2:
        py_t, py_c = results["python"]
        cy_t, cy_c = results["cython"]
        print(f"speedup  transition_counts  {py_t / cy_t:6.1f}x")
        print(f"speedup  node_config_counts {py_c / cy_c:6.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
