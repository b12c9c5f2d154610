"""Compare the compiled kernels with the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--sizes 4096,262144,4194304] [--repeats 20]

Prints the median time per call for each kernel and backend, plus the speedup.
Both backends are checked to agree before timing.
"""

import argparse
import time

import numpy as np

from ensguard import _pykernels

try:
    from ensguard import _ckernels
except ImportError:
    _ckernels = None


def inputs(n, rng):
    a = rng.standard_normal(n).astype(np.float32)
    b = rng.standard_normal(n).astype(np.float32)
    wa, wb = a.view(np.uint32), b.view(np.uint32)
    return {
        "first_mismatch": (wa, wa.copy()),
        "relation_mismatch_bits": (wa, wb, wa + wb),
        "relation_mismatch_float": (a, b, (a + b).view(np.uint32)),
        "checksum": (wa, a),
        # one disagreeing copy per call, so majority_repair does real work
        "majority_repair": (wa.copy(), wa.copy(), wb.copy()),
    }


def median_ms(fn, args, repeats):
    ts = []
    for _ in range(repeats):
        call_args = tuple(x.copy() for x in args) if fn.__name__ == "majority_repair" else args
        t0 = time.perf_counter()
        fn(*call_args)
        ts.append(time.perf_counter() - t0)
    return 1e3 * float(np.median(ts))


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", default="4096,262144,4194304")
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    if _ckernels is None:
        raise SystemExit("compiled kernels not built; run `pip install -e . --no-build-isolation` first")
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<26}{'n':>10}{'cython ms':>12}{'python ms':>12}{'speedup':>9}")
    for n in (int(s) for s in args.sizes.split(",")):
        for name, a in inputs(n, rng).items():
            fc, fp = getattr(_ckernels, name), getattr(_pykernels, name)
            if name != "majority_repair":
                assert fc(*a) == fp(*a), name
            tc, tp = median_ms(fc, a, args.repeats), median_ms(fp, a, args.repeats)
            print(f"{name:<26}{n:>10}{tc:>12.4f}{tp:>12.4f}{tp / tc:>9.1f}")


if __name__ == "__main__":
    main()
