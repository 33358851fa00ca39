"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Also checks that both backends agree on every benchmark input.
"""
import argparse
import timeit

import numpy as np

from tsadv import _fallback

try:
    from tsadv import _ext
except ImportError:  # not built
    _ext = None


def cases(rng):
    x = rng.normal(size=(64, 32, 30))
    w, u, b = rng.normal(size=(30, 64)) * 0.1, rng.normal(size=(64, 64)) * 0.1, rng.normal(size=64) * 0.1
    h = _fallback.elman_forward(x, w, u, b)
    dh = rng.normal(size=h.shape)
    v = rng.normal(size=(512, 240))
    s = rng.normal(size=20_000)
    return {
        "elman_forward  (64x32x30 -> 64)": ("elman_forward", (x, w, u, b)),
        "elman_backward (64x32x30 -> 64)": ("elman_backward", (x, h, w, u, dh)),
        "project_l1_rows (512x240, r=1)": ("project_l1_rows", (v, 1.0)),
        "rolling_mean_std (20000, w=50)": ("rolling_mean_std", (s, 50)),
    }


def _close(a, b):
    if isinstance(a, tuple):
        return all(_close(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=1e-10, atol=1e-12)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    backends = {"numpy": _fallback}
    if _ext is not None:
        backends["compiled"] = _ext
    else:
        print("compiled extension not importable; timing the numpy fallback only")
    print(f"{'kernel':34s}" + "".join(f"{k:>12s}" for k in backends) + ("     speedup" if _ext else ""))
    for label, (name, argv) in cases(rng).items():
        times = {}
        for key, mod in backends.items():
            fn = getattr(mod, name)
            number = max(1, int(0.2 / max(timeit.timeit(lambda: fn(*argv), number=1), 1e-6)))
            best = min(timeit.repeat(lambda: fn(*argv), number=number, repeat=args.repeat)) / number
            times[key] = best
        line = f"{label:34s}" + "".join(f"{times[k] * 1e3:10.3f}ms" for k in backends)
        if _ext is not None:
            agree = _close(getattr(_fallback, name)(*argv), getattr(_ext, name)(*argv))
            line += f"  {times['numpy'] / times['compiled']:8.2f}x" + ("" if agree else "  MISMATCH")
        print(line)


if __name__ == "__main__":
    main()
