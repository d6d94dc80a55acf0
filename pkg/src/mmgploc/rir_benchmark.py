"""Benchmark the compiled image-source kernel against the NumPy fallback.

Both backends walk the image lattice in the same order, so their outputs
are required to be bit-identical; the benchmark reports the speed ratio
on a set of representative room configurations.

Run as ``python -m mmgploc.rir_benchmark``.
"""

from __future__ import annotations

import time

import numpy as np

from . import _imagesource_np
from .acoustic_sim import SceneConfig, simulate_rir

try:
    from . import _imagesource
except ImportError:
    _imagesource = None

_CASES = [
    ("small anechoic", dict(room_dims=(4.0, 5.0, 3.0), t60=0.0)),
    ("desk T60=0.3", dict(room_dims=(4.0, 5.0, 3.0), t60=0.3)),
    ("desk T60=0.4", dict(room_dims=(4.0, 5.0, 3.0), t60=0.4)),
    ("hall T60=0.5", dict(room_dims=(6.0, 8.0, 3.5), t60=0.5)),
]


def _scene(room_dims, t60):
    return SceneConfig(room_dims=room_dims,
                       mic_positions=[[[0.8, 0.9, 1.2], [0.8, 1.1, 1.2]]],
                       t60=t60, snr_db=float("inf"), sample_rate=16000.0)


def _time_backend(scene, source, mic, module, repeats=3) -> tuple[float, np.ndarray]:
    best = float("inf")
    rir = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        rir = simulate_rir(scene, source, mic, backend=module)
        best = min(best, time.perf_counter() - t0)
    return best, rir


def run_benchmark(repeats: int = 3) -> list[dict]:
    """Time each case on both backends; verify bit-identical impulse responses."""
    source, mic = [2.0, 2.5, 1.5], [0.8, 0.9, 1.2]
    results = []
    for name, kw in _CASES:
        scene = _scene(**kw)
        t_np, rir_np = _time_backend(scene, source, mic, _imagesource_np, repeats)
        row = {"case": name, "numpy_s": t_np, "samples": rir_np.size}
        if _imagesource is not None:
            t_cy, rir_cy = _time_backend(scene, source, mic, _imagesource, repeats)
            if not np.array_equal(rir_cy, rir_np):
                raise AssertionError(f"{name}: backends disagree")
            row["compiled_s"] = t_cy
            row["speedup"] = t_np / t_cy if t_cy > 0 else float("inf")
        results.append(row)
    return results


def main() -> int:
    if _imagesource is None:
        print("compiled extension not available; timing the NumPy fallback only")
    rows = run_benchmark()
    header = f"{'case':<16} {'rir len':>8} {'numpy':>10} {'compiled':>10} {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for row in rows:
        compiled = f"{row['compiled_s']*1e3:8.2f}ms" if "compiled_s" in row else "       —"
        speedup = f"{row['speedup']:7.1f}x" if "speedup" in row else "       —"
        print(f"{row['case']:<16} {row['samples']:>8} {row['numpy_s']*1e3:8.2f}ms "
              f"{compiled} {speedup}")
    if "compiled_s" in rows[0]:
        print("\noutputs bit-identical on all cases")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
