"""Time the numba kernels against their pure-numpy fallbacks.

Run ``python3 benchmarks/bench_kernels.py [--repeat N] [--json OUT]``. Both
implementations are called directly, so the ``SE3NETS_BACKEND`` setting does
not matter here; results also report the maximum absolute difference between
the two outputs.
"""

import argparse
import json
import time

import numpy as np

from se3nets import kernels
from se3nets._accel import HAVE_NUMBA
from se3nets.scene import SceneSpec, _push_prims, generate_push_scene


def _best(fn, repeat):
    fn()  # warm-up (includes JIT compilation for numba)
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def cases(height=32, width=40):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(16, 8, height // 2, width // 2))
    w = rng.normal(size=(16, 8, 3, 3))
    gout = rng.normal(size=(16, 16, height // 4, width // 4))
    spec = SceneSpec(family="push", height=height, width=width)
    scene, _ = generate_push_scene(spec, np.random.default_rng(1))
    cam = scene.camera
    dirs = np.ascontiguousarray(cam.ray_directions().reshape(-1, 3) @ cam.rotation.T)
    origin = np.ascontiguousarray(cam.position)
    prims = np.ascontiguousarray(_push_prims(scene))
    depth = rng.uniform(0.6, 1.2, size=(height, width))
    valid = rng.uniform(size=(height, width)) > 0.1
    target = rng.normal(size=(height, width, 3))
    uni = rng.random((height, width))
    hh, ww = x.shape[2:]
    return {
        "conv2d_forward": (lambda: kernels.conv2d_forward_numba(x, w, 2, 1),
                           lambda: kernels.conv2d_forward_numpy(x, w, 2, 1)),
        "conv2d_backward_input": (lambda: kernels.conv2d_backward_input_numba(gout, w, hh, ww, 2, 1),
                                  lambda: kernels.conv2d_backward_input_numpy(gout, w, hh, ww, 2, 1)),
        "conv2d_backward_weight": (lambda: kernels.conv2d_backward_weight_numba(x, gout, 3, 3, 2, 1),
                                   lambda: kernels.conv2d_backward_weight_numpy(x, gout, 3, 3, 2, 1)),
        "raycast": (lambda: kernels.raycast_numba(origin, dirs, prims),
                    lambda: kernels.raycast_numpy(origin, dirs, prims)),
        "corrupt_associations_9x9": (
            lambda: kernels.corrupt_associations_numba(depth, valid, target, uni, 9, 0.1),
            lambda: kernels.corrupt_associations_numpy(depth, valid, target, uni, 9, 0.1)),
    }


def _max_diff(a, b):
    if isinstance(a, tuple):
        return max(_max_diff(p, q) for p, q in zip(a, b))
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    both = np.isfinite(a) & np.isfinite(b)
    if not np.array_equal(np.isfinite(a), np.isfinite(b)):
        return float("inf")
    return float(np.abs(a[both] - b[both]).max()) if both.any() else 0.0


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--json")
    args = p.parse_args(argv)
    if not HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    rows = []
    for name, (fast, slow) in cases().items():
        t_nb, t_np = _best(fast, args.repeat), _best(slow, args.repeat)
        rows.append({"kernel": name, "numba_ms": 1e3 * t_nb, "numpy_ms": 1e3 * t_np,
                     "speedup": t_np / t_nb, "max_abs_diff": _max_diff(fast(), slow())})
    print(f"{'kernel':<26}{'numba ms':>10}{'numpy ms':>10}{'numpy/numba':>13}{'max |diff|':>12}")
    for r in rows:
        print(f"{r['kernel']:<26}{r['numba_ms']:>10.3f}{r['numpy_ms']:>10.3f}{r['speedup']:>13.2f}"
              f"{r['max_abs_diff']:>12.2e}")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=2)
    return rows


if __name__ == "__main__":
    main()
