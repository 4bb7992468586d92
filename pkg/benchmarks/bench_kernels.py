"""Time the compiled kernels against the numpy fallback on realistic inputs.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Inputs mirror the package's own call sites: one depth image from the
default camera, an A* query across a generated 8 m scene, and the im2col /
col2im pair of the proxy's first convolution on a batch of 32 16^3 grids.
"""

import argparse
import json
import math
import timeit

import numpy as np

from voxnav import kernels
from voxnav.voxgrid import CameraIntrinsics, _to_world
from voxnav.world import SceneParams, generate_scene


def cases():
    scene = generate_scene(SceneParams(), seed=3)
    occ = scene.world_grid.cells.view(np.uint8)
    cam = CameraIntrinsics()
    free = scene.free_cells
    sx, sy = (int(v) for v in free[0])
    origin = np.array([(sx + 0.5) * scene.cell_size, scene.limits.camera_height,
                       (sy + 0.5) * scene.cell_size])
    dirs = _to_world(cam.ray_dirs(), 0.7)
    lv = float(scene.world_grid.spec.l_v)
    dist = np.abs(free - free[0]).sum(axis=1)
    gx, gy = (int(v) for v in free[np.argmax(dist)])
    blocked = np.ascontiguousarray(scene.plan_map, dtype=np.uint8)

    xp = np.random.default_rng(0).random((32, 1, 18, 18, 18)).astype(np.float32)
    cols = np.random.default_rng(1).random((64, 32 * 8 ** 3)).astype(np.float32)
    return {
        f"raycast {cam.width}x{cam.height} rays":
            lambda k: k.raycast(occ, origin, dirs, lv, float(cam.max_range)),
        f"astar {blocked.shape[0]}x{blocked.shape[1]} map":
            lambda k: k.astar(blocked, sx, sy, gx, gy),
        "im2col 32x1x16^3, k4 s2": lambda k: k.im2col(xp, 4, 2, 8, 8, 8),
        "col2im 32x1x16^3, k4 s2": lambda k: k.col2im(cols, 32, 1, 18, 18, 18, 4, 2, 8, 8, 8),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5, help="timing repeats; the best is kept")
    ap.add_argument("--json", help="also write the results to this file")
    args = ap.parse_args(argv)
    backends = kernels.backends()
    if "cython" not in backends:
        print("compiled kernels not built; only the numpy fallback is timed")
    rows = []
    for name, fn in cases().items():
        row = {"kernel": name}
        for label, mod in backends.items():
            timer = timeit.Timer(lambda: fn(mod))
            number, _ = timer.autorange()
            row[label] = min(timer.repeat(args.repeat, number)) / number
        rows.append(row)
    print(f"{'kernel':34s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for r in rows:
        c = r.get("cython", math.nan)
        print(f"{r['kernel']:34s} {r['python'] * 1e3:10.3f} {c * 1e3:10.3f} "
              f"{r['python'] / c:8.1f}x")
    if args.json:
        with open(args.json, "w") as f:
            json.dump(rows, f, indent=1)
    return rows


if __name__ == "__main__":
    main()
