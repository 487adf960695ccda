"""Micro-benchmarks for the geometric kernels and the network forward pass."""
import time
from dataclasses import dataclass
from statistics import median
from typing import List, Sequence

import numpy as np

from . import kernels
from .geometry import normalize_unit_sphere
from .model import ModelConfig, forward, init_params, parameter_count, stage_forward
from .autograd import Tensor


@dataclass
class BenchRow:
    name: str
    path: str
    n: int
    median_s: float

    @property
    def points_per_s(self) -> float:
        return self.n / self.median_s if self.median_s > 0 else float("inf")


def timeit(fn, repeats=5):
    fn()  # warm-up / JIT
    times = []
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return median(times)


def random_cloud(n, seed=0):
    rng = np.random.default_rng(seed)
    return normalize_unit_sphere(rng.normal(size=(n, 3))).points


def bench_kernels(sizes: Sequence[int] = (1024, 2048, 4096, 8192), n_centers: int = 512,
                  radius: float = 0.2, k: int = 32, repeats: int = 3):
    """Time FPS and ball query on every available path.

    Returns the timing rows and whether every ball-query path agreed with the
    reference scan.
    """
    rows: List[BenchRow] = []
    agree = True
    fps_paths = [("numpy", kernels.fps_numpy)]
    bq_paths = [("numpy-scan", kernels.ball_query_numpy), ("grid", kernels.ball_query_grid)]
    if kernels.fps_numba is not None:
        fps_paths.insert(0, ("numba", kernels.fps_numba))
        bq_paths.insert(0, ("numba-scan", kernels.ball_query_numba))
    for n in sizes:
        pts = random_cloud(n, seed=n)
        m = min(n_centers, n)
        for name, fn in fps_paths:
            rows.append(BenchRow("fps", name, n, timeit(lambda: fn(pts, m, 0), repeats)))
        centers = pts[kernels.farthest_point_sample_kernel(pts, m, 0)]
        ref = None
        for name, fn in bq_paths:
            rows.append(BenchRow("ball_query", name, n,
                                 timeit(lambda: fn(pts, centers, radius, k), repeats)))
            idx, cnt = fn(pts, centers, radius, k)
            if ref is None:
                ref = (idx, cnt)
            elif not (np.array_equal(ref[0], idx) and np.array_equal(ref[1], cnt)):
                agree = False
    return rows, agree


def bench_model(cfg: ModelConfig, n_points: int = 1024, batch: int = 1, repeats: int = 3):
    params = init_params(cfg, 0)
    clouds = np.stack([random_cloud(n_points, seed=s) for s in range(batch)])
    st = cfg.stages[0]
    rng = np.random.default_rng(0)
    grouped = Tensor(rng.normal(size=(batch, st.n_out, st.group_size, 3 + cfg.in_features)))
    centers = Tensor(rng.normal(size=(batch, st.n_out, 3 + cfg.in_features)))
    rows = [
        BenchRow("stage_forward", "numpy", batch * st.n_out * st.group_size,
                 timeit(lambda: stage_forward(grouped, centers, st, params, 0, cfg.skip_mode),
                        repeats)),
        BenchRow("forward", "full", batch * n_points,
                 timeit(lambda: forward(clouds, cfg, params), repeats)),
    ]
    return rows, parameter_count(params)


def format_rows(rows: Sequence[BenchRow]) -> str:
    out = [f"{'kernel':<14}{'path':<12}{'N':>8}{'median ms':>12}{'points/s':>14}"]
    for r in rows:
        out.append(f"{r.name:<14}{r.path:<12}{r.n:>8}{r.median_s * 1e3:>12.3f}"
                   f"{r.points_per_s:>14.0f}")
    return "\n".join(out)
