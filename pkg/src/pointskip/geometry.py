"""Point clouds, normalisation and the sample-and-group pipeline."""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels


class GeometryError(ValueError):
    """Invalid geometric input (empty cloud, bad counts, bad radius...)."""


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    features: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise GeometryError(f"points must be N x 3, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise GeometryError("point coordinates contain NaN or Inf")
        object.__setattr__(self, "points", pts)
        if self.features is not None:
            f = np.asarray(self.features, dtype=np.float64)
            if f.ndim != 2 or f.shape[0] != pts.shape[0]:
                raise GeometryError(
                    f"features must have {pts.shape[0]} rows, got shape {f.shape}")
            object.__setattr__(self, "features", f)

    @property
    def n(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class GroupedNeighborhood:
    centers: np.ndarray            # M x 3
    center_indices: np.ndarray     # M
    indices: np.ndarray            # M x k
    grouped_points: np.ndarray     # M x k x 3, offsets from the center
    grouped_features: Optional[np.ndarray]  # M x k x c
    radius: float
    valid_counts: np.ndarray       # M

    def rows(self) -> np.ndarray:
        """Per-neighbour input rows: relative xyz followed by gathered features."""
        if self.grouped_features is None:
            return self.grouped_points
        return np.concatenate([self.grouped_points, self.grouped_features], axis=-1)


def _as_points(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    return PointCloud(cloud).points


def normalize_unit_sphere(cloud):
    """Center on the centroid and scale so the farthest point has norm 1."""
    pc = cloud if isinstance(cloud, PointCloud) else PointCloud(cloud)
    if pc.n == 0:
        raise GeometryError("cannot normalise an empty cloud")
    pts = pc.points - pc.points.mean(axis=0)
    scale = np.sqrt((pts * pts).sum(axis=1)).max()
    if scale > 0:
        pts = pts / scale
    return PointCloud(pts, pc.features)


def lexicographic_min_index(points: np.ndarray) -> int:
    """Index of the point with the smallest (x, y, z); first one on exact ties."""
    order = np.lexsort((points[:, 2], points[:, 1], points[:, 0]))
    return int(order[0])


def farthest_point_sample(cloud, n_samples: int, start: int = 0) -> np.ndarray:
    pts = _as_points(cloud)
    n = pts.shape[0]
    if not 1 <= n_samples <= n:
        raise GeometryError(f"cannot sample {n_samples} points from a cloud of {n}")
    if not 0 <= start < n:
        raise GeometryError(f"start index {start} outside [0, {n})")
    return kernels.farthest_point_sample_kernel(pts, int(n_samples), int(start))


def gather_features(features: np.ndarray, indices: np.ndarray) -> np.ndarray:
    features = np.asarray(features)
    indices = np.asarray(indices)
    n = features.shape[0]
    if indices.size and (indices.min() < 0 or indices.max() >= n):
        bad = indices[(indices < 0) | (indices >= n)].ravel()[0]
        raise IndexError(f"feature index {bad} out of range for {n} rows")
    return features[indices]


def ball_query(cloud, centers, radius: float, k: int, method: str = "scan"):
    """Radius-bounded, k-capped neighbourhoods around each center.

    ``method`` is ``"scan"`` (the exhaustive reference) or ``"grid"``.
    """
    if not radius > 0:
        raise GeometryError(f"radius must be positive, got {radius}")
    if k < 1:
        raise GeometryError(f"group size must be >= 1, got {k}")
    pc = cloud if isinstance(cloud, PointCloud) else PointCloud(cloud)
    centers = np.ascontiguousarray(centers, dtype=np.float64).reshape(-1, 3)
    if method == "scan":
        idx, counts = kernels.ball_query_kernel(pc.points, centers, float(radius), int(k))
    elif method == "grid":
        idx, counts = kernels.ball_query_grid(pc.points, centers, float(radius), int(k))
    else:
        raise ValueError(f"unknown ball query method {method!r}")
    if np.any(counts == 0):
        j = int(np.flatnonzero(counts == 0)[0])
        raise GeometryError(f"center {j} has no neighbour within radius {radius}")
    offsets = pc.points[idx] - centers[:, None, :]
    feats = None if pc.features is None else gather_features(pc.features, idx)
    return GroupedNeighborhood(
        centers=centers,
        center_indices=np.full(len(centers), -1, dtype=np.int64),
        indices=idx,
        grouped_points=offsets,
        grouped_features=feats,
        radius=float(radius),
        valid_counts=counts,
    )


def sample_and_group(cloud, n_samples: int, radius: float, k: int, start: int = 0,
                     method: str = "scan") -> GroupedNeighborhood:
    pc = cloud if isinstance(cloud, PointCloud) else PointCloud(cloud)
    centers_idx = farthest_point_sample(pc, n_samples, start)
    g = ball_query(pc, pc.points[centers_idx], radius, k, method=method)
    return GroupedNeighborhood(
        centers=g.centers,
        center_indices=centers_idx,
        indices=g.indices,
        grouped_points=g.grouped_points,
        grouped_features=g.grouped_features,
        radius=g.radius,
        valid_counts=g.valid_counts,
    )
