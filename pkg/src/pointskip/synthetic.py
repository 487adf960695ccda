"""Procedural shape meshes for sanity and desk-scale runs."""
from pathlib import Path
from typing import Sequence

import numpy as np

from .augment import rotation_y
from .dataset import Mesh, instance_name, write_off

SHAPES = ("sphere", "cube", "cylinder", "cone", "torus", "plate", "pyramid", "bowl",
          "table", "cross")


def _merge(meshes):
    verts, faces, off = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + off)
        off += len(m.vertices)
    return Mesh(np.concatenate(verts), np.concatenate(faces))


def box(size=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0)) -> Mesh:
    s = np.asarray(size) / 2.0
    v = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], float) * s
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    f = [(a, b, c) for a, b, c, d in quads] + [(a, c, d) for a, b, c, d in quads]
    return Mesh(v + np.asarray(center), np.array(f))


def _grid_surface(fn, nu, nv, wrap_u=True):
    """Triangulate a parametric surface sampled on a (nu x nv) grid."""
    us = np.linspace(0, 1, nu, endpoint=not wrap_u)
    vs = np.linspace(0, 1, nv)
    verts = np.array([fn(u, v) for u in us for v in vs])
    faces = []
    cols = nu if wrap_u else nu - 1
    for i in range(cols):
        i2 = (i + 1) % nu
        for j in range(nv - 1):
            a, b = i * nv + j, i2 * nv + j
            faces += [(a, b, b + 1), (a, b + 1, a + 1)]
    return Mesh(verts, np.array(faces))


def sphere(n=24, lat_range=(0.0, 1.0)) -> Mesh:
    lo, hi = lat_range

    def fn(u, v):
        th = 2 * np.pi * u
        ph = np.pi * (lo + (hi - lo) * v)
        return (np.sin(ph) * np.cos(th), np.cos(ph), np.sin(ph) * np.sin(th))

    return _grid_surface(fn, n, n // 2 + 1)


def cylinder(n=24) -> Mesh:
    side = _grid_surface(lambda u, v: (np.cos(2 * np.pi * u), 2 * v - 1, np.sin(2 * np.pi * u)),
                         n, 4)
    caps = [_disk(n, y) for y in (-1.0, 1.0)]
    return _merge([side] + caps)


def _disk(n, y, radius=1.0):
    th = 2 * np.pi * np.arange(n) / n
    v = np.concatenate([[[0.0, y, 0.0]], np.stack([radius * np.cos(th), np.full(n, y),
                                                   radius * np.sin(th)], 1)])
    f = [(0, 1 + i, 1 + (i + 1) % n) for i in range(n)]
    return Mesh(v, np.array(f))


def cone(n=24) -> Mesh:
    side = _grid_surface(lambda u, v: ((1 - v) * np.cos(2 * np.pi * u), 2 * v - 1,
                                       (1 - v) * np.sin(2 * np.pi * u)), n, 6)
    return _merge([side, _disk(n, -1.0)])


def torus(n=32, minor=0.3) -> Mesh:
    def fn(u, v):
        a, b = 2 * np.pi * u, 2 * np.pi * v
        r = 1 + minor * np.cos(b)
        return (r * np.cos(a), minor * np.sin(b), r * np.sin(a))

    return _grid_surface(fn, n, n // 2)


def pyramid() -> Mesh:
    v = np.array([[-1, -1, -1], [1, -1, -1], [1, -1, 1], [-1, -1, 1], [0, 1, 0]], float)
    f = np.array([(0, 1, 2), (0, 2, 3), (0, 4, 1), (1, 4, 2), (2, 4, 3), (3, 4, 0)])
    return Mesh(v, f)


def table() -> Mesh:
    parts = [box((2.0, 0.12, 1.4), (0, 0.6, 0))]
    for x in (-0.85, 0.85):
        for z in (-0.55, 0.55):
            parts.append(box((0.12, 1.2, 0.12), (x, 0.0, z)))
    return _merge(parts)


def cross() -> Mesh:
    return _merge([box((2.0, 0.3, 0.3)), box((0.3, 2.0, 0.3)), box((0.3, 0.3, 2.0))])


def make_shape(name: str, rng: np.random.Generator) -> Mesh:
    """One randomised instance: per-axis stretch and a random turn about y."""
    if name == "sphere":
        m = sphere()
    elif name == "cube":
        m = box((2.0, 2.0, 2.0))
    elif name == "cylinder":
        m = cylinder()
    elif name == "cone":
        m = cone()
    elif name == "torus":
        m = torus()
    elif name == "plate":
        m = box((2.0, 0.08, 2.0))
    elif name == "pyramid":
        m = pyramid()
    elif name == "bowl":
        m = sphere(lat_range=(0.5, 1.0))
    elif name == "table":
        m = table()
    elif name == "cross":
        m = cross()
    else:
        raise ValueError(f"unknown synthetic shape {name!r}")
    stretch = rng.uniform(0.85, 1.18, size=3)
    v = (m.vertices * stretch) @ rotation_y(rng.uniform(0, 2 * np.pi)).T
    return Mesh(v, m.faces)


def write_synthetic_dataset(root, classes: Sequence[str] = SHAPES, n_train: int = 8,
                            n_test: int = 0, seed: int = 0):
    """Write ``<root>/<class>/<split>/<class>_NNNN.off`` meshes."""
    root = Path(root)
    for ci, cls in enumerate(classes):
        rng = np.random.default_rng([seed, ci])
        for i in range(1, n_train + n_test + 1):
            split = "train" if i <= n_train else "test"
            d = root / cls / split
            d.mkdir(parents=True, exist_ok=True)
            write_off(make_shape(cls, rng), d / f"{instance_name(cls, i)}.off")
    return root
