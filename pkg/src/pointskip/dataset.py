"""Mesh ingestion, point-set caching, batching and the ModelNet-R refinement engine."""
import csv
import io
import os
import struct
import zlib
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .augment import AugmentConfig, augment, sample_rng
from .geometry import PointCloud, normalize_unit_sphere

SPLITS = ("train", "test")


class OffParseError(ValueError):
    def __init__(self, line, msg):
        super().__init__(f"line {line}: {msg}")
        self.line = line


class DegenerateMeshError(ValueError):
    pass


class ManifestError(ValueError):
    pass


class IngestionError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# OFF meshes


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray   # V x 3
    faces: np.ndarray      # F x 3 triangles

    @property
    def n_vertices(self):
        return self.vertices.shape[0]


def _content_lines(text):
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield no, line


def _ints(tokens, no):
    try:
        return [int(t) for t in tokens]
    except ValueError:
        raise OffParseError(no, f"expected integers, got {' '.join(tokens)!r}") from None


def parse_off(data) -> Mesh:
    """Parse an ASCII OFF mesh; polygons are fan-triangulated.

    Accepts the ModelNet quirk where the counts are fused onto the header
    (``OFF490 518 0``).
    """
    if isinstance(data, (bytes, bytearray)):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError:
            raise OffParseError(1, "file is not valid UTF-8/ASCII text") from None
    lines = _content_lines(data)
    try:
        no, head = next(lines)
    except StopIteration:
        raise OffParseError(1, "empty file, missing OFF header") from None
    if not head.startswith("OFF"):
        raise OffParseError(no, f"missing OFF header, got {head[:20]!r}")
    rest = head[3:].strip()
    if not rest:
        try:
            no, rest = next(lines)
        except StopIteration:
            raise OffParseError(no, "missing vertex/face/edge counts") from None
    counts = rest.split()
    if len(counts) != 3:
        raise OffParseError(no, f"expected 'V F E' counts, got {rest!r}")
    nv, nf, _ = _ints(counts, no)
    if nv < 0 or nf < 0:
        raise OffParseError(no, "negative element counts")

    verts = np.empty((nv, 3))
    for i in range(nv):
        try:
            no, line = next(lines)
        except StopIteration:
            raise OffParseError(no, f"expected {nv} vertices, found {i}") from None
        toks = line.split()
        if len(toks) != 3:
            raise OffParseError(no, f"vertex needs 3 coordinates, got {len(toks)}")
        try:
            verts[i] = [float(t) for t in toks]
        except ValueError:
            raise OffParseError(no, f"non-numeric vertex {line!r}") from None
        if not np.all(np.isfinite(verts[i])):
            raise OffParseError(no, "non-finite vertex coordinate")

    tris = []
    for i in range(nf):
        try:
            no, line = next(lines)
        except StopIteration:
            raise OffParseError(no, f"expected {nf} faces, found {i}") from None
        vals = _ints(line.split(), no)
        n = vals[0]
        if n < 3 or len(vals) != n + 1:
            raise OffParseError(no, f"malformed face {line!r}")
        idx = vals[1:]
        if min(idx) < 0 or max(idx) >= nv:
            raise OffParseError(no, f"face index out of range [0, {nv})")
        for t in range(1, n - 1):
            tris.append((idx[0], idx[t], idx[t + 1]))

    for no, line in lines:
        raise OffParseError(no, f"unexpected trailing content {line[:30]!r}")
    faces = np.array(tris, dtype=np.int64).reshape(-1, 3)
    return Mesh(verts, faces)


def serialize_off(mesh: Mesh) -> str:
    out = io.StringIO()
    out.write(f"OFF\n{mesh.n_vertices} {len(mesh.faces)} 0\n")
    for x, y, z in mesh.vertices:
        out.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")
    for a, b, c in mesh.faces:
        out.write(f"3 {a} {b} {c}\n")
    return out.getvalue()


def read_off(path) -> Mesh:
    with open(path, "rb") as fh:
        return parse_off(fh.read())


def write_off(mesh: Mesh, path):
    Path(path).write_text(serialize_off(mesh))


def triangle_areas(mesh: Mesh) -> np.ndarray:
    v = mesh.vertices[mesh.faces]
    cr = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    return 0.5 * np.sqrt((cr * cr).sum(axis=1))


def sample_mesh(mesh: Mesh, n: int, seed: int = 0) -> PointCloud:
    """Area-weighted uniform surface samples."""
    areas = triangle_areas(mesh) if len(mesh.faces) else np.zeros(0)
    total = areas.sum()
    if not total > 0:
        raise DegenerateMeshError("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    v = mesh.vertices[mesh.faces[tri]]
    pts = ((1 - r1)[:, None] * v[:, 0] + (r1 * (1 - r2))[:, None] * v[:, 1]
           + (r1 * r2)[:, None] * v[:, 2])
    return PointCloud(pts)


def covariance_eigenvalues(cloud) -> np.ndarray:
    """Eigenvalues of the centered covariance, largest first."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    x = pts - pts.mean(axis=0)
    return np.linalg.eigvalsh(x.T @ x / len(x))[::-1]


def detect_flat(cloud, tau: float = 1e-4) -> bool:
    """True when the cloud is (nearly) planar: smallest/largest eigenvalue < tau."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 4:
        raise ValueError(f"flatness test needs at least 4 points, got {pts.shape[0]}")
    lam = covariance_eigenvalues(pts)
    if lam[0] <= 0:
        return True
    return bool(max(lam[2], 0.0) / lam[0] < tau)


# ---------------------------------------------------------------------------
# cached point sets ("PSPC" little-endian binary)

_PSPC_MAGIC = b"PSPC"
_PSPC_VERSION = 1


def write_points(path, points: np.ndarray):
    pts = np.ascontiguousarray(points, dtype="<f8").reshape(-1, 3)
    with open(path, "wb") as fh:
        fh.write(_PSPC_MAGIC + struct.pack("<IQ", _PSPC_VERSION, len(pts)))
        fh.write(pts.tobytes())


def read_points(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != _PSPC_MAGIC:
        raise IngestionError(f"{path}: not a PSPC point file")
    if len(raw) < 16:
        raise IngestionError(f"{path}: truncated header")
    version, n = struct.unpack_from("<IQ", raw, 4)
    if version != _PSPC_VERSION:
        raise IngestionError(f"{path}: unsupported PSPC version {version}")
    if len(raw) != 16 + 24 * n:
        raise IngestionError(f"{path}: expected {n} points, file size mismatch")
    return np.frombuffer(raw, dtype="<f8", offset=16).reshape(n, 3).astype(np.float64)


def load_cloud_file(path, n_points: int, seed: int = 0) -> np.ndarray:
    """Read an OFF mesh or point file and return exactly ``n_points`` points."""
    path = Path(path)
    suffix = path.suffix.lower()
    try:
        if suffix == ".off":
            return sample_mesh(read_off(path), n_points, seed).points
        if suffix == ".pspc":
            pts = read_points(path)
        elif suffix == ".npy":
            pts = np.load(path).astype(np.float64)[:, :3]
        else:
            pts = np.loadtxt(path, delimiter=None, ndmin=2, comments="#",
                             converters=None)[:, :3]
    except (OSError, ValueError, IndexError) as e:
        raise IngestionError(f"cannot read {path}: {e}") from e
    if len(pts) == 0:
        raise IngestionError(f"{path}: no points")
    rng = np.random.default_rng(seed)
    if len(pts) > n_points:
        pts = pts[np.sort(rng.choice(len(pts), n_points, replace=False))]
    elif len(pts) < n_points:
        pts = np.concatenate([pts, pts[rng.choice(len(pts), n_points - len(pts))]])
    return np.ascontiguousarray(pts)


# ---------------------------------------------------------------------------
# dataset index


@dataclass(frozen=True)
class Entry:
    cls: str
    instance: str
    split: str
    path: str


@dataclass
class DatasetIndex:
    entries: List[Entry]
    classes: List[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.classes:
            self.classes = sorted({e.cls for e in self.entries})
        seen = set()
        for e in self.entries:
            key = (e.cls, e.instance, e.split)
            if key in seen:
                raise ValueError(f"duplicate index entry {key}")
            seen.add(key)

    def split(self, split: str) -> List[Entry]:
        return [e for e in self.entries if e.split == split]

    def label(self, cls: str) -> int:
        return self.classes.index(cls)

    def counts(self) -> "OrderedDict[str, int]":
        out = OrderedDict((c, 0) for c in self.classes)
        for e in self.entries:
            out[e.cls] = out.get(e.cls, 0) + 1
        return out

    def subset(self, classes: Sequence[str], max_per_split: Optional[Dict[str, int]] = None):
        keep = []
        taken: Dict[Tuple[str, str], int] = {}
        for e in self.entries:
            if e.cls not in classes:
                continue
            key = (e.cls, e.split)
            if max_per_split and taken.get(key, 0) >= max_per_split.get(e.split, 1 << 60):
                continue
            taken[key] = taken.get(key, 0) + 1
            keep.append(e)
        return DatasetIndex(keep, [c for c in self.classes if c in classes])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", "instance", "split", "path"])
            for e in self.entries:
                w.writerow([e.cls, e.instance, e.split, e.path])


def index_from_csv(path) -> DatasetIndex:
    base = Path(path).parent
    entries = []
    with open(path, newline="") as fh:
        rows = csv.DictReader(fh)
        if rows.fieldnames is None or set(rows.fieldnames) < {"class", "instance", "split", "path"}:
            raise ValueError(f"{path}: index header must be class,instance,split,path")
        for row in rows:
            p = row["path"]
            if p and not os.path.isabs(p):
                p = str(base / p)
            entries.append(Entry(row["class"], row["instance"], row["split"], p))
    return DatasetIndex(entries)


def index_from_root(root) -> DatasetIndex:
    """Scan ``<root>/<class>/<split>/<instance>.<ext>``."""
    root = Path(root)
    entries = []
    for cdir in sorted(p for p in root.iterdir() if p.is_dir()):
        for split in SPLITS:
            sdir = cdir / split
            if not sdir.is_dir():
                continue
            for f in sorted(sdir.iterdir()):
                if f.suffix.lower() in (".off", ".pspc", ".txt", ".xyz", ".npy"):
                    entries.append(Entry(cdir.name, f.stem, split, str(f)))
    return DatasetIndex(entries, sorted(p.name for p in root.iterdir() if p.is_dir()))


def load_index(path) -> DatasetIndex:
    path = Path(path)
    if path.is_dir():
        return index_from_root(path)
    return index_from_csv(path)


# ---------------------------------------------------------------------------
# refinement manifest


@dataclass(frozen=True)
class ManifestRecord:
    cls: str
    instance: str
    action: str
    target: str = ""


@dataclass
class RefinementManifest:
    records: List[ManifestRecord]

    def __post_init__(self):
        seen = set()
        for r in self.records:
            if r.action not in ("move", "remove"):
                raise ManifestError(f"{r.instance}: unknown action {r.action!r}")
            if r.action == "move" and (not r.target or r.target == r.cls):
                raise ManifestError(f"{r.instance}: move needs a target different from {r.cls}")
            if r.action == "remove" and r.target:
                raise ManifestError(f"{r.instance}: remove must not name a target")
            if (r.cls, r.instance) in seen:
                raise ManifestError(f"{r.instance}: listed twice")
            seen.add((r.cls, r.instance))

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", "instance", "action", "target"])
            for r in self.records:
                w.writerow([r.cls, r.instance, r.action, r.target])


def read_manifest(path) -> RefinementManifest:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != ["class", "instance", "action", "target"]:
        raise ManifestError(f"{path}: header must be class,instance,action,target")
    recs = []
    for no, row in enumerate(rows[1:], 2):
        if not row:
            continue
        if len(row) != 4:
            raise ManifestError(f"{path}:{no}: expected 4 fields, got {len(row)}")
        recs.append(ManifestRecord(*(c.strip() for c in row)))
    return RefinementManifest(recs)


@dataclass
class AuditReport:
    """Per-source-class breakdown of where instances went."""
    classes: List[str]                      # affected classes, table column order
    transfers: Dict[str, Dict[str, int]]    # source -> {destination | "removed": count}
    original: Dict[str, int]                # source -> count before refinement
    final_counts: "OrderedDict[str, int]"   # every class after refinement

    @property
    def sources(self):
        return list(self.transfers)

    @property
    def removed(self) -> int:
        return sum(t.get("removed", 0) for t in self.transfers.values())

    @property
    def touched_total(self) -> int:
        return sum(self.original.values())

    def column_totals(self) -> Dict[str, int]:
        tot = {c: 0 for c in self.classes + ["removed"]}
        for t in self.transfers.values():
            for dst, n in t.items():
                tot[dst] += n
        return tot

    def table(self) -> List[List]:
        header = ["class"] + self.classes + ["removed", "total"]
        rows = [header]
        for src in self.sources:
            t = self.transfers[src]
            rows.append([src] + [t.get(c, 0) for c in self.classes]
                        + [t.get("removed", 0), self.original[src]])
        tot = self.column_totals()
        rows.append(["total"] + [tot[c] for c in self.classes]
                    + [tot["removed"], self.touched_total])
        return rows

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(self.table())

    def write_counts_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", "count"])
            for c, n in self.final_counts.items():
                w.writerow([c, n])

    def format(self) -> str:
        rows = [[str(x) for x in r] for r in self.table()]
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        return "\n".join("  ".join(x.rjust(w) for x, w in zip(r, widths)) for r in rows)


def apply_manifest(index: DatasetIndex, manifest: RefinementManifest):
    """Apply move/remove records; returns the refined index and an audit."""
    by_key: Dict[Tuple[str, str], List[int]] = {}
    for i, e in enumerate(index.entries):
        by_key.setdefault((e.cls, e.instance), []).append(i)
    action: Dict[int, ManifestRecord] = {}
    for r in manifest.records:
        hits = by_key.get((r.cls, r.instance))
        if not hits:
            raise ManifestError(f"instance {r.instance!r} of class {r.cls!r} not in index")
        if r.action == "move" and r.target not in index.classes:
            raise ManifestError(f"{r.instance}: target class {r.target!r} not in index")
        for i in hits:
            action[i] = r

    sources = list(OrderedDict.fromkeys(r.cls for r in manifest.records))
    targets = [r.target for r in manifest.records if r.action == "move"]
    affected = list(OrderedDict.fromkeys(sources + targets))
    before = index.counts()
    transfers = OrderedDict((s, OrderedDict()) for s in sources)

    kept = []
    for i, e in enumerate(index.entries):
        r = action.get(i)
        if e.cls in transfers:
            dst = e.cls if r is None else ("removed" if r.action == "remove" else r.target)
            transfers[e.cls][dst] = transfers[e.cls].get(dst, 0) + 1
        if r is None:
            kept.append(e)
        elif r.action == "move":
            kept.append(Entry(r.target, e.instance, e.split, e.path))
    refined = DatasetIndex(kept, list(index.classes))
    report = AuditReport(
        classes=affected,
        transfers=transfers,
        original={s: before[s] for s in sources},
        final_counts=refined.counts(),
    )
    return refined, report


# ---------------------------------------------------------------------------
# statistics


@dataclass(frozen=True)
class DatasetStats:
    n_classes: int
    n_instances: int
    min_count: int
    max_count: int
    mean_count: float
    per_class: Dict[str, int]


def dataset_stats(index: DatasetIndex) -> DatasetStats:
    counts = {c: n for c, n in index.counts().items() if n > 0}
    if not counts:
        return DatasetStats(0, 0, 0, 0, 0.0, {})
    vals = list(counts.values())
    return DatasetStats(len(vals), sum(vals), min(vals), max(vals),
                        sum(vals) / len(vals), counts)


# ---------------------------------------------------------------------------
# point store and batching


def _instance_seed(seed: int, e: Entry) -> int:
    return (zlib.crc32(f"{e.cls}/{e.instance}".encode()) ^ (seed * 0x9E3779B1)) & 0xFFFFFFFF


class PointStore:
    """Per-instance cache of sampled point sets, optionally mirrored to disk."""

    def __init__(self, n_points: int, seed: int = 0, cache_dir=None):
        self.n_points = n_points
        self.seed = seed
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self._mem: Dict[Tuple[str, str, str], np.ndarray] = {}

    def _disk_path(self, e: Entry):
        name = f"{e.cls}__{e.split}__{e.instance}__{self.n_points}__{self.seed}.pspc"
        return self.cache_dir / name

    def _load(self, e: Entry) -> np.ndarray:
        if self.cache_dir is not None:
            p = self._disk_path(e)
            if p.exists():
                return read_points(p)
        if not e.path or not os.path.exists(e.path):
            raise IngestionError(f"cannot read source file {e.path!r} for {e.instance}")
        try:
            pts = load_cloud_file(e.path, self.n_points, _instance_seed(self.seed, e))
        except (OffParseError, DegenerateMeshError) as err:
            raise IngestionError(f"cannot read {e.path}: {err}") from err
        if self.cache_dir is not None:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
            write_points(self._disk_path(e), pts)
        return pts

    def get(self, e: Entry) -> np.ndarray:
        key = (e.cls, e.split, e.instance)
        pts = self._mem.get(key)
        if pts is None:
            pts = self._mem[key] = self._load(e)
        return pts

    def warm(self, entries: Sequence[Entry], workers: int = 1):
        """Fill the cache; results are stored in entry order."""
        todo = [e for e in entries if (e.cls, e.split, e.instance) not in self._mem]
        if workers <= 1:
            for e in todo:
                self.get(e)
            return
        with ThreadPoolExecutor(workers) as ex:
            for e, pts in zip(todo, ex.map(self._load, todo)):
                self._mem[(e.cls, e.split, e.instance)] = pts


def load_batches(index: DatasetIndex, split: str, batch_size: int = 32, n_points: int = 1024,
                 seed: int = 0, augment_cfg: Optional[AugmentConfig] = None, epoch: int = 0,
                 store: Optional[PointStore] = None, shuffle: Optional[bool] = None
                 ) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Yield ``(points [B, n, 3], labels [B])``; the last batch may be short."""
    entries = index.split(split)
    if not entries:
        raise ValueError(f"split {split!r} is empty")
    if store is None:
        store = PointStore(n_points, seed)
    if shuffle is None:
        shuffle = split == "train"
    order = np.arange(len(entries))
    if shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(len(entries))
    aug = augment_cfg if split == "train" and augment_cfg is not None else None
    for s in range(0, len(order), batch_size):
        sel = order[s:s + batch_size]
        pts = np.empty((len(sel), store.n_points, 3))
        labels = np.empty(len(sel), dtype=np.int64)
        for b, i in enumerate(sel):
            e = entries[i]
            pc = normalize_unit_sphere(store.get(e))
            if aug is not None and aug.mode != "none":
                pc = augment(pc, aug, sample_rng(aug.seed, epoch * len(entries) + int(i)))
            pts[b] = pc.points
            labels[b] = index.label(e.cls)
        yield pts, labels


# ---------------------------------------------------------------------------
# ModelNet reference data

# (train, test) instance counts of the 40 ModelNet40 categories
MODELNET40_COUNTS = OrderedDict([
    ("airplane", (626, 100)), ("bathtub", (106, 50)), ("bed", (515, 100)),
    ("bench", (173, 20)), ("bookshelf", (572, 100)), ("bottle", (335, 100)),
    ("bowl", (64, 20)), ("car", (197, 100)), ("chair", (889, 100)),
    ("cone", (167, 20)), ("cup", (79, 20)), ("curtain", (138, 20)),
    ("desk", (200, 86)), ("door", (109, 20)), ("dresser", (200, 86)),
    ("flower_pot", (149, 20)), ("glass_box", (171, 100)), ("guitar", (155, 100)),
    ("keyboard", (145, 20)), ("lamp", (124, 20)), ("laptop", (149, 20)),
    ("mantel", (284, 100)), ("monitor", (465, 100)), ("night_stand", (200, 86)),
    ("person", (88, 20)), ("piano", (231, 100)), ("plant", (240, 100)),
    ("radio", (104, 20)), ("range_hood", (115, 100)), ("sink", (128, 20)),
    ("sofa", (680, 100)), ("stairs", (124, 20)), ("stool", (90, 20)),
    ("table", (392, 100)), ("tent", (163, 20)), ("toilet", (344, 100)),
    ("tv_stand", (267, 100)), ("vase", (475, 100)), ("wardrobe", (87, 20)),
    ("xbox", (103, 20)),
])

# source class -> destination -> count for the ModelNet-R refinement
REFINEMENT_TABLE = OrderedDict([
    ("flower_pot", OrderedDict([("flower_pot", 91), ("vase", 72), ("bowl", 5), ("removed", 1)])),
    ("plant", OrderedDict([("flower_pot", 171), ("plant", 152), ("removed", 16)])),
    ("vase", OrderedDict([("vase", 571), ("bowl", 2), ("removed", 2)])),
    ("cup", OrderedDict([("vase", 55), ("cup", 43), ("bowl", 1)])),
    ("bowl", OrderedDict([("vase", 24), ("bowl", 60)])),
])


def instance_name(cls: str, i: int) -> str:
    return f"{cls}_{i:04d}"


def synthetic_index(counts, suffix=".off") -> DatasetIndex:
    """Placeholder index with the given per-class counts.

    ``counts`` maps class -> total or class -> (train, test).  Instances are
    numbered from 1, train first.  Paths are nominal and need not exist.
    """
    entries = []
    for cls, n in counts.items():
        tr, te = (n, 0) if isinstance(n, int) else n
        for i in range(1, tr + te + 1):
            split = "train" if i <= tr else "test"
            name = instance_name(cls, i)
            entries.append(Entry(cls, name, split, f"{cls}/{split}/{name}{suffix}"))
    return DatasetIndex(entries, sorted(counts))


def reference_manifest() -> RefinementManifest:
    """Instance-level manifest reproducing the ModelNet-R aggregate counts.

    Instance membership is not public; moved and removed instances are drawn
    from the start of each class's numbering, in table column order.
    """
    recs = []
    for src, dests in REFINEMENT_TABLE.items():
        i = 1
        for dst, n in dests.items():
            if dst == src:
                continue
            for _ in range(n):
                name = instance_name(src, i)
                if dst == "removed":
                    recs.append(ManifestRecord(src, name, "remove", ""))
                else:
                    recs.append(ManifestRecord(src, name, "move", dst))
                i += 1
    return RefinementManifest(recs)


def shipped_manifest_path() -> Path:
    return Path(__file__).parent / "data" / "modelnet_r_manifest_v1.csv"
