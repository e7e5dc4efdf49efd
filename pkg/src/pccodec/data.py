"""ModelNet40-style ingestion: OFF parsing, surface sampling, packed datasets.

Packed dataset layout (little-endian)::

    magic      4s   b"PCDS"
    version    u16  1
    classes    u16  number of class names K
    points     u32  points per cloud P
    n_train    u32
    n_test     u32
    K x (u8 length, UTF-8 class name)
    (n_train + n_test) x (u8 label, P x 3 float32)   # train records first
"""

from __future__ import annotations

import re
import struct
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .entropy import quantize

MODELNET40_TOTAL = 12311
DATASET_MAGIC = b"PCDS"
DATASET_VERSION = 1
_DS_HEADER = struct.Struct("<4sHHIII")


class OFFError(ValueError):
    pass


@dataclass
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray

    def areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)


@dataclass
class PointCloud:
    points: np.ndarray
    label: int = -1
    source: str = ""


@dataclass
class DatasetSplit:
    train: List[PointCloud] = field(default_factory=list)
    test: List[PointCloud] = field(default_factory=list)
    classes: List[str] = field(default_factory=list)


def parse_off(data: Union[bytes, str]) -> Mesh:
    """Parse an OFF mesh, fan-triangulating polygons.

    Accepts the ModelNet40 quirk where the counts are glued to the keyword
    (``OFF490 518 0``).
    """
    text = data.decode("utf-8", errors="replace") if isinstance(data, (bytes, bytearray)) else data
    lines = [ln.split("#", 1)[0].strip() for ln in text.splitlines()]
    tokens: List[Tuple[str, int]] = []
    for lineno, ln in enumerate(lines, start=1):
        tokens.extend((t, lineno) for t in ln.split())
    if not tokens:
        raise OFFError("empty OFF file")
    head, lineno = tokens[0]
    if not head.startswith("OFF"):
        raise OFFError(f"line {lineno}: missing OFF keyword")
    rest = head[3:]
    pos = 1
    if rest:
        tokens.insert(1, (rest, lineno))

    def take_int(what):
        nonlocal pos
        if pos >= len(tokens):
            raise OFFError(f"unexpected end of file reading {what}")
        tok, ln = tokens[pos]
        pos += 1
        try:
            return int(tok)
        except ValueError:
            raise OFFError(f"line {ln}: expected integer {what}, got {tok!r}") from None

    n_vert = take_int("vertex count")
    n_face = take_int("face count")
    take_int("edge count")
    if n_vert < 0 or n_face < 0:
        raise OFFError("negative element count")
    if pos + 3 * n_vert > len(tokens):
        raise OFFError("unexpected end of file in vertex list")
    vert_tokens = tokens[pos : pos + 3 * n_vert]
    try:
        vertices = np.array([float(t) for t, _ in vert_tokens], dtype=np.float64).reshape(n_vert, 3)
    except ValueError:
        bad = next((t, ln) for t, ln in vert_tokens if not _is_float(t))
        raise OFFError(f"line {bad[1]}: non-numeric vertex coordinate {bad[0]!r}") from None
    pos += 3 * n_vert
    faces = []
    for f in range(n_face):
        k = take_int(f"vertex count of face {f}")
        idx = [take_int(f"index in face {f}") for _ in range(k)]
        for j, v in enumerate(idx):
            if not 0 <= v < n_vert:
                raise OFFError(f"line {tokens[pos - k + j][1]}: face {f} index {v} out of range [0, {n_vert})")
        for j in range(1, k - 1):
            faces.append((idx[0], idx[j], idx[j + 1]))
    return Mesh(vertices, np.array(faces, dtype=np.int64).reshape(-1, 3))


def _is_float(t: str) -> bool:
    try:
        float(t)
        return True
    except ValueError:
        return False


def sample_surface(mesh: Mesh, points: int, seed: int = 0) -> PointCloud:
    """Area-weighted uniform sampling of ``points`` surface points."""
    areas = mesh.areas()
    total = areas.sum()
    if not total > 0:
        raise ValueError("mesh has zero total surface area")
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(areas), size=points, p=areas / total)
    r1 = np.sqrt(rng.random(points))
    r2 = rng.random(points)
    v = mesh.vertices[mesh.faces[tri]]
    a = (1 - r1)[:, None]
    b = (r1 * (1 - r2))[:, None]
    c = (r1 * r2)[:, None]
    return PointCloud(a * v[:, 0] + b * v[:, 1] + c * v[:, 2])


def normalize(cloud: PointCloud) -> PointCloud:
    """Centre on the centroid and scale into the unit sphere."""
    p = np.asarray(cloud.points, dtype=np.float64)
    p = p - p.mean(axis=0)
    r = np.linalg.norm(p, axis=1).max()
    if r > 0:
        p = p / r
    return PointCloud(p, cloud.label, cloud.source)


def subsample(cloud: PointCloud, points: int, seed: int = 0) -> PointCloud:
    n = len(cloud.points)
    if points > n:
        raise ValueError(f"cannot subsample {points} points from a cloud of {n}")
    idx = np.random.default_rng(seed).choice(n, size=points, replace=False)
    return PointCloud(np.asarray(cloud.points)[idx], cloud.label, cloud.source)


def grid_quantize(cloud: PointCloud, scale: int) -> PointCloud:
    """Snap to a grid of spacing ``1/scale`` and drop duplicate points."""
    if scale < 1:
        raise ValueError("input scaling S must be >= 1")
    q = quantize(np.asarray(cloud.points) * scale)
    _, first = np.unique(q, axis=0, return_index=True)
    q = q[np.sort(first)]
    return PointCloud(q / float(scale), cloud.label, cloud.source)


def jitter(cloud: PointCloud, sigma: float = 0.01, seed: int = 0) -> PointCloud:
    rng = np.random.default_rng(seed)
    return PointCloud(cloud.points + rng.normal(0, sigma, np.shape(cloud.points)), cloud.label, cloud.source)


def cloud_seed(seed: int, source: str) -> int:
    """Per-file seed that depends only on the global seed and the file path."""
    ss = np.random.SeedSequence([seed, zlib.crc32(source.encode("utf-8"))])
    return int(ss.generate_state(1)[0])


def load_cloud(path: Union[str, Path], points: int, seed: int = 0, source: Optional[str] = None) -> PointCloud:
    path = Path(path)
    src = source if source is not None else path.name
    try:
        mesh = parse_off(path.read_bytes())
    except OFFError as e:
        raise OFFError(f"{path}: {e}") from None
    cloud = sample_surface(mesh, points, cloud_seed(seed, src))
    cloud = normalize(cloud)
    return PointCloud(cloud.points.astype(np.float32), -1, src)


def discover_modelnet(root: Union[str, Path]) -> Tuple[List[str], List[Tuple[str, int, str]]]:
    """List ``(relative path, label, split)`` for a ModelNet-style tree.

    Expected layout is ``root/<class>/{train,test}/*.off``; classes are
    labelled in sorted name order.
    """
    root = Path(root)
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise FileNotFoundError(f"no class directories under {root}")
    if len(classes) > 255:
        raise ValueError("at most 255 classes fit the u8 label field")
    entries = []
    for label, name in enumerate(classes):
        for split in ("train", "test"):
            for f in sorted((root / name / split).glob("*.off")):
                entries.append((f.relative_to(root).as_posix(), label, split))
    return classes, entries


def _load_entry(args):
    root, rel, label, points, seed = args
    cloud = load_cloud(Path(root) / rel, points, seed, source=rel)
    cloud.label = label
    return cloud


def ingest(root: Union[str, Path], points: int, seed: int = 0, workers: int = 1) -> DatasetSplit:
    classes, entries = discover_modelnet(root)
    jobs = [(str(root), rel, label, points, seed) for rel, label, _ in entries]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            clouds = list(ex.map(_load_entry, jobs, chunksize=32))
    else:
        clouds = [_load_entry(j) for j in jobs]
    ds = DatasetSplit(classes=classes)
    for cloud, (_, _, split) in zip(clouds, entries):
        (ds.train if split == "train" else ds.test).append(cloud)
    return ds


def write_dataset(ds: DatasetSplit, path: Union[str, Path]) -> None:
    clouds = ds.train + ds.test
    P = len(clouds[0].points) if clouds else 0
    parts = [_DS_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, len(ds.classes), P, len(ds.train), len(ds.test))]
    for name in ds.classes:
        b = name.encode("utf-8")
        parts.append(struct.pack("<B", len(b)) + b)
    for c in clouds:
        if len(c.points) != P:
            raise ValueError("all clouds in a packed dataset must have the same point count")
        parts.append(struct.pack("<B", c.label))
        parts.append(np.ascontiguousarray(c.points, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_dataset(path: Union[str, Path]) -> DatasetSplit:
    data = Path(path).read_bytes()
    if len(data) < _DS_HEADER.size:
        raise ValueError(f"{path}: too short for a dataset header")
    magic, version, k, P, n_train, n_test = _DS_HEADER.unpack_from(data)
    if magic != DATASET_MAGIC or version != DATASET_VERSION:
        raise ValueError(f"{path}: not a version-{DATASET_VERSION} packed dataset")
    pos = _DS_HEADER.size
    classes = []
    for _ in range(k):
        n = data[pos]
        classes.append(data[pos + 1 : pos + 1 + n].decode("utf-8"))
        pos += 1 + n
    rec = 1 + 12 * P
    if len(data) - pos != rec * (n_train + n_test):
        raise ValueError(f"{path}: record section has wrong size")
    ds = DatasetSplit(classes=classes)
    for i in range(n_train + n_test):
        label = data[pos]
        pts = np.frombuffer(data, dtype="<f4", count=3 * P, offset=pos + 1).reshape(P, 3).astype(np.float32)
        pos += rec
        (ds.train if i < n_train else ds.test).append(PointCloud(pts, int(label), f"record:{i}"))
    return ds


def as_arrays(clouds: Sequence[PointCloud]) -> Tuple[np.ndarray, np.ndarray]:
    x = np.stack([c.points for c in clouds]).astype(np.float32)
    y = np.array([c.label for c in clouds], dtype=np.int64)
    return x, y


def input_compression_grid(
    clouds: Sequence[PointCloud],
    point_counts: Sequence[int] = (8, 16, 32, 64, 128, 256, 512, 1024),
    scales: Sequence[int] = tuple(2**k for k in range(9)),
    seed: int = 0,
):
    """Yield ``(P, S, clouds)`` for every subsampled, grid-quantized dataset.

    These are the inputs an external point-cloud codec would be run on for the
    input-compression baseline; running such codecs is outside this package.
    """
    for P in point_counts:
        sub = [subsample(c, P, cloud_seed(seed, f"{c.source}:{P}")) for c in clouds if len(c.points) >= P]
        for S in scales:
            yield P, S, [grid_quantize(c, S) for c in sub]


_OFF_HEADER = re.compile(rb"^OFF")


def is_off(data: bytes) -> bool:
    return bool(_OFF_HEADER.match(data.lstrip()))
