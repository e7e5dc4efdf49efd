"""Procedural stand-in for ModelNet40: 40 classes of primitive meshes.

Classes are the product of eight primitive shapes and five axis-aspect
profiles. Instances jitter the aspect ratios and spin about the vertical
axis. Files are written as ``root/<class>/{train,test}/<class>_NNNN.off`` so
the regular ingestion path can read them; every third file uses the fused
``OFFnnn`` header quirk seen in the real dataset.
"""

from __future__ import annotations

from pathlib import Path
from typing import List, Tuple

import numpy as np

PROFILES = ((1.0, 1.0, 1.0), (1.0, 1.0, 2.5), (2.5, 1.0, 1.0), (2.0, 2.0, 0.5), (1.0, 0.4, 0.4))


def _box():
    v = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=float)
    f = [[0, 1, 3, 2], [4, 6, 7, 5], [0, 4, 5, 1], [2, 3, 7, 6], [0, 2, 6, 4], [1, 5, 7, 3]]
    return v, f


def _revolve(profile: List[Tuple[float, float]], n: int = 16):
    """Surface of revolution around z from (radius, height) samples."""
    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    verts = []
    for r, z in profile:
        verts += [[r * np.cos(a), r * np.sin(a), z] for a in t]
    faces = []
    for i in range(len(profile) - 1):
        for j in range(n):
            a, b = i * n + j, i * n + (j + 1) % n
            faces.append([a, b, b + n, a + n])
    v = np.array(verts)
    if profile[0][0] > 0:
        v = np.vstack([v, [0, 0, profile[0][1]]])
        c = len(v) - 1
        faces += [[c, (j + 1) % n, j] for j in range(n)]
    if profile[-1][0] > 0:
        v = np.vstack([v, [0, 0, profile[-1][1]]])
        c = len(v) - 1
        base = (len(profile) - 1) * n
        faces += [[c, base + j, base + (j + 1) % n] for j in range(n)]
    return v, faces


def _sphere():
    ang = np.linspace(-np.pi / 2, np.pi / 2, 10)
    return _revolve([(max(np.cos(a), 0.0), np.sin(a)) for a in ang])


def _torus(n: int = 16, m: int = 8, R: float = 1.0, r: float = 0.35):
    u = np.linspace(0, 2 * np.pi, n, endpoint=False)
    w = np.linspace(0, 2 * np.pi, m, endpoint=False)
    v = np.array([[(R + r * np.cos(b)) * np.cos(a), (R + r * np.cos(b)) * np.sin(a), r * np.sin(b)] for a in u for b in w])
    f = []
    for i in range(n):
        for j in range(m):
            a = i * m + j
            b = i * m + (j + 1) % m
            c = ((i + 1) % n) * m + (j + 1) % m
            d = ((i + 1) % n) * m + j
            f.append([a, b, c, d])
    return v, f


def _pyramid():
    v = np.array([[-1, -1, -1], [1, -1, -1], [1, 1, -1], [-1, 1, -1], [0, 0, 1]], dtype=float)
    return v, [[0, 3, 2, 1], [0, 1, 4], [1, 2, 4], [2, 3, 4], [3, 0, 4]]


def _prism():
    v = np.array([[-1, -1, -1], [1, -1, -1], [0, 1, -1], [-1, -1, 1], [1, -1, 1], [0, 1, 1]], dtype=float)
    return v, [[0, 2, 1], [3, 4, 5], [0, 1, 4, 3], [1, 2, 5, 4], [2, 0, 3, 5]]


PRIMITIVES = {
    "box": _box,
    "cylinder": lambda: _revolve([(1.0, -1.0), (1.0, 1.0)]),
    "cone": lambda: _revolve([(1.0, -1.0), (0.0, 1.0)]),
    "sphere": _sphere,
    "torus": _torus,
    "pyramid": _pyramid,
    "prism": _prism,
    "hourglass": lambda: _revolve([(1.0, -1.0), (0.3, 0.0), (1.0, 1.0)]),
}


def class_names() -> List[str]:
    return [f"{p}_{k}" for p in PRIMITIVES for k in range(len(PROFILES))]


def make_mesh(name: str, rng: np.random.Generator):
    prim, k = name.rsplit("_", 1)
    v, f = PRIMITIVES[prim]()
    aspect = np.array(PROFILES[int(k)]) * rng.uniform(0.85, 1.15, 3)
    theta = rng.uniform(-0.3, 0.3)
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    v = (v * aspect) @ rot.T + rng.normal(0, 0.05, 3)
    return v, f


def off_text(vertices, faces, fused_header: bool = False) -> str:
    head = f"{len(vertices)} {len(faces)} 0"
    lines = [f"OFF{head}"] if fused_header else ["OFF", head]
    lines += [f"{x:.6f} {y:.6f} {z:.6f}" for x, y, z in vertices]
    lines += [" ".join(str(i) for i in [len(face)] + list(face)) for face in faces]
    return "\n".join(lines) + "\n"


def write_corpus(root, n_train: int = 20, n_test: int = 5, seed: int = 0, classes=None) -> Path:
    """Write the procedural corpus; returns ``root``."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    counter = 0
    for name in classes or class_names():
        for split, n in (("train", n_train), ("test", n_test)):
            d = root / name / split
            d.mkdir(parents=True, exist_ok=True)
            for i in range(n):
                v, f = make_mesh(name, rng)
                (d / f"{name}_{i:04d}.off").write_text(off_text(v, f, fused_header=counter % 3 == 0))
                counter += 1
    return root
