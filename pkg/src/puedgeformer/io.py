"""Point-cloud file formats: XYZ text (primary) and ASCII PLY (read only)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .geometry import PointCloud
from .metrics import TriangleMesh


class FormatError(ValueError):
    def __init__(self, path, line: int | None, message: str):
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {message}")
        self.path = path
        self.line = line


def read_xyz(path) -> PointCloud:
    """One point per line, three whitespace-separated floats; ``#`` lines and blanks are skipped."""
    path = Path(path)
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            tokens = text.split()
            if len(tokens) != 3:
                raise FormatError(path, lineno, f"expected 3 values, found {len(tokens)}")
            try:
                rows.append([float(t) for t in tokens])
            except ValueError:
                raise FormatError(path, lineno, f"non-numeric value in {text!r}") from None
    if not rows:
        raise FormatError(path, None, "no points found")
    pts = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(pts)):
        bad = int(np.flatnonzero(~np.isfinite(pts).all(axis=1))[0])
        raise FormatError(path, None, f"non-finite coordinate in point {bad}")
    return PointCloud(pts)


def format_xyz(points: np.ndarray) -> str:
    # repr() gives the shortest string that round-trips exactly
    return "".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in np.asarray(points, dtype=np.float64).tolist())


def write_xyz(path, pc: PointCloud | np.ndarray) -> None:
    pts = pc.points if isinstance(pc, PointCloud) else pc
    Path(path).write_text(format_xyz(pts))


def read_ply(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Read vertices (x, y, z) and optional triangle faces from an ASCII PLY file."""
    path = Path(path)
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise FormatError(path, 1, "missing 'ply' header")
    elements: list[tuple[str, int, list[str]]] = []
    body = None
    for lineno, line in enumerate(lines[1:], 2):
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] != "ascii":
                raise FormatError(path, lineno, "only ASCII PLY is supported")
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise FormatError(path, lineno, "property before element")
            elements[-1][2].append(tok[-1])
        elif tok[0] == "end_header":
            body = lineno
            break
    if body is None:
        raise FormatError(path, None, "missing end_header")

    cursor = body
    vertices = faces = None
    for name, count, props in elements:
        chunk = lines[cursor : cursor + count]
        if len(chunk) < count:
            raise FormatError(path, None, f"file ends inside element {name!r}")
        if name == "vertex":
            try:
                cols = [props.index(a) for a in ("x", "y", "z")]
            except ValueError:
                raise FormatError(path, None, "vertex element lacks x/y/z") from None
            vals = []
            for i, line in enumerate(chunk):
                try:
                    v = [float(t) for t in line.split()]
                    vals.append([v[c] for c in cols])
                except (ValueError, IndexError):
                    raise FormatError(path, cursor + i + 1, "malformed vertex line") from None
            vertices = np.array(vals, dtype=np.float64).reshape(-1, 3)
        elif name == "face":
            tris = []
            for i, line in enumerate(chunk):
                try:
                    v = [int(t) for t in line.split()]
                except ValueError:
                    raise FormatError(path, cursor + i + 1, "malformed face line") from None
                if not v or len(v) != v[0] + 1 or v[0] < 3:
                    raise FormatError(path, cursor + i + 1, "face needs a vertex count and at least 3 indices")
                # fan-triangulate polygons
                for j in range(2, v[0]):
                    tris.append([v[1], v[j], v[j + 1]])
            faces = np.array(tris, dtype=np.int64).reshape(-1, 3)
        cursor += count
    if vertices is None or vertices.shape[0] == 0:
        raise FormatError(path, None, "no vertices")
    return vertices, faces


def read_points(path) -> PointCloud:
    """Read a point cloud from ``.xyz`` (default) or ``.ply``."""
    if Path(path).suffix.lower() == ".ply":
        return PointCloud(read_ply(path)[0])
    return read_xyz(path)


def read_mesh(path) -> TriangleMesh:
    vertices, faces = read_ply(path)
    if faces is None or faces.shape[0] == 0:
        raise FormatError(path, None, "PLY file has no faces")
    return TriangleMesh(vertices, faces)
