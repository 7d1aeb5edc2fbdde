"""2D triangulations with boundary markers, and the ``mesh2d v1`` ASCII format."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

HEADER = "mesh2d v1"


class MeshError(ValueError):
    """Raised for malformed mesh files or meshes violating the invariants."""


def signed_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    p0, p1, p2 = (vertices[triangles[:, i]] for i in range(3))
    d1, d2 = p1 - p0, p2 - p0
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def _diameters(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    lengths = [
        np.linalg.norm(vertices[triangles[:, a]] - vertices[triangles[:, b]], axis=1)
        for a, b in ((0, 1), (1, 2), (2, 0))
    ]
    return np.max(lengths, axis=0)


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    boundary_markers: np.ndarray
    h_max: float = field(init=False)
    h_min: float = field(init=False)

    def __post_init__(self):
        for name, dtype in (
            ("vertices", float),
            ("triangles", np.int64),
            ("boundary_edges", np.int64),
            ("boundary_markers", np.int64),
        ):
            arr = np.array(getattr(self, name), dtype=dtype)
            if name == "boundary_edges":
                arr = arr.reshape(-1, 2)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        diam = _diameters(self.vertices, self.triangles) if len(self.triangles) else np.zeros(1)
        object.__setattr__(self, "h_max", float(diam.max()))
        object.__setattr__(self, "h_min", float(diam.min()))

    @property
    def quasi_uniformity(self) -> float:
        return self.h_max / self.h_min

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_cells(self) -> int:
        return len(self.triangles)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Mesh):
            return NotImplemented
        return (
            np.array_equal(self.triangles, other.triangles)
            and np.array_equal(self.boundary_edges, other.boundary_edges)
            and np.array_equal(self.boundary_markers, other.boundary_markers)
            and self.vertices.shape == other.vertices.shape
            and bool(np.all(np.abs(self.vertices - other.vertices) <= 1e-15))
        )

    def validate(self) -> None:
        """Check orientation, edge manifoldness and vertex usage."""
        if self.h_min <= 0:
            raise MeshError("degenerate triangle (zero diameter)")
        if np.any(signed_areas(self.vertices, self.triangles) <= 0):
            raise MeshError("triangle with non-positive signed area")
        used = np.zeros(self.n_vertices, dtype=bool)
        used[self.triangles.ravel()] = True
        if not used.all():
            raise MeshError(f"dangling vertex {int(np.flatnonzero(~used)[0])}")
        counts = edge_counts(self.triangles)
        bad = [e for e, c in counts.items() if c > 2]
        if bad:
            raise MeshError(f"edge {bad[0]} shared by more than two triangles")
        boundary = {tuple(sorted(map(int, e))) for e in self.boundary_edges}
        for e in boundary:
            if counts.get(e, 0) != 1:
                raise MeshError(f"boundary edge {e} does not belong to exactly one triangle")
        for e, c in counts.items():
            if c == 1 and e not in boundary:
                raise MeshError(f"edge {e} lies on the boundary but carries no marker")


def edge_counts(triangles: np.ndarray) -> Counter:
    c: Counter = Counter()
    for tri in triangles:
        a, b, d = map(int, tri)
        for e in ((a, b), (b, d), (d, a)):
            c[tuple(sorted(e))] += 1
    return c


def unit_square_mesh(n: int, diagonal: str = "right") -> Mesh:
    """Structured triangulation of (0,1)^2 with n x n squares split in two.

    ``diagonal="right"`` cuts every square along the same diagonal;
    ``"alternate"`` flips the diagonal in a checkerboard pattern.
    All boundary edges get marker 1.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if diagonal not in ("right", "alternate"):
        raise ValueError(f"unknown diagonal pattern {diagonal!r}")
    xs = np.linspace(0.0, 1.0, n + 1)
    X, Y = np.meshgrid(xs, xs, indexing="xy")
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return j * (n + 1) + i

    tris = []
    for j in range(n):
        for i in range(n):
            a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
            if diagonal == "alternate" and (i + j) % 2:
                tris += [(a, b, d), (b, c, d)]
            else:
                tris += [(a, b, c), (a, c, d)]
    edges = []
    for i in range(n):
        edges += [
            (vid(i, 0), vid(i + 1, 0)),
            (vid(n, i), vid(n, i + 1)),
            (vid(i + 1, n), vid(i, n)),
            (vid(0, i + 1), vid(0, i)),
        ]
    return Mesh(vertices, np.array(tris), np.array(edges), np.ones(len(edges)))


def mesh_stats(mesh: Mesh) -> tuple[float, float, float, int, int]:
    """(h_max, h_min, quasi_uniformity, cell_count, vertex_count)."""
    return mesh.h_max, mesh.h_min, mesh.quasi_uniformity, mesh.n_cells, mesh.n_vertices


def write_mesh(mesh: Mesh, path) -> None:
    lines = [HEADER, f"vertices {mesh.n_vertices}"]
    lines += [f"{x!r} {y!r}" for x, y in mesh.vertices.tolist()]
    lines.append(f"triangles {mesh.n_cells}")
    lines += [" ".join(map(str, t)) for t in mesh.triangles.tolist()]
    lines.append(f"boundary {len(mesh.boundary_edges)}")
    lines += [
        f"{i} {j} {m}"
        for (i, j), m in zip(mesh.boundary_edges.tolist(), mesh.boundary_markers.tolist())
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh(path) -> Mesh:
    """Parse a ``mesh2d v1`` file.

    Negatively oriented triangles are repaired by swapping two vertices (with a
    warning). Structural problems raise :class:`MeshError` carrying the line number.
    """
    path = Path(path)
    raw = path.read_text().splitlines()
    rows = []
    for lineno, line in enumerate(raw, start=1):
        text = line.split("#", 1)[0].strip()
        if text:
            rows.append((lineno, text))
    it = iter(rows)

    def take(expect: str) -> int:
        try:
            lineno, text = next(it)
        except StopIteration:
            raise MeshError(f"{path}: unexpected end of file, expected '{expect}'") from None
        parts = text.split()
        if len(parts) != 2 or parts[0] != expect:
            raise MeshError(f"{path}:{lineno}: expected '{expect} <count>', got {text!r}")
        try:
            return int(parts[1])
        except ValueError:
            raise MeshError(f"{path}:{lineno}: bad count {parts[1]!r}") from None

    def block(count: int, width: int, conv):
        out = []
        for _ in range(count):
            try:
                lineno, text = next(it)
            except StopIteration:
                raise MeshError(f"{path}: unexpected end of file inside block") from None
            parts = text.split()
            if len(parts) != width:
                raise MeshError(f"{path}:{lineno}: expected {width} fields, got {len(parts)}")
            try:
                out.append([conv(p) for p in parts])
            except ValueError:
                raise MeshError(f"{path}:{lineno}: cannot parse {text!r}") from None
        return out

    try:
        lineno, text = next(it)
    except StopIteration:
        raise MeshError(f"{path}: empty file") from None
    if text != HEADER:
        raise MeshError(f"{path}:{lineno}: expected header '{HEADER}'")
    verts = block(take("vertices"), 2, float)
    tris = block(take("triangles"), 3, int)
    bnd = block(take("boundary"), 3, int)
    extra = next(it, None)
    if extra is not None:
        raise MeshError(f"{path}:{extra[0]}: trailing content")

    vertices = np.array(verts, dtype=float).reshape(-1, 2)
    triangles = np.array(tris, dtype=np.int64).reshape(-1, 3)
    if triangles.size and (triangles.min() < 0 or triangles.max() >= len(vertices)):
        raise MeshError(f"{path}: triangle references a vertex out of range")
    area = signed_areas(vertices, triangles)
    flip = area < 0
    if flip.any():
        log.warning("%s: reoriented %d negatively oriented triangle(s)", path, int(flip.sum()))
        triangles[flip] = triangles[flip][:, [0, 2, 1]]
    bnd_arr = np.array(bnd, dtype=np.int64).reshape(-1, 3)
    mesh = Mesh(vertices, triangles, bnd_arr[:, :2], bnd_arr[:, 2])
    mesh.validate()
    return mesh


def channel_mesh(nx: int, ny: int, length: float = 2.2, height: float = 0.41) -> Mesh:
    """Rectangle (0,L)x(0,H); markers 1 bottom/top walls, 2 inflow (x=0), 3 outflow (x=L)."""
    xs = np.linspace(0.0, length, nx + 1)
    ys = np.linspace(0.0, height, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return j * (nx + 1) + i

    tris = []
    for j in range(ny):
        for i in range(nx):
            a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
            tris += [(a, b, c), (a, c, d)]
    edges, markers = [], []
    for i in range(nx):
        edges += [(vid(i, 0), vid(i + 1, 0)), (vid(i + 1, ny), vid(i, ny))]
        markers += [1, 1]
    for j in range(ny):
        edges += [(vid(0, j + 1), vid(0, j)), (vid(nx, j), vid(nx, j + 1))]
        markers += [2, 3]
    return Mesh(vertices, np.array(tris), np.array(edges), np.array(markers))

