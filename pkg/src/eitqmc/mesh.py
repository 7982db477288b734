"""Structured triangulations of the disk with electrode-tagged boundary edges.

The mesh is built ring by ring: concentric circles of vertices joined by a
zipper triangulation, with the outer ring carrying the electrode endpoints as
vertices so that every electrode is a contiguous run of boundary edges.

Plain-text format (``write_mesh`` / ``read_mesh``), one record per line::

    # eit-mesh 1
    radius <R>
    vertices <N>
    <x> <y>                      (N lines)
    triangles <T>
    <i> <j> <k>                  (T lines, counter-clockwise, 0-based)
    boundary_edges <B>
    <i> <j> <electrode>          (B lines, ordered along the boundary;
                                  electrode is 0-based, -1 on gaps)

Lines starting with ``#`` are comments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# Allowed ratio between achieved and requested mesh width.
MESH_SLACK = 1.5


class MeshError(ValueError):
    """Invalid mesh request or malformed mesh file."""


@dataclass(frozen=True)
class ElectrodeConfig:
    """Electrode count, arc width and contact impedances."""

    n_electrodes: int
    width: float
    contact_impedances: tuple[float, ...]

    def __post_init__(self):
        if self.n_electrodes < 2:
            raise MeshError(f"need at least 2 electrodes, got {self.n_electrodes}")
        if not self.width > 0:
            raise MeshError(f"electrode width must be positive, got {self.width}")
        z = tuple(float(v) for v in self.contact_impedances)
        if len(z) != self.n_electrodes:
            raise MeshError(
                f"{len(z)} contact impedances given for {self.n_electrodes} electrodes"
            )
        if not all(v > 0 and math.isfinite(v) for v in z):
            raise MeshError("contact impedances must be positive and finite")
        object.__setattr__(self, "contact_impedances", z)

    @classmethod
    def uniform(cls, n_electrodes: int, width: float, impedance: float) -> "ElectrodeConfig":
        return cls(n_electrodes, width, (impedance,) * n_electrodes)

    @property
    def z(self) -> np.ndarray:
        return np.array(self.contact_impedances)


@dataclass(frozen=True, eq=False)
class Mesh:
    """Triangulated disk.

    Attributes
    ----------
    vertices : (N, 2) float array
    triangles : (T, 3) int array, counter-clockwise
    boundary_edges : (B, 2) int array, consecutive edges share a vertex and the
        last edge closes the cycle
    electrode_of_edge : (B,) int array, electrode index or -1
    radius : radius of the disk the mesh approximates
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    electrode_of_edge: np.ndarray
    radius: float

    def __post_init__(self):
        for name in ("vertices", "triangles", "boundary_edges", "electrode_of_edge"):
            arr = np.array(getattr(self, name), copy=True)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_electrodes(self) -> int:
        return int(self.electrode_of_edge.max()) + 1

    @property
    def mesh_width_h(self) -> float:
        """Largest triangle diameter (longest edge)."""
        p = self.vertices[self.triangles]
        edges = p - np.roll(p, 1, axis=1)
        return float(np.sqrt((edges**2).sum(axis=2)).max())

    @property
    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @property
    def centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    def edge_lengths(self) -> np.ndarray:
        d = self.vertices[self.boundary_edges[:, 1]] - self.vertices[self.boundary_edges[:, 0]]
        return np.hypot(d[:, 0], d[:, 1])

    def electrode_lengths(self) -> np.ndarray:
        """Polygonal arc length of each electrode."""
        return np.bincount(
            self.electrode_of_edge[self.electrode_of_edge >= 0],
            weights=self.edge_lengths()[self.electrode_of_edge >= 0],
            minlength=self.n_electrodes,
        )

    def validate(self, electrodes: ElectrodeConfig | None = None) -> None:
        """Check the structural invariants; raise MeshError on violation."""
        if np.any(self.signed_areas <= 0):
            raise MeshError("triangle with non-positive signed area")
        be = self.boundary_edges
        if not np.array_equal(be[:, 1], np.roll(be[:, 0], -1)):
            raise MeshError("boundary edges do not form a closed cycle")
        if len(np.unique(be[:, 0])) != len(be):
            raise MeshError("boundary cycle visits a vertex twice")
        tags = self.electrode_of_edge
        runs = [t for i, t in enumerate(tags) if t >= 0 and tags[i - 1] != t]
        if sorted(runs) != list(range(self.n_electrodes)):
            raise MeshError("electrodes are not disjoint contiguous runs")
        if self.n_electrodes < 2:
            raise MeshError("fewer than two electrodes")
        if electrodes is not None:
            if electrodes.n_electrodes != self.n_electrodes:
                raise MeshError("electrode count does not match the mesh")
            longest = self.edge_lengths().max()
            if np.any(np.abs(self.electrode_lengths() - electrodes.width) > longest):
                raise MeshError("electrode arc lengths deviate from the requested width")


def _ring_angles(n: int, offset: float) -> np.ndarray:
    return offset + 2 * math.pi * np.arange(n) / n


def _boundary_angles(n_el: int, ang_el: float, ang_gap: float, h_arc: float, radius: float):
    """Angles of the boundary vertices and the electrode tag of each edge."""
    n_sub_el = max(1, math.ceil(ang_el * radius / h_arc - 1e-9))
    n_sub_gap = max(1, math.ceil(ang_gap * radius / h_arc - 1e-9))
    angles, tags = [], []
    period = ang_el + ang_gap
    # electrode 0 is centred on angle 0
    start0 = -0.5 * ang_el
    for m in range(n_el):
        a0 = start0 + m * period
        angles.extend(a0 + ang_el * np.arange(n_sub_el) / n_sub_el)
        tags.extend([m] * n_sub_el)
        g0 = a0 + ang_el
        angles.extend(g0 + ang_gap * np.arange(n_sub_gap) / n_sub_gap)
        tags.extend([-1] * n_sub_gap)
    return np.array(angles), np.array(tags, dtype=np.int64)


def _zipper(inner: np.ndarray, inner_ang: np.ndarray, outer: np.ndarray, outer_ang: np.ndarray):
    """Triangulate the annulus between two closed rings of vertices.

    Both angle arrays are increasing and span less than one turn; the rings are
    walked together, always advancing the ring whose next vertex has the
    smaller angle.
    """
    p, q = len(inner), len(outer)
    # start the outer walk at the vertex angularly closest to inner[0]
    gap = np.angle(np.exp(1j * (outer_ang - inner_ang[0])))
    start = int(np.argmin(np.abs(gap)))
    outer = np.roll(outer, -start)
    outer_ang = inner_ang[0] + np.roll(gap, -start)
    outer_ang = outer_ang[0] + np.mod(outer_ang - outer_ang[0], 2 * math.pi)
    ia = np.append(inner_ang, inner_ang[0] + 2 * math.pi)
    oa = np.append(outer_ang, outer_ang[0] + 2 * math.pi)
    tris = []
    i = j = 0
    while i < p or j < q:
        a, a_next = inner[i % p], inner[(i + 1) % p]
        b, b_next = outer[j % q], outer[(j + 1) % q]
        advance_inner = j == q or (i < p and ia[i + 1] <= oa[j + 1])
        if advance_inner:
            tris.append((a, b, a_next))
            i += 1
        else:
            tris.append((a, b, b_next))
            j += 1
    return tris


def build_disk_mesh(radius: float, target_h: float, electrodes: ElectrodeConfig) -> Mesh:
    """Triangulate the disk of the given radius with electrodes on its boundary.

    Electrodes are equispaced, electrode 0 centred at angle 0 (the positive
    x-axis), numbered counter-clockwise. Each electrode's endpoints are mesh
    vertices, so its polygonal length matches ``electrodes.width`` to within
    one boundary edge. The achieved mesh width stays below
    ``MESH_SLACK * target_h``.
    """
    if not radius > 0:
        raise MeshError(f"radius must be positive, got {radius}")
    if not target_h > 0:
        raise MeshError(f"target_h must be positive, got {target_h}")
    n_el = electrodes.n_electrodes
    circumference = 2 * math.pi * radius
    if n_el * electrodes.width >= circumference:
        raise MeshError(
            f"{n_el} electrodes of width {electrodes.width} do not fit on a "
            f"boundary of length {circumference:.6g}"
        )
    spacing = target_h
    for _ in range(40):
        mesh = _ring_mesh(float(radius), spacing, electrodes)
        if mesh.mesh_width_h <= target_h:
            break
        spacing *= 0.97
    mesh.validate(electrodes)
    if mesh.mesh_width_h > MESH_SLACK * target_h:
        raise MeshError(
            f"achieved mesh width {mesh.mesh_width_h:.4g} exceeds "
            f"{MESH_SLACK} x target {target_h:.4g}"
        )
    return mesh


def _ring_mesh(radius: float, spacing: float, electrodes: ElectrodeConfig) -> Mesh:
    n_el = electrodes.n_electrodes
    ang_el = electrodes.width / radius
    ang_gap = 2 * math.pi / n_el - ang_el
    b_ang, tags = _boundary_angles(n_el, ang_el, ang_gap, spacing, radius)

    n_rings = max(1, math.ceil(radius / spacing - 1e-9))
    radii = radius * np.arange(1, n_rings + 1) / n_rings
    points = [np.zeros((1, 2))]
    rings = []
    next_idx = 1
    for k, r in enumerate(radii):
        if k == n_rings - 1:
            ang = b_ang
        else:
            n = max(6, math.ceil(2 * math.pi * r / spacing - 1e-9))
            # stagger consecutive rings by half a step
            ang = _ring_angles(n, math.pi * (k % 2) / n)
        idx = np.arange(next_idx, next_idx + len(ang))
        next_idx += len(ang)
        points.append(np.column_stack([r * np.cos(ang), r * np.sin(ang)]))
        rings.append((idx, ang))
    vertices = np.vstack(points)

    tris = []
    idx0, ang0 = rings[0]
    for i in range(len(idx0)):
        tris.append((0, idx0[i], idx0[(i + 1) % len(idx0)]))
    for (ia, aa), (ib, ab) in zip(rings[:-1], rings[1:]):
        tris.extend(_zipper(ia, aa, ib, ab))
    triangles = np.array(tris, dtype=np.int64)

    p = vertices[triangles]
    area = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (
        p[:, 1, 1] - p[:, 0, 1]
    ) * (p[:, 2, 0] - p[:, 0, 0])
    flip = area < 0
    triangles[flip] = triangles[flip][:, [0, 2, 1]]

    outer = rings[-1][0]
    boundary_edges = np.column_stack([outer, np.roll(outer, -1)])
    return Mesh(vertices, triangles, boundary_edges, tags, radius)


def write_mesh(mesh: Mesh, path: str | Path) -> None:
    lines = ["# eit-mesh 1", f"radius {mesh.radius!r}", f"vertices {mesh.n_vertices}"]
    lines += [f"{x!r} {y!r}" for x, y in mesh.vertices.tolist()]
    lines.append(f"triangles {len(mesh.triangles)}")
    lines += [f"{i} {j} {k}" for i, j, k in mesh.triangles.tolist()]
    lines.append(f"boundary_edges {len(mesh.boundary_edges)}")
    lines += [
        f"{i} {j} {t}"
        for (i, j), t in zip(mesh.boundary_edges.tolist(), mesh.electrode_of_edge.tolist())
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh(path: str | Path) -> Mesh:
    records = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if line and not line.startswith("#"):
            records.append((lineno, line.split()))
    pos = 0

    def header(name):
        nonlocal pos
        lineno, tok = records[pos]
        if tok[0] != name or len(tok) != 2:
            raise MeshError(f"line {lineno}: expected '{name} <value>'")
        pos += 1
        return tok[1]

    def block(count, ncols, dtype):
        nonlocal pos
        rows = records[pos : pos + count]
        out = []
        for lineno, t in rows:
            try:
                if len(t) != ncols:
                    raise ValueError
                out.append([dtype(v) for v in t])
            except ValueError:
                raise MeshError(f"{path}:{lineno}: expected {ncols} numbers, got {' '.join(t)!r}") from None
        if len(rows) != count:
            raise MeshError(f"{path}: expected {count} records, found {len(rows)}")
        pos += count
        return np.array(out, dtype=dtype).reshape(count, ncols)

    try:
        radius = float(header("radius"))
        verts = block(int(header("vertices")), 2, float)
        tris = block(int(header("triangles")), 3, int)
        bedges = block(int(header("boundary_edges")), 3, int)
    except IndexError:
        raise MeshError(f"{path}: truncated mesh file") from None
    mesh = Mesh(verts, tris, bedges[:, :2], bedges[:, 2], radius)
    mesh.validate()
    return mesh
