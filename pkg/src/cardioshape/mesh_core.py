"""Triangle meshes, biventricular shapes, shape vectors and PLY I/O.

Coordinates are millimetres throughout; volumes are reported in millilitres
(1 mL = 1000 mm^3) and masses in grams.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

MYOCARDIAL_DENSITY = 1.05  # g/mL
CAP_PLANARITY_TOL = 0.10  # fraction of loop diameter

LV_ENDO = "lv_endo"
LV_EPI = "lv_epi"
RV = "rv"


class MeshError(ValueError):
    """Raised for topologically or geometrically invalid meshes."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable triangle mesh.

    ``regions`` maps a label to a half-open ``(start, stop)`` vertex index
    range, e.g. the endocardial and epicardial subsets of the LV.
    """

    vertices: np.ndarray
    faces: np.ndarray
    regions: Mapping[str, tuple[int, int]] = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        f = np.asarray(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must be (n, 3), got {v.shape}")
        if f.size == 0:
            f = f.reshape(0, 3)
        if f.ndim != 2 or f.shape[1] != 3:
            raise MeshError(f"faces must be (m, 3), got {f.shape}")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise MeshError("face index out of range")
        for name, (start, stop) in self.regions.items():
            if not 0 <= start <= stop <= len(v):
                raise MeshError(f"region {name!r} range {(start, stop)} out of bounds")
        object.__setattr__(self, "vertices", _frozen(v))
        object.__setattr__(self, "faces", _frozen(f))
        object.__setattr__(self, "regions", dict(self.regions))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @cached_property
    def boundary_loops(self) -> tuple[np.ndarray, ...]:
        """Closed vertex loops formed by edges used by exactly one face.

        Each loop follows the direction the edge has inside its face, so a cap
        triangle ``(loop[i + 1], loop[i], c)`` continues the surface orientation.
        """
        f = self.faces
        directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        undirected = np.sort(directed, axis=1)
        _, inverse, counts = np.unique(
            undirected, axis=0, return_inverse=True, return_counts=True
        )
        boundary = directed[counts[inverse.ravel()] == 1]
        if len(boundary) == 0:
            return ()
        nxt: dict[int, int] = {}
        for a, b in boundary.tolist():
            if a in nxt:
                raise MeshError(f"non-simple boundary loop at vertex {a}")
            nxt[a] = b
        loops = []
        remaining = dict(nxt)
        while remaining:
            start = min(remaining)
            loop = [start]
            cur = remaining.pop(start)
            while cur != start:
                if cur not in remaining:
                    raise MeshError(f"boundary does not close at vertex {cur}")
                loop.append(cur)
                cur = remaining.pop(cur)
            loops.append(_frozen(np.array(loop, dtype=np.int64)))
        return tuple(loops)

    @property
    def is_watertight(self) -> bool:
        return len(self.faces) > 0 and len(self.boundary_loops) == 0

    def region_indices(self, name: str) -> np.ndarray:
        start, stop = self.regions[name]
        return np.arange(start, stop)

    def with_vertices(self, vertices: np.ndarray) -> "Mesh":
        vertices = np.asarray(vertices, dtype=np.float64)
        if vertices.shape != self.vertices.shape:
            raise MeshError(
                f"vertex array shape {vertices.shape} != {self.vertices.shape}"
            )
        out = Mesh(vertices, self.faces, self.regions)
        if "boundary_loops" in self.__dict__:
            # loops depend on faces only
            out.__dict__["boundary_loops"] = self.__dict__["boundary_loops"]
        return out

    def flipped(self) -> "Mesh":
        return Mesh(self.vertices, self.faces[:, ::-1], self.regions)


def same_topology(a: Mesh, b: Mesh) -> bool:
    return (
        a.n_vertices == b.n_vertices
        and a.faces.shape == b.faces.shape
        and bool(np.array_equal(a.faces, b.faces))
        and dict(a.regions) == dict(b.regions)
    )


def submesh(mesh: Mesh, face_mask: np.ndarray) -> Mesh:
    """Mesh made of the selected faces, with unused vertices dropped."""
    faces = mesh.faces[np.asarray(face_mask, dtype=bool)]
    used = np.unique(faces)
    remap = np.full(mesh.n_vertices, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return Mesh(mesh.vertices[used], remap[faces])


def signed_volume_mm3(mesh: Mesh) -> float:
    """Divergence-theorem sum of signed tetrahedra, about the vertex centroid."""
    v = mesh.vertices - mesh.vertices.mean(axis=0)
    a, b, c = (v[mesh.faces[:, i]] for i in range(3))
    return float(np.sum(a * np.cross(b, c)) / 6.0)


def check_orientation(mesh: Mesh) -> None:
    """Every interior edge must be traversed once in each direction."""
    f = mesh.faces
    directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    _, counts = np.unique(directed, axis=0, return_counts=True)
    if np.any(counts > 1):
        raise MeshError("inconsistent face orientation (repeated directed edge)")


def enclosed_volume(mesh: Mesh) -> float:
    """Enclosed volume in mL of a watertight, outward-oriented mesh."""
    if not mesh.is_watertight:
        raise MeshError(
            f"enclosed volume needs a watertight mesh "
            f"({len(mesh.boundary_loops)} boundary loops)"
        )
    check_orientation(mesh)
    vol = signed_volume_mm3(mesh)
    scale = float(np.ptp(mesh.vertices, axis=0).max()) ** 3
    if vol < -1e-12 * scale:
        raise MeshError(f"negative enclosed volume {vol:.6g} mm^3; faces point inward")
    return vol / 1000.0


def cap_boundaries(mesh: Mesh, planarity_tol: float = CAP_PLANARITY_TOL) -> Mesh:
    """Close every boundary loop with a fan around a new centroid vertex.

    Existing vertices keep their indices and positions; one vertex per loop is
    appended.  A watertight input is returned unchanged.
    """
    loops = mesh.boundary_loops
    if not loops:
        return mesh
    vertices = [mesh.vertices]
    faces = [mesh.faces]
    next_index = mesh.n_vertices
    for loop in loops:
        pts = mesh.vertices[loop]
        if len(loop) < 3:
            raise MeshError("boundary loop with fewer than 3 vertices")
        centroid = pts.mean(axis=0)
        _, _, vt = np.linalg.svd(pts - centroid)
        off_plane = np.abs((pts - centroid) @ vt[2]).max()
        diameter = max(
            np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1).max(), 1e-300
        )
        if off_plane > planarity_tol * diameter:
            raise MeshError(
                f"boundary loop not planar: {off_plane:.3g} mm off-plane, "
                f"diameter {diameter:.3g} mm"
            )
        ring = np.roll(loop, -1)
        fan = np.column_stack([ring, loop, np.full(len(loop), next_index)])
        vertices.append(centroid[None, :])
        faces.append(fan)
        next_index += 1
    return Mesh(np.concatenate(vertices), np.concatenate(faces), mesh.regions)


def icosphere(radius: float = 1.0, subdivisions: int = 3, center=(0.0, 0.0, 0.0)) -> Mesh:
    """Outward-oriented icosphere."""
    t = (1.0 + 5.0**0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    v = [np.array(p, dtype=float) / np.linalg.norm(p) for p in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = v[i] + v[j]
                v.append(m / np.linalg.norm(m))
                cache[key] = len(v) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return Mesh(np.array(v) * radius + np.asarray(center, dtype=float), np.array(faces))


# ---------------------------------------------------------------------------
# Biventricular shapes
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BiventricularShape:
    """LV (watertight, endo then epi vertices) plus an open RV endocardium."""

    lv: Mesh
    rv: Mesh

    def __post_init__(self):
        if LV_ENDO not in self.lv.regions or LV_EPI not in self.lv.regions:
            raise MeshError("LV mesh needs lv_endo and lv_epi regions")
        endo, epi = self.lv.regions[LV_ENDO], self.lv.regions[LV_EPI]
        if endo[0] != 0 or endo[1] != epi[0] or epi[1] != self.lv.n_vertices:
            raise MeshError("LV vertices must be ordered endo subset then epi subset")
        if len(self.lv.faces) and not self.lv.is_watertight:
            raise MeshError("LV mesh must be watertight")
        if len(self.rv.boundary_loops) != 2:
            raise MeshError(
                f"RV mesh must have two boundary loops, has {len(self.rv.boundary_loops)}"
            )

    @property
    def n_endo(self) -> int:
        return self.lv.regions[LV_ENDO][1]

    @property
    def point_count(self) -> int:
        return self.lv.n_vertices + self.rv.n_vertices

    @property
    def points(self) -> np.ndarray:
        return np.concatenate([self.lv.vertices, self.rv.vertices])

    def transformed(self, fn) -> "BiventricularShape":
        """Apply a point-wise map ``(n, 3) -> (n, 3)`` to every vertex."""
        return from_shape_vector(np.asarray(fn(self.points)).ravel(), self)


def same_shape_topology(a: BiventricularShape, b: BiventricularShape) -> bool:
    return same_topology(a.lv, b.lv) and same_topology(a.rv, b.rv)


def to_shape_vector(shape: BiventricularShape) -> np.ndarray:
    """Interleaved ``(x1, y1, z1, ..., xN, yN, zN)``: LV endo, LV epi, then RV."""
    return shape.points.ravel().copy()


def from_shape_vector(v: np.ndarray, topology: BiventricularShape) -> BiventricularShape:
    v = np.asarray(v, dtype=np.float64)
    n = topology.point_count
    if v.ndim != 1 or v.size != 3 * n:
        raise MeshError(f"shape vector length {v.size} != 3N = {3 * n}")
    pts = v.reshape(n, 3)
    n_lv = topology.lv.n_vertices
    return BiventricularShape(
        topology.lv.with_vertices(pts[:n_lv]), topology.rv.with_vertices(pts[n_lv:])
    )


def shape_matrix(shapes: Sequence[BiventricularShape]) -> np.ndarray:
    """Cohort matrix with one 3N-long shape vector per column."""
    return np.column_stack([to_shape_vector(s) for s in shapes])


def lv_endo_surface(lv: Mesh) -> Mesh:
    """Endocardial sheet, oriented to face out of the blood cavity."""
    stop = lv.regions[LV_ENDO][1]
    return submesh(lv, np.all(lv.faces < stop, axis=1)).flipped()


def lv_epi_surface(lv: Mesh) -> Mesh:
    start = lv.regions[LV_EPI][0]
    return submesh(lv, np.all(lv.faces >= start, axis=1))


def lv_cavity_mesh(lv: Mesh) -> Mesh:
    return cap_boundaries(lv_endo_surface(lv))


def lv_epi_mesh(lv: Mesh) -> Mesh:
    return cap_boundaries(lv_epi_surface(lv))


def rv_cavity_mesh(rv: Mesh) -> Mesh:
    return cap_boundaries(rv)


def myocardial_mass(lv: Mesh, density: float = MYOCARDIAL_DENSITY) -> float:
    """(epicardial volume - endocardial cavity volume) x density, in grams."""
    endo = enclosed_volume(lv_cavity_mesh(lv))
    epi = enclosed_volume(lv_epi_mesh(lv))
    if endo >= epi:
        raise MeshError(
            f"zero or negative wall thickness: endo {endo:.6g} mL >= epi {epi:.6g} mL"
        )
    return (epi - endo) * density


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------


def _ply_text(vertices: np.ndarray, faces: np.ndarray, regions: Iterable[tuple[str, int]]) -> str:
    out = io.StringIO()
    out.write("ply\nformat ascii 1.0\n")
    for name, count in regions:
        out.write(f"comment region {name} {count}\n")
    out.write(f"element vertex {len(vertices)}\n")
    out.write("property double x\nproperty double y\nproperty double z\n")
    out.write(f"element face {len(faces)}\n")
    out.write("property list uchar int vertex_indices\nend_header\n")
    for x, y, z in vertices.tolist():
        out.write(f"{x:.17g} {y:.17g} {z:.17g}\n")
    for a, b, c in faces.tolist():
        out.write(f"3 {a} {b} {c}\n")
    return out.getvalue()


def _parse_ply(text: str) -> tuple[np.ndarray, np.ndarray, list[tuple[str, int]]]:
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise MeshError("not a PLY file")
    regions: list[tuple[str, int]] = []
    n_vert = n_face = None
    i = 1
    while i < len(lines):
        parts = lines[i].split()
        i += 1
        if not parts:
            continue
        if parts[0] == "format" and parts[1] != "ascii":
            raise MeshError("only ASCII PLY is supported")
        if parts[0] == "comment" and len(parts) == 4 and parts[1] == "region":
            regions.append((parts[2], int(parts[3])))
        elif parts[0] == "element" and parts[1] == "vertex":
            n_vert = int(parts[2])
        elif parts[0] == "element" and parts[1] == "face":
            n_face = int(parts[2])
        elif parts[0] == "end_header":
            break
    if n_vert is None or n_face is None:
        raise MeshError("PLY header lacks vertex or face element")
    body = lines[i:]
    if len(body) < n_vert + n_face:
        raise MeshError("truncated PLY body")
    vertices = np.array([[float(t) for t in ln.split()[:3]] for ln in body[:n_vert]])
    faces = []
    for ln in body[n_vert : n_vert + n_face]:
        parts = ln.split()
        if int(parts[0]) != 3:
            raise MeshError("only triangular faces are supported")
        faces.append([int(t) for t in parts[1:4]])
    return vertices.reshape(n_vert, 3), np.array(faces, dtype=np.int64).reshape(n_face, 3), regions


def mesh_to_ply(mesh: Mesh) -> str:
    regions = [(k, b - a) for k, (a, b) in mesh.regions.items()]
    return _ply_text(mesh.vertices, mesh.faces, regions)


def mesh_from_ply(text: str) -> Mesh:
    vertices, faces, regions = _parse_ply(text)
    bounds, start = {}, 0
    for name, count in regions:
        bounds[name] = (start, start + count)
        start += count
    return Mesh(vertices, faces, bounds)


def shape_to_ply(shape: BiventricularShape) -> str:
    n_lv = shape.lv.n_vertices
    regions = [
        (LV_ENDO, shape.n_endo),
        (LV_EPI, n_lv - shape.n_endo),
        (RV, shape.rv.n_vertices),
    ]
    faces = np.concatenate([shape.lv.faces, shape.rv.faces + n_lv])
    return _ply_text(shape.points, faces, regions)


def shape_from_ply(text: str) -> BiventricularShape:
    vertices, faces, regions = _parse_ply(text)
    counts = dict(regions)
    if [name for name, _ in regions] != [LV_ENDO, LV_EPI, RV]:
        raise MeshError(f"expected regions lv_endo, lv_epi, rv; got {regions}")
    n_endo, n_epi = counts[LV_ENDO], counts[LV_EPI]
    n_lv = n_endo + n_epi
    if n_lv + counts[RV] != len(vertices):
        raise MeshError("region counts do not sum to the vertex count")
    is_rv = faces.min(axis=1) >= n_lv
    if np.any(is_rv != (faces.max(axis=1) >= n_lv)):
        raise MeshError("face spans LV and RV vertices")
    lv = Mesh(vertices[:n_lv], faces[~is_rv], {LV_ENDO: (0, n_endo), LV_EPI: (n_endo, n_lv)})
    rv = Mesh(vertices[n_lv:], faces[is_rv] - n_lv, {RV: (0, counts[RV])})
    return BiventricularShape(lv, rv)


def write_shape(path, shape: BiventricularShape) -> None:
    Path(path).write_text(shape_to_ply(shape), encoding="ascii")


def read_shape(path) -> BiventricularShape:
    return shape_from_ply(Path(path).read_text(encoding="ascii"))
