"""Shape agreement (Dice, mean and Hausdorff surface distance) and clinical indices.

Volumetric overlap is measured on occupancy grids produced by parity ray
casting; surface distances are exact point-to-triangle distances from the
vertices of one surface to the triangles of the other.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, fields
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .alignment import procrustes_pair
from .mesh_core import (
    BiventricularShape,
    Mesh,
    MeshError,
    enclosed_volume,
    lv_cavity_mesh,
    lv_endo_surface,
    lv_epi_mesh,
    lv_epi_surface,
    myocardial_mass,
    rv_cavity_mesh,
    same_shape_topology,
)

DEFAULT_VOXEL_MM = 1.0
GRID_PADDING = 2
_BARY_EPS = 1e-9
_JITTER = 1e-7
_MAX_RECASTS = 8
# plastic-number offsets: successive jitters never repeat a direction
_JITTER_Y = 0.7548776662466927
_JITTER_Z = 0.5698402909980532


class TopologyMismatchError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Alignment
# ---------------------------------------------------------------------------


def align_for_eval(predicted: BiventricularShape, reference: BiventricularShape) -> BiventricularShape:
    """Remove orientation and translation (not scale) of ``predicted`` relative to ``reference``."""
    if not same_shape_topology(predicted, reference):
        raise TopologyMismatchError("predicted and reference shapes have different topology")
    t = procrustes_pair(predicted.points, reference.points, with_scale=False)
    return predicted.transformed(t.apply)


# ---------------------------------------------------------------------------
# Point-in-mesh and voxelisation
# ---------------------------------------------------------------------------


def _ray_hits(tri: np.ndarray, ys: np.ndarray, zs: np.ndarray):
    """Crossings of +x rays through (ys[ry], zs[rz]) with triangles ``tri`` (T, 3, 3).

    Returns (ray id, crossing x, degenerate ray ids).  A ray is degenerate when
    it passes within ``_BARY_EPS`` (barycentric) of a triangle edge or vertex.
    """
    nz = len(zs)
    tyz = tri[:, :, 1:]
    lo_y = np.searchsorted(ys, tyz[:, :, 0].min(axis=1) - 1e-12, "left")
    hi_y = np.searchsorted(ys, tyz[:, :, 0].max(axis=1) + 1e-12, "right")
    lo_z = np.searchsorted(zs, tyz[:, :, 1].min(axis=1) - 1e-12, "left")
    hi_z = np.searchsorted(zs, tyz[:, :, 1].max(axis=1) + 1e-12, "right")
    cy, cz = hi_y - lo_y, hi_z - lo_z
    counts = cy * cz
    if counts.sum() == 0:
        return np.empty(0, np.int64), np.empty(0), np.empty(0, np.int64)
    t = np.repeat(np.arange(len(tri)), counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    iy = lo_y[t] + local // cz[t]
    iz = lo_z[t] + local % cz[t]
    y, z = ys[iy], zs[iz]
    a, b, c = tri[t, 0], tri[t, 1], tri[t, 2]
    det = (b[:, 1] - a[:, 1]) * (c[:, 2] - a[:, 2]) - (c[:, 1] - a[:, 1]) * (b[:, 2] - a[:, 2])
    ok = np.abs(det) > 1e-300
    with np.errstate(divide="ignore", invalid="ignore"):
        u = ((b[:, 1] - y) * (c[:, 2] - z) - (c[:, 1] - y) * (b[:, 2] - z)) / det
        v = ((c[:, 1] - y) * (a[:, 2] - z) - (a[:, 1] - y) * (c[:, 2] - z)) / det
        w = 1.0 - u - v
        bmin = np.minimum(np.minimum(u, v), w)
    hit = ok & (bmin > _BARY_EPS)
    degenerate = ok & (np.abs(bmin) <= _BARY_EPS)
    ray = iy * nz + iz
    x = u * a[:, 0] + v * b[:, 0] + w * c[:, 0]
    return ray[hit], x[hit], np.unique(ray[degenerate])


def _crossing_parity(mesh: Mesh, xs, ys, zs) -> np.ndarray:
    """Inside test for every grid point (xs[i], ys[j], zs[k]); returns bool (nx, ny, nz)."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    zs = np.asarray(zs, dtype=np.float64)
    nx, ny, nz = len(xs), len(ys), len(zs)
    tri = mesh.vertices[mesh.faces]
    extent = float(np.ptp(mesh.vertices, axis=0).max()) or 1.0

    ray, x, bad = _ray_hits(tri, ys, zs)
    keep = ~np.isin(ray, bad)
    rays, xss = [ray[keep]], [x[keep]]
    attempt = 0
    while bad.size:
        attempt += 1
        if attempt > _MAX_RECASTS:
            raise MeshError(f"{bad.size} rays stay degenerate after {_MAX_RECASTS} jittered recasts")
        dy = _JITTER * extent * ((attempt * _JITTER_Y) % 1.0 - 0.5)
        dz = _JITTER * extent * ((attempt * _JITTER_Z) % 1.0 - 0.5)
        still = []
        for r in bad:  # few rays: cast each on its own
            j, k = divmod(int(r), nz)
            r2, x2, b2 = _ray_hits(tri, ys[j : j + 1] + dy, zs[k : k + 1] + dz)
            if b2.size:
                still.append(r)
            else:
                rays.append(np.full(len(x2), r, dtype=np.int64))
                xss.append(x2)
        bad = np.asarray(still, dtype=np.int64)
    ray = np.concatenate(rays)
    x = np.concatenate(xss)
    # a crossing at x_c lies to the +x side of every query x_i < x_c
    pos = np.searchsorted(xs, x, "left")
    hist = np.bincount(ray * (nx + 1) + pos, minlength=ny * nz * (nx + 1)).reshape(ny * nz, nx + 1)
    beyond = np.cumsum(hist[:, ::-1], axis=1)[:, ::-1][:, 1:]  # crossings with pos > i
    inside = (beyond % 2 == 1).reshape(ny, nz, nx)
    return inside.transpose(2, 0, 1)


def points_inside_grid(mesh: Mesh, xs, ys, zs) -> np.ndarray:
    """Occupancy of the grid points ``xs x ys x zs`` (each sorted ascending)."""
    if not mesh.is_watertight:
        raise MeshError("point-in-mesh test needs a watertight mesh")
    for a in (xs, ys, zs):
        if np.any(np.diff(a) < 0):
            raise ValueError("grid coordinates must be sorted ascending")
    return _crossing_parity(mesh, xs, ys, zs)


@dataclass(frozen=True)
class GridFrame:
    origin: tuple  # corner of voxel (0, 0, 0), mm
    spacing: float
    shape: tuple

    @classmethod
    def enclosing(cls, meshes: Iterable[Mesh], spacing: float = DEFAULT_VOXEL_MM) -> "GridFrame":
        """Union bounding box of ``meshes`` plus a two-voxel margin."""
        if not spacing > 0:
            raise ValueError("voxel spacing must be positive")
        pts = np.concatenate([m.vertices for m in meshes])
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        shape = np.ceil((hi - lo) / spacing).astype(int) + 2 * GRID_PADDING
        origin = lo - GRID_PADDING * spacing
        return cls(tuple(float(v) for v in origin), float(spacing), tuple(int(s) for s in shape))

    def centers(self, axis: int) -> np.ndarray:
        return self.origin[axis] + (np.arange(self.shape[axis]) + 0.5) * self.spacing

    @property
    def voxel_volume_ml(self) -> float:
        return self.spacing**3 / 1000.0


def voxelize(mesh: Mesh, frame: GridFrame) -> np.ndarray:
    """Boolean occupancy of voxel centres inside ``mesh``."""
    if not mesh.is_watertight:
        raise MeshError("voxelisation needs a watertight mesh")
    return _crossing_parity(mesh, frame.centers(0), frame.centers(1), frame.centers(2))


def dice(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"grid frames differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def mesh_dice(a: Mesh, b: Mesh, spacing: float = DEFAULT_VOXEL_MM) -> float:
    frame = GridFrame.enclosing([a, b], spacing)
    return dice(voxelize(a, frame), voxelize(b, frame))


# ---------------------------------------------------------------------------
# Surface distances
# ---------------------------------------------------------------------------


def _dot(a, b):
    # explicit sum so the value does not depend on how many pairs are batched
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


def point_triangle_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Euclidean distance from points ``p`` to triangles (a, b, c), all (n, 3), pairwise by row.

    Closest point by Voronoi-region classification of the triangle; degenerate
    triangles fall back to their edges and vertices.
    """
    ab, ac = b - a, c - a
    ap, bp, cp = p - a, p - b, p - c
    d1, d2 = _dot(ab, ap), _dot(ac, ap)
    d3, d4 = _dot(ab, bp), _dot(ac, bp)
    d5, d6 = _dot(ab, cp), _dot(ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = va + vb + vc
        v_in = vb / denom
        w_in = vc / denom
    regions = [
        (d1 <= 0) & (d2 <= 0),
        (d3 >= 0) & (d4 <= d3),
        (vc <= 0) & (d1 >= 0) & (d3 <= 0),
        (d6 >= 0) & (d5 <= d6),
        (vb <= 0) & (d2 >= 0) & (d6 <= 0),
        (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0),
    ]
    candidates = [
        a,
        b,
        a + t_ab[:, None] * ab,
        c,
        a + t_ac[:, None] * ac,
        b + t_bc[:, None] * (c - b),
    ]
    q = a + v_in[:, None] * ab + w_in[:, None] * ac
    for cond, point in zip(reversed(regions), reversed(candidates)):
        q = np.where(cond[:, None], point, q)
    diff = p - q
    out = np.sqrt(_dot(diff, diff))
    bad = ~np.isfinite(out)
    if np.any(bad):  # zero-area triangle hit the interior branch: use its edges
        out[bad] = _degenerate_distance(p[bad], a[bad], b[bad], c[bad])
    return out


def _segment_distance(p, a, b):
    ab = b - a
    den = _dot(ab, ab)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.clip(np.where(den > 0, _dot(p - a, ab) / den, 0.0), 0.0, 1.0)
    diff = p - (a + t[:, None] * ab)
    return np.sqrt(_dot(diff, diff))


def _degenerate_distance(p, a, b, c):
    return np.minimum(np.minimum(_segment_distance(p, a, b), _segment_distance(p, b, c)), _segment_distance(p, a, c))


def _check_nonempty(mesh: Mesh) -> None:
    if mesh.n_vertices == 0 or len(mesh.faces) == 0:
        raise MeshError("surface distance needs a non-empty mesh")


def directed_distances_brute_force(points: np.ndarray, mesh: Mesh, chunk: int = 256) -> np.ndarray:
    """Distance from each point to the nearest triangle of ``mesh`` by testing every pair."""
    _check_nonempty(mesh)
    tri = mesh.vertices[mesh.faces]
    nt = len(tri)
    out = np.empty(len(points))
    for s in range(0, len(points), chunk):
        p = points[s : s + chunk]
        pp = np.repeat(p, nt, axis=0)
        tt = np.tile(tri, (len(p), 1, 1))
        d = point_triangle_distance(pp, tt[:, 0], tt[:, 1], tt[:, 2])
        out[s : s + chunk] = d.reshape(len(p), nt).min(axis=1)
    return out


def directed_distances(points: np.ndarray, mesh: Mesh) -> np.ndarray:
    """Same values as the brute force, evaluating only triangles that can be nearest.

    The distance to the nearest triangle centroid ``U`` bounds the answer; any
    triangle at distance <= U has its centroid within ``U + r_max`` where
    ``r_max`` is the largest centroid-to-vertex radius.
    """
    _check_nonempty(mesh)
    points = np.asarray(points, dtype=np.float64)
    tri = mesh.vertices[mesh.faces]
    cent = tri.mean(axis=1)
    r_max = float(np.sqrt(np.max(np.sum((tri - cent[:, None, :]) ** 2, axis=2))))
    tree = cKDTree(cent)
    upper, _ = tree.query(points)
    scale = float(np.abs(mesh.vertices).max()) + float(np.abs(points).max()) + 1.0
    radii = upper + r_max + 1e-9 * scale
    lists = tree.query_ball_point(points, radii)
    sizes = np.fromiter((len(l) for l in lists), dtype=np.int64, count=len(lists))
    cand = np.fromiter((i for l in lists for i in l), dtype=np.int64, count=int(sizes.sum()))
    owner = np.repeat(np.arange(len(points)), sizes)
    d = point_triangle_distance(points[owner], tri[cand, 0], tri[cand, 1], tri[cand, 2])
    out = np.full(len(points), np.inf)
    np.minimum.at(out, owner, d)
    return out


def surface_distances(a: Mesh, b: Mesh, accelerated: bool = True) -> tuple[float, float]:
    """Symmetric (mean, Hausdorff) vertex-to-surface distances in mm."""
    _check_nonempty(a)
    _check_nonempty(b)
    fn = directed_distances if accelerated else directed_distances_brute_force
    dab = fn(a.vertices, b)
    dba = fn(b.vertices, a)
    mean = 0.5 * (float(dab.mean()) + float(dba.mean()))
    return mean, max(float(dab.max()), float(dba.max()))


# ---------------------------------------------------------------------------
# Clinical indices and cohort evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClinicalIndices:
    lv_volume: float  # mL
    lv_mass: float  # g
    rv_volume: float  # mL


def region_volumes(shape: BiventricularShape) -> ClinicalIndices:
    return ClinicalIndices(
        lv_volume=enclosed_volume(lv_cavity_mesh(shape.lv)),
        lv_mass=myocardial_mass(shape.lv),
        rv_volume=enclosed_volume(rv_cavity_mesh(shape.rv)),
    )


@dataclass(frozen=True)
class ShapeAgreement:
    dice_lv_endo: float
    dice_lv_epi: float
    dice_rv: float
    msd_lv_endo: float
    msd_lv_epi: float
    msd_rv: float
    hd_lv_endo: float
    hd_lv_epi: float
    hd_rv: float


def shape_agreement(
    predicted: BiventricularShape, reference: BiventricularShape, spacing: float = DEFAULT_VOXEL_MM
) -> ShapeAgreement:
    """Dice on the LV cavity, LV epicardial volume and capped RV; distances on the open surfaces."""
    vals = {}
    dice_pairs = {
        "lv_endo": (lv_cavity_mesh(predicted.lv), lv_cavity_mesh(reference.lv)),
        "lv_epi": (lv_epi_mesh(predicted.lv), lv_epi_mesh(reference.lv)),
        "rv": (rv_cavity_mesh(predicted.rv), rv_cavity_mesh(reference.rv)),
    }
    surf_pairs = {
        "lv_endo": (lv_endo_surface(predicted.lv), lv_endo_surface(reference.lv)),
        "lv_epi": (lv_epi_surface(predicted.lv), lv_epi_surface(reference.lv)),
        "rv": (predicted.rv, reference.rv),
    }
    for region, (p, r) in dice_pairs.items():
        vals[f"dice_{region}"] = mesh_dice(p, r, spacing)
    for region, (p, r) in surf_pairs.items():
        vals[f"msd_{region}"], vals[f"hd_{region}"] = surface_distances(p, r)
    return ShapeAgreement(**vals)


@dataclass(frozen=True)
class SubjectEvaluation:
    subject_id: str
    agreement: ShapeAgreement
    predicted: ClinicalIndices
    reference: ClinicalIndices

    def row(self) -> dict:
        out = {"subject_id": self.subject_id}
        out.update({f.name: getattr(self.agreement, f.name) for f in fields(ShapeAgreement)})
        for key, attr in (("dlv_vol", "lv_volume"), ("dlv_mass", "lv_mass"), ("drv_vol", "rv_volume")):
            p, r = getattr(self.predicted, attr), getattr(self.reference, attr)
            out[f"{key}_abs"] = abs(p - r)
            out[f"{key}_rel"] = 100.0 * abs(p - r) / r
        return out


REPORT_COLUMNS = (
    "subject_id",
    "dice_lv_endo", "dice_lv_epi", "dice_rv",
    "msd_lv_endo", "msd_lv_epi", "msd_rv",
    "hd_lv_endo", "hd_lv_epi", "hd_rv",
    "dlv_vol_abs", "dlv_vol_rel", "dlv_mass_abs", "dlv_mass_rel", "drv_vol_abs", "drv_vol_rel",
)  # fmt: skip


def evaluate_pair(
    subject_id: str,
    predicted: BiventricularShape,
    reference: BiventricularShape,
    spacing: float = DEFAULT_VOXEL_MM,
) -> SubjectEvaluation:
    aligned = align_for_eval(predicted, reference)
    return SubjectEvaluation(
        subject_id, shape_agreement(aligned, reference, spacing), region_volumes(aligned), region_volumes(reference)
    )


@dataclass(frozen=True)
class EvaluationReport:
    subjects: tuple  # of SubjectEvaluation

    @property
    def rows(self) -> list[dict]:
        return [s.row() for s in self.subjects]

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def mean(self) -> dict:
        return {c: float(np.mean(self.column(c))) for c in REPORT_COLUMNS[1:]}

    def sd(self) -> dict:
        """Sample standard deviation (n - 1); 0 for a single subject."""
        n = len(self.subjects)
        return {c: float(np.std(self.column(c), ddof=1)) if n > 1 else 0.0 for c in REPORT_COLUMNS[1:]}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(REPORT_COLUMNS)
            for r in self.rows:
                wr.writerow([r["subject_id"]] + [f"{r[c]:.17g}" for c in REPORT_COLUMNS[1:]])
            for label, summary in (("mean", self.mean()), ("sd", self.sd())):
                wr.writerow([label] + [f"{summary[c]:.17g}" for c in REPORT_COLUMNS[1:]])


def evaluate_cohort(
    pairs: Sequence[tuple[str, BiventricularShape, BiventricularShape]],
    spacing: float = DEFAULT_VOXEL_MM,
    map_fn=map,
) -> EvaluationReport:
    """Evaluate (subject_id, predicted, reference) triples; ``map_fn`` may be an ordered parallel map."""
    if not pairs:
        raise ValueError("no subjects to evaluate")
    bad = [sid for sid, p, r in pairs if not same_shape_topology(p, r)]
    if bad:
        raise TopologyMismatchError(f"topology mismatch for subjects: {', '.join(bad)}")
    results = list(map_fn(lambda t: evaluate_pair(t[0], t[1], t[2], spacing), pairs))
    return EvaluationReport(tuple(results))
