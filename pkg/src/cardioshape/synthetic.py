"""Seeded biventricular phantom cohort with known latent parameters.

The LV is a watertight cup: an inner (endocardial) and an outer (epicardial)
half-superellipsoid joined by a flat basal rim.  The RV is a kidney-shaped
open bag beside the LV whose basal lid carries two planar openings.  Four
dimensionless latents, roughly in [-1, 1], control global scale, LV wall
thickness, LV long-axis length and RV breadth.  Tessellation is fixed, so
every phantom shares one vertex correspondence.

Images are rendered in the canonical (unposed) frame: 9 short-axis planes
spanning the LV and one long-axis plane through the LV axis.  The RV cavity
is drawn at background intensity by default, so RV breadth reaches a
network only through the metadata (age is tied to it).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .alignment import RigidTransform, rotation_about
from .cpd import STRUCTURES, write_contours
from .mesh_core import (
    LV_ENDO,
    LV_EPI,
    RV,
    BiventricularShape,
    Mesh,
    check_orientation,
    lv_cavity_mesh,
    lv_endo_surface,
    lv_epi_mesh,
    lv_epi_surface,
    rv_cavity_mesh,
    write_shape,
)
from .metrics import points_inside_grid
from .preprocess import (
    LAX_ROI_SIZE,
    SAX_SIZE,
    SAX_SLICES,
    MetadataRecord,
    ROI_SPACING_MM,
    intensity_normalize,
    pad_lax,
    write_metadata_csv,
    write_tensor,
)

LATENT_NAMES = ("scale", "wall_thickness", "long_axis", "rv_breadth")
AZIMUTH_STEPS = 32
MERIDIAN_RINGS = 12
LID_RINGS = 3  # interior lid rings between the RV rim and the lid centre
SUPERELLIPSE_EXPONENT = 2.3

BLOOD, MYOCARDIUM, BACKGROUND = 0.9, 0.5, 0.1
SAX_CENTER = (8.0, 0.0)  # mm, in-plane ROI centre
LAX_CENTER = (8.0, -40.0)  # mm, (x, z)


class PhantomError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PhantomGeometry:
    """Derived dimensions (mm) of one phantom."""

    r_endo: float
    l_endo: float
    thickness: float
    rv_half_width: float
    rv_breadth: float
    rv_length: float
    rv_offset: float  # x of the RV axis
    exponent: float = SUPERELLIPSE_EXPONENT

    @property
    def r_epi(self) -> float:
        return self.r_endo + self.thickness

    @property
    def l_epi(self) -> float:
        return self.l_endo + self.thickness

    def superellipse_area(self, r: float) -> float:
        n = self.exponent
        return 4.0 * r * r * math.gamma(1 + 1 / n) ** 2 / math.gamma(1 + 2 / n)

    def lv_cavity_volume(self) -> float:
        """Analytic cavity volume in mL (half-ellipsoid meridian, superellipse section)."""
        return 2.0 / 3.0 * self.l_endo * self.superellipse_area(self.r_endo) / 1000.0

    def lv_epi_volume(self) -> float:
        return 2.0 / 3.0 * self.l_epi * self.superellipse_area(self.r_epi) / 1000.0

    def rv_cavity_volume(self) -> float:
        # kidney section area: pi a b minus the septal indentation 0.8 a b * 4/3
        a, b = self.rv_half_width, self.rv_breadth
        area = a * b * (math.pi - 3.2 / 3.0)
        return 2.0 / 3.0 * self.rv_length * area / 1000.0


def phantom_geometry(latents) -> PhantomGeometry:
    z = np.zeros(4)
    lat = np.asarray(latents, dtype=np.float64).ravel()
    if lat.size > 4 or not np.all(np.isfinite(lat)):
        raise PhantomError("expected up to four finite latents")
    z[: lat.size] = lat
    g = 1.0 + 0.12 * z[0]
    factors = {"scale": g, "wall_thickness": 1 + 0.2 * z[1], "long_axis": 1 + 0.12 * z[2], "rv_breadth": 1 + 0.2 * z[3]}
    low = {k: v for k, v in factors.items() if v < 0.3}
    if low:
        raise PhantomError(
            "latents collapse the phantom (factors must stay >= 0.3): "
            + ", ".join(f"{k}={v:.3g}" for k, v in low.items())
        )
    t = 9.0 * factors["wall_thickness"] * g
    l_endo = 55.0 * factors["long_axis"] * g
    a = 11.0 * g
    geo = PhantomGeometry(
        r_endo=24.0 * g,
        l_endo=l_endo,
        thickness=t,
        rv_half_width=a,
        rv_breadth=34.0 * factors["rv_breadth"] * g,
        rv_length=0.85 * (l_endo + t),
        rv_offset=0.0,
    )
    # septal extreme of the kidney sits 0.3125 a inside the RV axis; leave a 3 mm gap
    return PhantomGeometry(**{**geo.__dict__, "rv_offset": geo.r_epi + 3.0 * g + 0.3125 * a})


def _azimuth() -> tuple[np.ndarray, np.ndarray]:
    phi = 2 * np.pi * np.arange(AZIMUTH_STEPS) / AZIMUTH_STEPS
    return np.cos(phi), np.sin(phi)


def _superellipse_section(exponent: float) -> np.ndarray:
    c, s = _azimuth()
    e = 2.0 / exponent
    return np.stack([np.sign(c) * np.abs(c) ** e, np.sign(s) * np.abs(s) ** e], axis=1)


def _kidney_section(a: float, b: float) -> np.ndarray:
    c, s = _azimuth()
    x = a * c + np.where(c < 0, 0.8 * a * c * c, 0.0)
    return np.stack([x, b * s], axis=1)


def _cup(section: np.ndarray, radius: float, length: float, centre_x: float = 0.0) -> np.ndarray:
    """Apex then MERIDIAN_RINGS rings; ring k sits at polar angle k/K * pi/2 of an ellipse."""
    theta = 0.5 * np.pi * np.arange(1, MERIDIAN_RINGS + 1) / MERIDIAN_RINGS
    s = np.sin(theta)[:, None]
    z = -length * np.cos(theta)
    z[-1] = 0.0
    xy = radius * s[:, :, None] * section[None, :, :]
    rings = np.concatenate([xy, np.broadcast_to(z[:, None, None], (MERIDIAN_RINGS, AZIMUTH_STEPS, 1))], axis=2)
    rings[..., 0] += centre_x
    apex = np.array([[centre_x, 0.0, -length]])
    return np.concatenate([apex, rings.reshape(-1, 3)])


def _ring(k: int, j, offset: int = 0):
    """Index of ring k (1-based), azimuth j in a cup starting at ``offset``."""
    return offset + 1 + (k - 1) * AZIMUTH_STEPS + np.mod(j, AZIMUTH_STEPS)


def _cup_faces(offset: int = 0) -> np.ndarray:
    j = np.arange(AZIMUTH_STEPS)
    faces = [np.stack([np.full_like(j, offset), _ring(1, j + 1, offset), _ring(1, j, offset)], axis=1)]
    for k in range(1, MERIDIAN_RINGS):
        a, b = _ring(k, j, offset), _ring(k, j + 1, offset)
        c, d = _ring(k + 1, j + 1, offset), _ring(k + 1, j, offset)
        faces += [np.stack([a, b, c], axis=1), np.stack([a, c, d], axis=1)]
    return np.concatenate(faces)


def _strip(outer: np.ndarray, inner: np.ndarray) -> np.ndarray:
    """Triangles between two planar rings (outer, inner) with +z normals, one quad per azimuth."""
    o1, i1 = np.roll(outer, -1), np.roll(inner, -1)
    quads = np.stack([np.stack([outer, o1, i1], axis=1), np.stack([outer, i1, inner], axis=1)], axis=1)
    return quads  # (J, 2, 3)


# RV lid openings: cells of lid strip 2 (between lid rings 1 and 2)
_HOLE_STRIP = 2
_HOLES = (range(3, 8), range(18, 23))


def make_phantom(latents) -> BiventricularShape:
    """Canonical-frame phantom: LV axis along z, base at z = 0, apex at negative z."""
    geo = phantom_geometry(latents)
    sec = _superellipse_section(geo.exponent)
    endo = _cup(sec, geo.r_endo, geo.l_endo)
    epi = _cup(sec, geo.r_epi, geo.l_epi)
    n_endo = len(endo)
    j = np.arange(AZIMUTH_STEPS)
    rim = _strip(_ring(MERIDIAN_RINGS, j, n_endo), _ring(MERIDIAN_RINGS, j)).reshape(-1, 3)
    lv_faces = np.concatenate([_cup_faces(0)[:, ::-1], _cup_faces(n_endo), rim])
    lv = Mesh(
        np.concatenate([endo, epi]),
        lv_faces,
        {LV_ENDO: (0, n_endo), LV_EPI: (n_endo, 2 * n_endo)},
    )

    kid = _kidney_section(geo.rv_half_width, geo.rv_breadth)
    wall = _cup(kid, 1.0, geo.rv_length, geo.rv_offset)
    rho = 1.0 - np.arange(1, LID_RINGS + 1) / (LID_RINGS + 1)
    lid = np.concatenate([rho[:, None, None] * kid[None], np.zeros((LID_RINGS, AZIMUTH_STEPS, 1))], axis=2)
    lid[..., 0] += geo.rv_offset
    centre = len(wall) + LID_RINGS * AZIMUTH_STEPS
    rv_vertices = np.concatenate([wall, lid.reshape(-1, 3), [[geo.rv_offset, 0.0, 0.0]]])
    rings = [_ring(MERIDIAN_RINGS, j)] + [len(wall) + m * AZIMUTH_STEPS + j for m in range(LID_RINGS)]
    lid_faces = []
    for m in range(LID_RINGS):
        cells = _strip(rings[m], rings[m + 1])
        if m + 1 == _HOLE_STRIP:
            keep = np.ones(AZIMUTH_STEPS, bool)
            for hole in _HOLES:
                keep[list(hole)] = False
            cells = cells[keep]
        lid_faces.append(cells.reshape(-1, 3))
    inner = rings[-1]
    lid_faces.append(np.stack([np.full_like(inner, centre), inner, np.roll(inner, -1)], axis=1))
    rv = Mesh(rv_vertices, np.concatenate([_cup_faces(0)] + lid_faces), {RV: (0, len(rv_vertices))})
    check_orientation(lv)
    check_orientation(rv)
    return BiventricularShape(lv, rv)


# ---------------------------------------------------------------------------
# Rendering and contours
# ---------------------------------------------------------------------------


def sax_plane_heights(shape: BiventricularShape) -> np.ndarray:
    """Nine planes evenly spanning the LV, from just above the epicardial apex to just below the base."""
    z = shape.lv.vertices[:, 2]
    lo, hi = float(z.min()), float(z.max())
    if not hi > lo:
        raise PhantomError("shape has zero long-axis extent")
    return lo + (hi - lo) * np.arange(1, SAX_SLICES + 1) / (SAX_SLICES + 1)


def _pixel_axis(n: int, centre: float) -> np.ndarray:
    return centre + (np.arange(n) - (n - 1) / 2.0) * ROI_SPACING_MM


def _label_image(cavity, epi, rv, xs, ys, zs, rv_intensity) -> np.ndarray:
    """Pre-noise intensities on a grid, indexed (x, y, z)."""
    img = np.full((len(xs), len(ys), len(zs)), BACKGROUND)
    if rv is not None and rv_intensity != BACKGROUND:
        img[points_inside_grid(rv, xs, ys, zs)] = rv_intensity
    img[points_inside_grid(epi, xs, ys, zs)] = MYOCARDIUM
    img[points_inside_grid(cavity, xs, ys, zs)] = BLOOD
    return img


def render_clean(shape: BiventricularShape, rv_intensity: float = BACKGROUND) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free label intensities: SAX (9, 64, 64) rows y / cols x, LAX (80, 60) rows z (base up) / cols x."""
    cavity, epi = lv_cavity_mesh(shape.lv), lv_epi_mesh(shape.lv)
    rv = rv_cavity_mesh(shape.rv) if rv_intensity != BACKGROUND else None
    xs = _pixel_axis(SAX_SIZE[1], SAX_CENTER[0])
    ys = _pixel_axis(SAX_SIZE[0], SAX_CENTER[1])
    sax = _label_image(cavity, epi, rv, xs, ys, sax_plane_heights(shape), rv_intensity).transpose(2, 1, 0)
    lx = _pixel_axis(LAX_ROI_SIZE[1], LAX_CENTER[0])
    lz = _pixel_axis(LAX_ROI_SIZE[0], LAX_CENTER[1])
    lax = _label_image(cavity, epi, rv, lx, np.zeros(1), lz, rv_intensity)[:, 0, :].T[::-1]
    return sax, np.ascontiguousarray(lax)


def render_slices(
    shape: BiventricularShape, noise_sigma: float = 0.05, seed=0, rv_intensity: float = BACKGROUND
) -> tuple[np.ndarray, np.ndarray]:
    """Noisy, normalised SAX stack (9, 64, 64) and zero-padded LAX (80, 80)."""
    if noise_sigma < 0:
        raise PhantomError("noise_sigma must be >= 0")
    sax, lax = render_clean(shape, rv_intensity)
    rng = np.random.default_rng(seed)
    sax = sax + noise_sigma * rng.standard_normal(sax.shape)
    lax = lax + noise_sigma * rng.standard_normal(lax.shape)
    return np.stack([intensity_normalize(s) for s in sax]), pad_lax(intensity_normalize(lax))


def plane_section(mesh: Mesh, axis: int, value: float) -> np.ndarray:
    """Points where mesh edges cross the plane ``coord[axis] = value`` (one per crossing edge)."""
    e = np.concatenate([mesh.faces[:, [0, 1]], mesh.faces[:, [1, 2]], mesh.faces[:, [2, 0]]])
    e = np.unique(np.sort(e, axis=1), axis=0)
    p, q = mesh.vertices[e[:, 0]], mesh.vertices[e[:, 1]]
    dp, dq = p[:, axis] - value, q[:, axis] - value
    cross = (dp < 0) != (dq < 0)
    t = dp[cross] / (dp[cross] - dq[cross])
    return p[cross] + t[:, None] * (q[cross] - p[cross])


def slice_contours(shape: BiventricularShape, include_lax: bool = True) -> dict[str, list[tuple[int, np.ndarray]]]:
    """Labelled contour points on the 9 SAX planes (slice 0-8) and optionally the LAX plane (slice 9)."""
    surfaces = {LV_ENDO: lv_endo_surface(shape.lv), LV_EPI: lv_epi_surface(shape.lv), RV: shape.rv}
    out: dict[str, list[tuple[int, np.ndarray]]] = {s: [] for s in STRUCTURES}
    for k, z in enumerate(sax_plane_heights(shape)):
        for name, surf in surfaces.items():
            pts = plane_section(surf, 2, z)
            if len(pts):
                out[name].append((k, pts))
    if include_lax:
        for name, surf in surfaces.items():
            pts = plane_section(surf, 1, 0.0)
            if len(pts):
                out[name].append((SAX_SLICES, pts))
    return out


# ---------------------------------------------------------------------------
# Metadata
# ---------------------------------------------------------------------------


def sample_metadata(latents, seed=0, noise_scale: float = 1.0) -> MetadataRecord:
    """Patient record correlated with the latents.

    Height, weight and BSA rise with the scale latent; age tracks RV breadth
    closely.  ``noise_scale = 0`` removes the additive noise.
    """
    z = np.zeros(4)
    lat = np.asarray(latents, dtype=np.float64).ravel()
    z[: lat.size] = lat
    rng = np.random.default_rng(seed)
    e = noise_scale * rng.standard_normal(6)
    height = 170.0 + 9.0 * z[0] + 3.0 * e[0]
    weight = 76.0 + 12.0 * z[0] + 4.0 * e[1]
    age = 55.0 + 12.0 * z[3] + 1.0 * e[2]
    hr = 65.0 + 8.0 * e[3]
    dbp = 80.0 + 8.0 * e[4]
    sbp = 135.0 + 15.0 * e[5]
    sex = "male" if rng.random() < 0.5 else "female"
    smoking = ("never", "previous", "current")[int(rng.choice(3, p=[0.55, 0.35, 0.10]))]
    alcohol = "yes" if rng.random() < 0.9 else "no"
    return MetadataRecord(
        age=max(age, 1.0),
        weight=max(weight, 1.0),
        height=max(height, 1.0),
        bmi=max(weight, 1.0) / (max(height, 1.0) / 100.0) ** 2,
        bsa=math.sqrt(max(height, 1.0) * max(weight, 1.0) / 3600.0),
        heart_rate=max(hr, 1.0),
        dbp=max(dbp, 1.0),
        sbp=max(sbp, 1.0),
        sex=sex,
        smoking=smoking,
        alcohol=alcohol,
    )


# ---------------------------------------------------------------------------
# Cohort
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PhantomConfig:
    subject_count: int = 234
    latent_amplitudes: tuple = (1.0, 1.0, 1.0, 1.0)
    noise_sigma: float = 0.05
    seed: int = 0
    test_fraction: float = 1.0 / 7.0
    pose_jitter_deg: float = 5.0
    pose_jitter_mm: float = 5.0
    rv_intensity: float = BACKGROUND
    metadata_noise: float = 1.0
    lax_contours: bool = True

    def __post_init__(self):
        object.__setattr__(self, "latent_amplitudes", tuple(float(a) for a in self.latent_amplitudes))
        if len(self.latent_amplitudes) != len(LATENT_NAMES):
            raise PhantomError(f"need {len(LATENT_NAMES)} latent amplitudes")
        if any(a < 0 for a in self.latent_amplitudes) or self.noise_sigma < 0:
            raise PhantomError("latent amplitudes and noise_sigma must be >= 0")
        if not 0 < self.test_fraction < 1:
            raise PhantomError("test_fraction must lie in (0, 1)")


@dataclass(frozen=True, eq=False)
class PhantomSubject:
    subject_id: str
    latents: np.ndarray
    pose: RigidTransform
    canonical: BiventricularShape  # image frame
    shape: BiventricularShape  # posed ground truth
    sax: np.ndarray
    lax: np.ndarray
    metadata: MetadataRecord
    contours: dict = field(default_factory=dict)


def subject_id(index: int) -> str:
    return f"S{index:04d}"


def make_subject(config: PhantomConfig, index: int) -> PhantomSubject:
    """Subject ``index``; its streams derive from (seed, index) alone."""
    ss = np.random.SeedSequence([config.seed, index])
    s_lat, s_pose, s_img, s_meta = ss.spawn(4)
    amp = np.asarray(config.latent_amplitudes)
    latents = amp * np.random.default_rng(s_lat).uniform(-1.0, 1.0, len(amp))
    canonical = make_phantom(latents)
    rng = np.random.default_rng(s_pose)
    axis = rng.standard_normal(3)
    angle = np.deg2rad(config.pose_jitter_deg) * rng.uniform(-1.0, 1.0)
    pose = RigidTransform(
        rotation_about(axis, angle), config.pose_jitter_mm * rng.uniform(-1.0, 1.0, 3)
    )
    shape = canonical.transformed(pose.apply)
    sax, lax = render_slices(canonical, config.noise_sigma, s_img, config.rv_intensity)
    contours = {
        name: [(k, pose.apply(p)) for k, p in items]
        for name, items in slice_contours(canonical, config.lax_contours).items()
    }
    meta = sample_metadata(latents, s_meta, config.metadata_noise)
    return PhantomSubject(subject_id(index), latents, pose, canonical, shape, sax, lax, meta, contours)


def split_assignment(config: PhantomConfig) -> list[str]:
    """'train' / 'test' per subject; ceil(n * test_fraction) seeded test picks."""
    n = config.subject_count
    n_test = math.ceil(n * config.test_fraction)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2**31 - 1]))
    test = set(rng.permutation(n)[:n_test].tolist())
    return ["test" if i in test else "train" for i in range(n)]


def template_shape() -> BiventricularShape:
    return make_phantom(np.zeros(4))


def write_subject(root: Path, subj: PhantomSubject) -> None:
    d = root / "subjects" / subj.subject_id
    d.mkdir(parents=True, exist_ok=True)
    write_shape(d / "shape.ply", subj.shape)
    write_contours(d / "contours.csv", subj.contours)
    write_tensor(d / "sax.tnsr", subj.sax)
    write_tensor(d / "lax.tnsr", subj.lax)
    write_metadata_csv(d / "metadata.csv", [subj.metadata])


def generate_cohort(config: PhantomConfig, out_dir, map_fn: Callable = map) -> list[str]:
    """Write the cohort under ``out_dir``; returns subject ids in index order.

    ``map_fn`` must preserve order (e.g. ``ThreadPoolExecutor.map``); output
    does not depend on it.
    """
    if config.subject_count < 10:
        raise PhantomError("a cohort needs at least 10 subjects")
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    write_shape(root / "template.ply", template_shape())
    splits = split_assignment(config)

    def work(i):
        subj = make_subject(config, i)
        write_subject(root, subj)
        return subj.subject_id, subj.latents

    results = list(map_fn(work, range(config.subject_count)))
    with open(root / "manifest.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["subject_id", "split"])
        for (sid, _), split in zip(results, splits):
            wr.writerow([sid, split])
    with open(root / "latents.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["subject_id", *LATENT_NAMES])
        for sid, lat in results:
            wr.writerow([sid, *(f"{v:.17g}" for v in lat)])
    return [sid for sid, _ in results]


def read_manifest(root) -> list[tuple[str, str]]:
    with open(Path(root) / "manifest.csv", newline="") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames != ["subject_id", "split"]:
            raise ValueError(f"{root}/manifest.csv: unexpected header {rd.fieldnames}")
        return [(r["subject_id"], r["split"]) for r in rd]


def read_latents(root) -> dict[str, np.ndarray]:
    with open(Path(root) / "latents.csv", newline="") as fh:
        return {r["subject_id"]: np.array([float(r[n]) for n in LATENT_NAMES]) for r in csv.DictReader(fh)}
