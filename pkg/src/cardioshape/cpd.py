"""Non-rigid Coherent Point Drift and template-to-contour fitting.

The template points are the centroids of a Gaussian mixture (plus a uniform
outlier component) that is fitted to the target points by EM.  Centroids move
by a displacement field ``G @ W`` where ``G`` is the Gaussian gram matrix of
the template, which keeps the motion coherent.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import logsumexp

from .alignment import RigidTransform, procrustes_pair
from .mesh_core import LV_ENDO, LV_EPI, RV, BiventricularShape, from_shape_vector

log = logging.getLogger(__name__)

STRUCTURES = (LV_ENDO, LV_EPI, RV)
MIN_CONTOUR_POINTS = 10


class CpdError(RuntimeError):
    pass


@dataclass(frozen=True)
class CpdConfig:
    kernel_width: float = 2.0  # in units of the template's RMS radius
    regularization_weight: float = 3.0
    outlier_weight: float = 0.1
    max_iter: int = 150
    sigma_tol: float = 1e-8

    def __post_init__(self):
        if not self.kernel_width > 0 or not self.regularization_weight > 0:
            raise ValueError("kernel_width and regularization_weight must be positive")
        if not 0 <= self.outlier_weight < 1:
            raise ValueError("outlier_weight must lie in [0, 1)")
        if self.max_iter < 1 or not self.sigma_tol > 0:
            raise ValueError("max_iter must be >= 1 and sigma_tol positive")


@dataclass(frozen=True, eq=False)
class NonRigidResult:
    deformed_template: np.ndarray  # (M, 3), mm
    coefficients: np.ndarray  # W, (M, 3), mm
    final_sigma2: float  # normalised units
    iterations_used: int
    objective: list[float] = field(default_factory=list)


def gaussian_gram(points: np.ndarray, width: float) -> np.ndarray:
    d2 = np.sum((points[:, None, :] - points[None, :, :]) ** 2, axis=-1)
    return np.exp(-d2 / (2.0 * width**2))


def _neg_log_likelihood(d2, sigma2, w, W, G):
    m, n = d2.shape
    dim = 3
    log_gauss = -d2 / (2 * sigma2) - 0.5 * dim * np.log(2 * np.pi * sigma2) + np.log((1 - w) / m)
    if w > 0:
        terms = np.vstack([log_gauss, np.full((1, n), np.log(w / n))])
    else:
        terms = log_gauss
    return -float(np.sum(logsumexp(terms, axis=0)))


def register_nonrigid(template, target, config: CpdConfig = CpdConfig()) -> NonRigidResult:
    """Deform ``template`` (M x 3) onto ``target`` (N x 3).

    Both sets are expressed in a frame centred on the template centroid and
    scaled by the template RMS radius; the returned displacement coefficients
    are in millimetres, so ``template + G @ W`` reproduces the deformed set.
    ``objective`` holds the penalised negative log-likelihood after each EM
    step (index 0 is the starting point), which EM keeps non-increasing.
    """
    y_mm = np.asarray(template, dtype=np.float64)
    x_mm = np.asarray(target, dtype=np.float64)
    if y_mm.ndim != 2 or x_mm.ndim != 2 or y_mm.shape[1] != 3 or x_mm.shape[1] != 3:
        raise ValueError("template and target must be (n, 3) arrays")
    if len(y_mm) == 0 or len(x_mm) == 0:
        raise ValueError("template and target must be non-empty")
    if not (np.all(np.isfinite(y_mm)) and np.all(np.isfinite(x_mm))):
        raise ValueError("NaN or infinite coordinates in CPD input")

    centre = y_mm.mean(axis=0)
    scale = float(np.sqrt(np.mean(np.sum((y_mm - centre) ** 2, axis=1)))) or 1.0
    y = (y_mm - centre) / scale
    x = (x_mm - centre) / scale
    m, n = len(y), len(x)
    dim = 3
    w = config.outlier_weight
    lam = config.regularization_weight
    G = gaussian_gram(y, config.kernel_width)
    W = np.zeros_like(y)
    t = y.copy()

    d2 = np.sum((t[:, None, :] - x[None, :, :]) ** 2, axis=-1)
    sigma2 = float(d2.sum() / (dim * m * n))
    objective = [_neg_log_likelihood(d2, sigma2, w, W, G)]
    iterations = 0
    for iterations in range(1, config.max_iter + 1):
        # E-step: posterior of centroid m for point n, with the outlier term in the denominator
        log_num = -d2 / (2 * sigma2)
        c = (2 * np.pi * sigma2) ** (dim / 2) * (w / (1 - w)) * (m / n) if w > 0 else 0.0
        shift = log_num.max(axis=0)
        num = np.exp(log_num - shift)
        with np.errstate(over="ignore"):
            den = num.sum(axis=0) + c * np.exp(-shift)
        P = num / den
        p1 = P.sum(axis=1)
        px = P @ x
        np_total = float(p1.sum())

        # M-step: (diag(P1) G + lam sigma2 I) W = P X - diag(P1) Y
        A = p1[:, None] * G + lam * sigma2 * np.eye(m)
        rhs = px - p1[:, None] * y
        try:
            W = np.linalg.solve(A, rhs)
        except np.linalg.LinAlgError as exc:
            raise CpdError(
                f"singular CPD M-step system (condition number ~{np.linalg.cond(A):.3g})"
            ) from exc
        if not np.all(np.isfinite(W)):
            raise CpdError(f"non-finite CPD solution (condition ~{np.linalg.cond(A):.3g})")
        t = y + G @ W
        sigma2_old = sigma2
        d2 = np.sum((t[:, None, :] - x[None, :, :]) ** 2, axis=-1)
        # same value as the expanded trace form, without its cancellation near convergence
        sigma2 = max(float(np.sum(P * d2)) / (np_total * dim), 1e-300)
        objective.append(
            _neg_log_likelihood(d2, sigma2, w, W, G) + 0.5 * lam * float(np.sum(W * (G @ W)))
        )
        if abs(sigma2 - sigma2_old) < config.sigma_tol:
            break

    return NonRigidResult(
        deformed_template=t * scale + centre,
        coefficients=W * scale,
        final_sigma2=sigma2,
        iterations_used=iterations,
        objective=objective,
    )


# ---------------------------------------------------------------------------
# Template fitting
# ---------------------------------------------------------------------------


def structure_points(shape: BiventricularShape) -> dict[str, np.ndarray]:
    lv = shape.lv.vertices
    return {LV_ENDO: lv[: shape.n_endo], LV_EPI: lv[shape.n_endo :], RV: shape.rv.vertices}


def _check_contours(contours: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    out = {}
    for name in STRUCTURES:
        pts = np.asarray(contours.get(name, np.empty((0, 3))), dtype=np.float64).reshape(-1, 3)
        if len(pts) < MIN_CONTOUR_POINTS:
            raise CpdError(
                f"structure {name!r} has {len(pts)} contour points (need >= {MIN_CONTOUR_POINTS})"
            )
        out[name] = pts
    return out


def rigid_prealign(
    template: BiventricularShape,
    contours: Mapping[str, np.ndarray],
    max_iter: int = 50,
    tol: float = 1e-9,
) -> RigidTransform:
    """Rigid ICP of the template onto the labelled contour points.

    Each contour point is paired with its nearest template vertex of the same
    structure and the pairs are superimposed without scaling.
    """
    contours = _check_contours(contours)
    struct_pts = structure_points(template)
    targets = np.concatenate([contours[s] for s in STRUCTURES])
    total = RigidTransform(
        np.eye(3),
        targets.mean(axis=0) - np.concatenate([struct_pts[s] for s in STRUCTURES]).mean(axis=0),
    )
    trees = {s: cKDTree(struct_pts[s]) for s in STRUCTURES}
    prev = np.inf
    for _ in range(max_iter):
        # contour -> template pairs in the template frame
        inv_pts = [(contours[s] - total.translation) @ total.rotation for s in STRUCTURES]
        matched = []
        for s, q in zip(STRUCTURES, inv_pts):
            _, idx = trees[s].query(q)
            matched.append(struct_pts[s][idx])
        src = np.concatenate(matched)
        total = procrustes_pair(src, targets, with_scale=False)
        err = float(np.mean(np.sum((total.apply(src) - targets) ** 2, axis=1)))
        if prev - err < tol * max(prev, 1.0):
            break
        prev = err
    return total


def fit_template_to_contours(
    template: BiventricularShape,
    contours: Mapping[str, np.ndarray],
    config: CpdConfig = CpdConfig(),
) -> BiventricularShape:
    """Rigidly pre-align the template, then deform each structure by CPD.

    Only vertex positions change; faces and vertex ordering are the template's.
    """
    contours = _check_contours(contours)
    pose = rigid_prealign(template, contours)
    moved = template.transformed(pose.apply)
    parts = structure_points(moved)
    fitted = []
    for name in STRUCTURES:
        res = register_nonrigid(parts[name], contours[name], config)
        log.debug("CPD %s: %d iterations, sigma2 %.3g", name, res.iterations_used, res.final_sigma2)
        fitted.append(res.deformed_template)
    return from_shape_vector(np.concatenate(fitted).ravel(), template)


def write_contours(path, contours: Mapping[str, list[tuple[int, np.ndarray]]]) -> None:
    """Write ``{structure: [(slice_index, points), ...]}`` as contour CSV."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["structure", "slice_index", "x", "y", "z"])
        for name in STRUCTURES:
            for slice_index, pts in contours.get(name, []):
                for x, y, z in np.asarray(pts).tolist():
                    wr.writerow([name, slice_index, f"{x:.17g}", f"{y:.17g}", f"{z:.17g}"])


def read_contours(path) -> dict[str, np.ndarray]:
    """Contour CSV to ``{structure: (n, 3) points}``."""
    found: dict[str, list[list[float]]] = {}
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames != ["structure", "slice_index", "x", "y", "z"]:
            raise ValueError(f"{path}: unexpected contour CSV header {rd.fieldnames}")
        for row in rd:
            found.setdefault(row["structure"], []).append(
                [float(row["x"]), float(row["y"]), float(row["z"])]
            )
    return {k: np.array(v).reshape(-1, 3) for k, v in found.items()}
