"""Least-squares Procrustes alignment of corresponding point sets."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np


class DegeneratePointSetError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class RigidTransform:
    """``x -> scale * rotation @ x + translation``."""

    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-9) or abs(np.linalg.det(r) - 1) > 1e-9:
            raise ValueError("rotation must be orthonormal with determinant +1")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "scale", float(self.scale))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3), 1.0)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform ``(n, 3)`` points or a flat shape vector (same layout out)."""
        p = np.asarray(points, dtype=np.float64)
        out = self.scale * (p.reshape(-1, 3) @ self.rotation.T) + self.translation
        return out.reshape(p.shape)

    def compose(self, first: "RigidTransform") -> "RigidTransform":
        """Transform equal to applying ``first`` and then ``self``."""
        return RigidTransform(
            self.rotation @ first.rotation,
            self.scale * self.rotation @ first.translation + self.translation,
            self.scale * first.scale,
        )


def rotation_about(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * kx @ kx


def _as_points(s) -> np.ndarray:
    return np.asarray(s, dtype=np.float64).reshape(-1, 3)


def _check_spread(p: np.ndarray, what: str) -> None:
    sv = np.linalg.svd(p - p.mean(axis=0), compute_uv=False)
    if len(p) < 3 or sv[0] == 0 or sv[1] <= 1e-12 * sv[0]:
        raise DegeneratePointSetError(f"{what} points are coincident or collinear")


def procrustes_pair(source, target, with_scale: bool = False) -> RigidTransform:
    """Proper rotation, translation (and optional scale) taking source onto target.

    Both inputs are corresponding point sets, either ``(n, 3)`` arrays or flat
    interleaved shape vectors.  Reflections are never returned.
    """
    src, dst = _as_points(source), _as_points(target)
    if src.shape != dst.shape:
        raise ValueError(f"point counts differ: {src.shape} vs {dst.shape}")
    _check_spread(src, "source")
    _check_spread(dst, "target")
    mu_s, mu_t = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - mu_s, dst - mu_t
    u, sigma, vt = np.linalg.svd(a.T @ b)
    d = np.ones(3)
    d[2] = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    rotation = vt.T @ np.diag(d) @ u.T
    scale = float(np.sum(sigma * d) / np.sum(a * a)) if with_scale else 1.0
    translation = mu_t - scale * rotation @ mu_s
    return RigidTransform(rotation, translation, scale)


def align(source, target, with_scale: bool = False) -> np.ndarray:
    """``source`` mapped onto ``target``, same layout as ``source``."""
    return procrustes_pair(source, target, with_scale).apply(source)


def residual(a, b) -> float:
    """Sum of squared point distances."""
    d = _as_points(a) - _as_points(b)
    return float(np.sum(d * d))


class GPAResult(NamedTuple):
    aligned: np.ndarray  # (M, 3N)
    mean: np.ndarray  # (3N,)
    residuals: list[float]
    iterations: int


def _normalise(mean: np.ndarray, with_scale: bool) -> np.ndarray:
    p = _as_points(mean)
    p = p - p.mean(axis=0)
    if with_scale:
        p = p / np.sqrt(np.sum(p * p))
    return p.ravel()


def generalized_procrustes(
    shapes: Sequence[np.ndarray],
    tol: float = 1e-10,
    max_iter: int = 100,
    with_scale: bool = True,
) -> GPAResult:
    """Iteratively align every shape to a consensus mean.

    The consensus starts from the first shape, is re-centred each round and,
    when ``with_scale`` is set, rescaled to unit centroid size.  Iteration
    stops when the relative change of the consensus drops below ``tol``.
    """
    x = np.asarray([np.asarray(s, dtype=np.float64).ravel() for s in shapes])
    if x.ndim != 2 or len(x) < 2:
        raise ValueError("generalized Procrustes needs at least two shapes")
    mean = _normalise(x[0], with_scale)
    residuals: list[float] = []
    for it in range(1, max_iter + 1):
        aligned = np.array([align(s, mean, with_scale) for s in x])
        residuals.append(float(np.sum((aligned - mean) ** 2)))
        new_mean = _normalise(aligned.mean(axis=0), with_scale)
        change = np.linalg.norm(new_mean - mean) / max(np.linalg.norm(mean), 1e-300)
        mean = new_mean
        if change < tol:
            return GPAResult(aligned, mean, residuals, it)
    raise ConvergenceError(
        f"generalized Procrustes did not converge in {max_iter} iterations "
        f"(last relative mean change {change:.3g}, residual {residuals[-1]:.6g})"
    )
