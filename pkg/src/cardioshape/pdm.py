"""Point distribution model: PCA of aligned shape vectors.

A shape is approximated as ``mean + modes @ b``; the coefficients ``b`` are
bounded by ``beta * sqrt(eigenvalues)`` and mapped to the unit interval for
sigmoid-output regressors.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .mesh_core import BiventricularShape, shape_from_ply, shape_to_ply

DEFAULT_BETA = 3.0
DEFAULT_VARIANCE_FRACTION = 0.997
DEGENERATE_EIGENVALUE_RATIO = 1e-12
MAGIC = b"PDM1"


class PDMError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PointDistributionModel:
    mean: np.ndarray  # (3N,)
    modes: np.ndarray  # (3N, l), orthonormal columns
    eigenvalues: np.ndarray  # (l,), non-increasing, > 0
    beta: float = DEFAULT_BETA
    training_count: int = 0
    topology: Optional[BiventricularShape] = None

    def __post_init__(self):
        for name in ("mean", "modes", "eigenvalues"):
            a = np.array(getattr(self, name), dtype=np.float64)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if self.modes.shape != (self.mean.size, self.eigenvalues.size):
            raise PDMError(
                f"modes shape {self.modes.shape} inconsistent with mean "
                f"{self.mean.size} and {self.eigenvalues.size} eigenvalues"
            )

    @property
    def n_modes(self) -> int:
        return self.eigenvalues.size

    @property
    def point_count(self) -> int:
        return self.mean.size // 3

    def bounds(self, n: Optional[int] = None, beta: Optional[float] = None) -> np.ndarray:
        beta = self.beta if beta is None else beta
        return beta * np.sqrt(self.eigenvalues[: self.n_modes if n is None else n])


def pca_spectrum(aligned: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mean, eigenvectors and eigenvalues of the sample covariance.

    ``aligned`` holds one shape per row.  Uses the thin SVD of the centred
    data, so the 3N x 3N covariance is never formed; eigenvalues are
    ``sigma**2 / (M - 1)``.  Columns are sign-fixed so that each one's
    largest-magnitude entry is positive.
    """
    x = np.asarray(aligned, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise PDMError("need at least two aligned shapes of equal length")
    mean = x.mean(axis=0)
    _, sigma, vt = np.linalg.svd(x - mean, full_matrices=False)
    modes = vt.T
    flip = np.sign(modes[np.argmax(np.abs(modes), axis=0), np.arange(modes.shape[1])])
    flip[flip == 0] = 1.0
    return mean, modes * flip, sigma**2 / (len(x) - 1)


def select_mode_count(eigenvalues: np.ndarray, variance_fraction: float, total: float) -> int:
    """Smallest l whose leading eigenvalues reach the requested variance fraction."""
    cumulative = np.cumsum(eigenvalues) / total
    return int(min(np.searchsorted(cumulative, variance_fraction - 1e-12) + 1, len(eigenvalues)))


def build_pdm(
    aligned: Sequence[np.ndarray],
    variance_fraction: float = DEFAULT_VARIANCE_FRACTION,
    beta: float = DEFAULT_BETA,
    max_modes: Optional[int] = None,
    topology: Optional[BiventricularShape] = None,
) -> PointDistributionModel:
    if not 0 < variance_fraction <= 1:
        raise PDMError("variance_fraction must lie in (0, 1]")
    x = np.asarray([np.asarray(s, dtype=np.float64).ravel() for s in aligned])
    mean, modes, eig = pca_spectrum(x)
    spread = float(np.abs(x).max()) * 1e-12
    if eig.size == 0 or eig[0] <= spread * spread:
        raise PDMError("shapes are identical: no modes of variation")
    total = float(eig.sum())
    keep = eig >= DEGENERATE_EIGENVALUE_RATIO * eig[0]
    modes, eig = modes[:, keep], eig[keep]
    l = select_mode_count(eig, variance_fraction, total)
    if max_modes is not None:
        l = min(l, max_modes)
    return PointDistributionModel(
        mean, modes[:, :l], eig[:l], beta=beta, training_count=len(x), topology=topology
    )


def synthesize(model: PointDistributionModel, b) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64).ravel()
    if b.size > model.n_modes:
        raise PDMError(f"{b.size} parameters for a {model.n_modes}-mode model")
    return model.mean + model.modes[:, : b.size] @ b


def project(model: PointDistributionModel, s) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64).ravel()
    if s.size != model.mean.size:
        raise PDMError(f"shape vector length {s.size} != {model.mean.size}")
    return model.modes.T @ (s - model.mean)


def clamp(model: PointDistributionModel, b, beta: Optional[float] = None) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64).ravel()
    lim = model.bounds(b.size, beta)
    return np.clip(b, -lim, lim)


def encode_unit(model: PointDistributionModel, b) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64).ravel()
    lim = model.bounds(b.size)
    if np.any(lim <= 0):
        raise PDMError("unit encoding needs beta > 0")
    if np.any(np.abs(b) > lim * (1 + 1e-12)):
        raise PDMError("parameters must be clamped before unit encoding")
    return (b + lim) / (2 * lim)


def decode_unit(model: PointDistributionModel, u) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64).ravel()
    if np.any(u < 0) or np.any(u > 1) or not np.all(np.isfinite(u)):
        raise PDMError("unit-encoded parameters must lie in [0, 1]")
    lim = model.bounds(u.size)
    return u * 2 * lim - lim


# ---------------------------------------------------------------------------
# PDM1 file
# ---------------------------------------------------------------------------


def save_pdm(path, model: PointDistributionModel) -> None:
    buf = io.BytesIO()
    n, l = model.point_count, model.n_modes
    buf.write(MAGIC)
    buf.write(struct.pack("<QQQd", n, model.training_count, l, model.beta))
    buf.write(model.mean.astype("<f8").tobytes())
    buf.write(model.eigenvalues.astype("<f8").tobytes())
    buf.write(model.modes.astype("<f8").tobytes(order="F"))
    topo = shape_to_ply(model.topology).encode("ascii") if model.topology is not None else b""
    buf.write(struct.pack("<Q", len(topo)))
    buf.write(topo)
    Path(path).write_bytes(buf.getvalue())


def load_pdm(path) -> PointDistributionModel:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise PDMError(f"{path}: not a PDM1 file (magic {data[:4]!r})")
    n, m, l, beta = struct.unpack_from("<QQQd", data, 4)
    off = 4 + 32
    mean = np.frombuffer(data, "<f8", 3 * n, off)
    off += 24 * n
    eig = np.frombuffer(data, "<f8", l, off)
    off += 8 * l
    modes = np.frombuffer(data, "<f8", 3 * n * l, off).reshape((3 * n, l), order="F")
    off += 24 * n * l
    (topo_len,) = struct.unpack_from("<Q", data, off)
    off += 8
    topo = shape_from_ply(data[off : off + topo_len].decode("ascii")) if topo_len else None
    return PointDistributionModel(mean, modes, eig, beta=beta, training_count=m, topology=topo)
