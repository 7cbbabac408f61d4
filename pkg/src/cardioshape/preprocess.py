"""Image normalisation, ROI resampling, metadata encoding and tensor files."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

SAX_SLICES = 9
SAX_SIZE = (64, 64)
LAX_ROI_SIZE = (80, 60)
LAX_SIZE = (80, 80)
ROI_SPACING_MM = 2.0
SATURATION_PERCENTILE = 99.8

CONTINUOUS_FIELDS = ("age", "weight", "height", "bmi", "bsa", "heart_rate", "dbp", "sbp")
CATEGORICAL_FIELDS = ("sex", "smoking", "alcohol")
METADATA_FIELDS = CONTINUOUS_FIELDS + CATEGORICAL_FIELDS
CATEGORY_CODES = {
    "sex": {"female": 0.0, "male": 1.0},
    "smoking": {"never": 0.0, "previous": 0.5, "current": 1.0},
    "alcohol": {"no": 0.0, "yes": 1.0},
}
TENSOR_MAGIC = b"TNSR"


class PreprocessError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SliceImage:
    pixels: np.ndarray
    spacing: float = ROI_SPACING_MM

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.float64)
        if px.ndim != 2:
            raise PreprocessError("slice image must be 2D")
        if not self.spacing > 0:
            raise PreprocessError("pixel spacing must be positive")
        if px.size and (px.min() < 0 or px.max() > 1):
            raise PreprocessError("slice pixels must lie in [0, 1]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)


def intensity_normalize(raw) -> np.ndarray:
    """Saturate the top 0.2 % of intensities, then map [min, saturation] to [0, 1].

    The saturation level is the 99.8th percentile with linear interpolation
    between order statistics.  A constant image maps to zeros.
    """
    x = np.asarray(raw, dtype=np.float64)
    if x.size == 0:
        raise PreprocessError("empty image")
    if not np.all(np.isfinite(x)):
        raise PreprocessError("non-finite intensities")
    top = np.percentile(x, SATURATION_PERCENTILE)
    x = np.minimum(x, top)
    lo = x.min()
    if top <= lo:
        return np.zeros_like(x)
    return (x - lo) / (top - lo)


def bilinear_sample(image: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Bilinear interpolation at fractional pixel coordinates; zero outside."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    fr = rows - r0
    fc = cols - c0
    out = np.zeros(np.broadcast(rows, cols).shape)
    for dr, wr in ((0, 1 - fr), (1, fr)):
        for dc, wc in ((0, 1 - fc), (1, fc)):
            rr, cc = r0 + dr, c0 + dc
            ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
            val = np.where(ok, img[np.clip(rr, 0, h - 1), np.clip(cc, 0, w - 1)], 0.0)
            out = out + wr * wc * val
    return out


def extract_roi(
    image,
    spacing: float,
    center,
    angle: float,
    out_size: tuple[int, int] = SAX_SIZE,
    out_spacing: float = ROI_SPACING_MM,
) -> np.ndarray:
    """Resample a rotated ROI of ``out_size`` (rows, cols) around ``center``.

    Pixel (i, j) of the input sits at physical ``(x, y) = (j, i) * spacing``.
    Output pixel (i, j) samples ``center + R(angle) @ offset`` where the offset
    is measured from the ROI centre in ``out_spacing`` steps.
    """
    if not spacing > 0 or not out_spacing > 0:
        raise PreprocessError("pixel spacing must be positive")
    h, w = out_size
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    ox = (jj - (w - 1) / 2.0) * out_spacing
    oy = (ii - (h - 1) / 2.0) * out_spacing
    c, s = np.cos(angle), np.sin(angle)
    px = center[0] + c * ox - s * oy
    py = center[1] + s * ox + c * oy
    return bilinear_sample(image, py / spacing, px / spacing)


def pad_lax(img) -> np.ndarray:
    """Centre an 80 x 60 LAX ROI in an 80 x 80 zero frame."""
    a = np.asarray(img, dtype=np.float64)
    if a.shape != LAX_ROI_SIZE:
        raise PreprocessError(f"LAX ROI must be {LAX_ROI_SIZE}, got {a.shape}")
    pad = (LAX_SIZE[1] - LAX_ROI_SIZE[1]) // 2
    return np.pad(a, ((0, 0), (pad, pad)))


# ---------------------------------------------------------------------------
# Metadata
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetadataRecord:
    age: float
    weight: float
    height: float
    bmi: float
    bsa: float
    heart_rate: float
    dbp: float
    sbp: float
    sex: str
    smoking: str
    alcohol: str

    def __post_init__(self):
        for name in CONTINUOUS_FIELDS:
            v = float(getattr(self, name))
            if not np.isfinite(v) or v <= 0:
                raise PreprocessError(f"{name} must be finite and positive, got {v}")
            object.__setattr__(self, name, v)
        for name in CATEGORICAL_FIELDS:
            if getattr(self, name) not in CATEGORY_CODES[name]:
                raise PreprocessError(
                    f"unknown {name} value {getattr(self, name)!r}; "
                    f"expected one of {sorted(CATEGORY_CODES[name])}"
                )

    def as_row(self) -> list[str]:
        return [f"{getattr(self, f):.17g}" for f in CONTINUOUS_FIELDS] + [
            getattr(self, f) for f in CATEGORICAL_FIELDS
        ]

    @classmethod
    def from_row(cls, row: Mapping[str, str]) -> "MetadataRecord":
        kw = {f: float(row[f]) for f in CONTINUOUS_FIELDS}
        kw.update({f: row[f] for f in CATEGORICAL_FIELDS})
        return cls(**kw)


@dataclass(frozen=True)
class MetadataBounds:
    """Per-field min/max of the continuous fields over a training cohort."""

    lower: dict = field(default_factory=dict)
    upper: dict = field(default_factory=dict)

    @classmethod
    def fit(cls, records: Sequence[MetadataRecord]) -> "MetadataBounds":
        if not records:
            raise PreprocessError("cannot fit bounds on an empty cohort")
        lo = {f: min(getattr(r, f) for r in records) for f in CONTINUOUS_FIELDS}
        hi = {f: max(getattr(r, f) for r in records) for f in CONTINUOUS_FIELDS}
        return cls(lo, hi)

    def to_dict(self) -> dict:
        return {"lower": dict(self.lower), "upper": dict(self.upper)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetadataBounds":
        return cls(dict(d["lower"]), dict(d["upper"]))


def encode_metadata(rec: MetadataRecord, bounds: MetadataBounds) -> np.ndarray:
    """Eight min-max scaled continuous fields, then sex, smoking, alcohol codes."""
    out = np.empty(len(METADATA_FIELDS))
    for i, name in enumerate(CONTINUOUS_FIELDS):
        lo, hi = bounds.lower[name], bounds.upper[name]
        if not hi > lo:
            raise PreprocessError(f"degenerate bounds for {name}: [{lo}, {hi}]")
        out[i] = min(max((getattr(rec, name) - lo) / (hi - lo), 0.0), 1.0)
    for i, name in enumerate(CATEGORICAL_FIELDS, start=len(CONTINUOUS_FIELDS)):
        value = getattr(rec, name)
        if value not in CATEGORY_CODES[name]:
            raise PreprocessError(f"unknown {name} value {value!r}")
        out[i] = CATEGORY_CODES[name][value]
    return out


def write_metadata_csv(path, records: Sequence[MetadataRecord]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(METADATA_FIELDS)
        for rec in records:
            wr.writerow(rec.as_row())


def read_metadata_csv(path) -> list[MetadataRecord]:
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if tuple(rd.fieldnames or ()) != METADATA_FIELDS:
            raise PreprocessError(f"{path}: metadata header must be {','.join(METADATA_FIELDS)}")
        return [MetadataRecord.from_row(row) for row in rd]


# ---------------------------------------------------------------------------
# Network inputs
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SubjectSample:
    sax: np.ndarray  # (9, 64, 64)
    lax: np.ndarray  # (80, 80)
    meta: np.ndarray  # (11,)
    reference_params: np.ndarray | None = None  # unit-encoded

    def __post_init__(self):
        sax = np.asarray(self.sax, dtype=np.float64)
        lax = np.asarray(self.lax, dtype=np.float64)
        meta = np.asarray(self.meta, dtype=np.float64)
        if sax.ndim != 3 or lax.ndim != 2 or meta.shape != (len(METADATA_FIELDS),):
            raise PreprocessError(
                f"bad sample dims: sax {sax.shape}, lax {lax.shape}, meta {meta.shape}"
            )
        for name, a in (("sax", sax), ("lax", lax), ("meta", meta)):
            if a.min() < 0 or a.max() > 1:
                raise PreprocessError(f"{name} values must lie in [0, 1]")
        object.__setattr__(self, "sax", sax)
        object.__setattr__(self, "lax", lax)
        object.__setattr__(self, "meta", meta)


def write_tensor(path, array) -> None:
    a = np.ascontiguousarray(array, dtype="<f4")
    header = TENSOR_MAGIC + struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape)
    Path(path).write_bytes(header + a.tobytes())


def read_tensor(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != TENSOR_MAGIC:
        raise PreprocessError(f"{path}: not a TNSR file")
    (rank,) = struct.unpack_from("<I", data, 4)
    dims = struct.unpack_from(f"<{rank}I", data, 8)
    off = 8 + 4 * rank
    count = int(np.prod(dims)) if rank else 1
    if len(data) != off + 4 * count:
        raise PreprocessError(f"{path}: TNSR payload size mismatch")
    return np.frombuffer(data, "<f4", count, off).reshape(dims).copy()
