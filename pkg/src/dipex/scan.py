"""Scan geometry, field-sample containers and the dataset CSV format.

Field samples are stored against two generic tangent directions per point
(``tangent_u``, ``tangent_v``) instead of fixed cylindrical components.  On a
cylinder ``tangent_u`` is z-hat (E_z) and ``tangent_v`` is phi-hat (E_phi).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from .errors import GeometryError, SchemaError

ORTHO_TOL = 1e-12
MIN_POINT_SPACING = 1e-9

CSV_COLUMNS = ("x", "y", "z", "tux", "tuy", "tuz", "tvx", "tvy", "tvz", "mag_u", "mag_v")
CSV_PHASE_COLUMNS = ("phase_u", "phase_v")


class ScanPoint(NamedTuple):
    position: np.ndarray
    tangent_u: np.ndarray
    tangent_v: np.ndarray


def _first_close_pair(positions):
    if len(positions) < 2:
        return None
    pairs = cKDTree(positions).query_pairs(MIN_POINT_SPACING, output_type="ndarray")
    if len(pairs) == 0:
        return None
    pairs = np.sort(pairs, axis=1)
    i = np.lexsort((pairs[:, 0], pairs[:, 1]))[0]
    return int(pairs[i, 0]), int(pairs[i, 1])


@dataclass(frozen=True, eq=False)
class ScanSurface:
    """Ordered scan points with their two sampled tangent directions.

    Arrays are (P, 3) and are made read-only on construction.
    """

    positions: np.ndarray
    tangent_u: np.ndarray
    tangent_v: np.ndarray
    label: str = "surface1"

    def __post_init__(self):
        arrays = []
        for name in ("positions", "tangent_u", "tangent_v"):
            a = np.array(getattr(self, name), dtype=float, copy=True).reshape(-1, 3)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
            arrays.append(a)
        pos, tu, tv = arrays
        if len(pos) == 0:
            raise GeometryError("scan surface has no points")
        if not (len(pos) == len(tu) == len(tv)):
            raise GeometryError("positions and tangent arrays differ in length")
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(tu)) and np.all(np.isfinite(tv))):
            raise GeometryError("non-finite coordinate in scan surface")
        if np.any(np.abs(np.linalg.norm(tu, axis=1) - 1.0) > ORTHO_TOL) or np.any(
            np.abs(np.linalg.norm(tv, axis=1) - 1.0) > ORTHO_TOL
        ):
            raise GeometryError("tangent vectors must have unit length")
        if np.any(np.abs(np.einsum("ij,ij->i", tu, tv)) > ORTHO_TOL):
            raise GeometryError("tangent_u and tangent_v must be orthogonal")
        pair = _first_close_pair(pos)
        if pair is not None:
            raise GeometryError(f"points {pair[0]} and {pair[1]} are closer than {MIN_POINT_SPACING} m")

    def __len__(self):
        return len(self.positions)

    @property
    def points(self) -> list[ScanPoint]:
        return [ScanPoint(p, u, v) for p, u, v in zip(self.positions, self.tangent_u, self.tangent_v)]

    def same_grid(self, other: "ScanSurface", atol: float = 1e-12) -> int | None:
        """Index of the first point where the two grids differ, or None."""
        if len(self) != len(other):
            return min(len(self), len(other))
        for a, b in ((self.positions, other.positions), (self.tangent_u, other.tangent_u),
                     (self.tangent_v, other.tangent_v)):
            bad = np.nonzero(np.any(np.abs(a - b) > atol, axis=1))[0]
            if len(bad):
                return int(bad[0])
        return None


def _check_axis(values, name):
    arr = np.asarray(values, dtype=float).ravel()
    if arr.size == 0:
        raise GeometryError(f"{name} must be non-empty")
    if arr.size > 1 and np.any(np.diff(arr) <= 0):
        raise GeometryError(f"{name} must be strictly increasing")
    return arr


def make_cylinder(radius, heights, azimuths, axis_origin=(0.0, 0.0, 0.0), label="surface1") -> ScanSurface:
    """Cylindrical grid around a z-parallel axis; heights outer, azimuths inner."""
    if not radius > 0:
        raise GeometryError(f"cylinder radius must be positive, got {radius}")
    z = _check_axis(heights, "heights")
    phi = _check_axis(azimuths, "azimuths")
    origin = np.asarray(axis_origin, dtype=float)
    zz, pp = np.meshgrid(z, phi, indexing="ij")
    zz, pp = zz.ravel(), pp.ravel()
    c, s = np.cos(pp), np.sin(pp)
    pos = np.column_stack((radius * c, radius * s, zz)) + origin
    tu = np.tile([0.0, 0.0, 1.0], (len(zz), 1))
    tv = np.column_stack((-s, c, np.zeros_like(c)))
    return ScanSurface(pos, tu, tv, label)


def uniform_azimuths(count: int) -> np.ndarray:
    return 2.0 * np.pi * np.arange(count) / count


def make_plane(origin, u_axis, v_axis, u_samples, v_samples, label="surface1") -> ScanSurface:
    """Planar grid ``origin + a*u_hat + b*v_dir``, u outer, v inner.

    Skewed axes keep their direction for point placement; the sampled tangents
    are Gram-Schmidt orthonormalized (tangent_u = u_hat).
    """
    u = np.asarray(u_axis, dtype=float)
    v = np.asarray(v_axis, dtype=float)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise GeometryError("plane axes must be non-zero")
    u_hat, v_dir = u / nu, v / nv
    if np.linalg.norm(np.cross(u_hat, v_dir)) < 1e-9:
        raise GeometryError("plane axes are parallel")
    v_perp = v_dir - np.dot(v_dir, u_hat) * u_hat
    v_perp /= np.linalg.norm(v_perp)
    a = np.asarray(u_samples, dtype=float).ravel()
    b = np.asarray(v_samples, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise GeometryError("plane samples must be non-empty")
    aa, bb = np.meshgrid(a, b, indexing="ij")
    pos = np.asarray(origin, dtype=float) + aa.ravel()[:, None] * u_hat + bb.ravel()[:, None] * v_dir
    n = len(pos)
    return ScanSurface(pos, np.tile(u_hat, (n, 1)), np.tile(v_perp, (n, 1)), label)


@dataclass(frozen=True, eq=False)
class FieldDataset:
    """Tangential E-field magnitudes (V/m) sampled on a scan surface.

    ``phase_u``/``phase_v`` are only present for synthetic ground truth.
    """

    surface: ScanSurface
    frequency: float
    mag_u: np.ndarray
    mag_v: np.ndarray
    phase_u: np.ndarray | None = None
    phase_v: np.ndarray | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not (self.frequency > 0 and math.isfinite(self.frequency)):
            raise SchemaError(f"frequency must be positive, got {self.frequency}")
        n = len(self.surface)
        for name in ("mag_u", "mag_v", "phase_u", "phase_v"):
            val = getattr(self, name)
            if val is None:
                continue
            a = np.array(val, dtype=float, copy=True).ravel()
            if a.shape != (n,):
                raise SchemaError(f"{name} has {a.size} entries, surface has {n} points")
            if not np.all(np.isfinite(a)):
                raise SchemaError(f"{name} contains non-finite values")
            if name.startswith("mag") and np.any(a < 0):
                raise SchemaError(f"{name} contains negative magnitudes")
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if (self.phase_u is None) != (self.phase_v is None):
            raise SchemaError("phase_u and phase_v must be given together")

    @property
    def has_phase(self) -> bool:
        return self.phase_u is not None

    @property
    def label(self) -> str:
        return self.surface.label

    def magnitudes(self) -> np.ndarray:
        """Interleaved (u, v, u, v, ...) magnitudes matching transfer-matrix rows."""
        out = np.empty(2 * len(self.surface))
        out[0::2] = self.mag_u
        out[1::2] = self.mag_v
        return out

    def complex_field(self) -> np.ndarray:
        if not self.has_phase:
            raise SchemaError("dataset carries no phase information")
        out = np.empty(2 * len(self.surface), dtype=complex)
        out[0::2] = self.mag_u * np.exp(1j * self.phase_u)
        out[1::2] = self.mag_v * np.exp(1j * self.phase_v)
        return out

    @classmethod
    def from_complex(cls, surface, frequency, values, keep_phase=True):
        values = np.asarray(values, dtype=complex)
        eu, ev = values[0::2], values[1::2]
        if keep_phase:
            return cls(surface, frequency, np.abs(eu), np.abs(ev), np.angle(eu), np.angle(ev))
        return cls(surface, frequency, np.abs(eu), np.abs(ev))


def db_uv_m_to_v_m(values):
    """dBuV/m -> V/m (120 dBuV/m == 1 V/m)."""
    return 10.0 ** (np.asarray(values, dtype=float) / 20.0) * 1e-6


def write_dataset(dataset: FieldDataset, path) -> None:
    cols = list(CSV_COLUMNS) + (list(CSV_PHASE_COLUMNS) if dataset.has_phase else [])
    s = dataset.surface
    blocks = [s.positions, s.tangent_u, s.tangent_v, dataset.mag_u[:, None], dataset.mag_v[:, None]]
    if dataset.has_phase:
        blocks += [dataset.phase_u[:, None], dataset.phase_v[:, None]]
    table = np.hstack(blocks)
    buf = io.StringIO()
    buf.write(f"# frequency_hz={dataset.frequency!r}\n")
    buf.write(",".join(cols) + "\n")
    for row in table:
        buf.write(",".join(repr(float(v)) for v in row) + "\n")
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_dataset(path, db_uv_m: bool = False, label: str | None = None) -> FieldDataset:
    """Parse a dataset CSV; magnitude problems are reported with their 1-based data row."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("#"):
        raise SchemaError(f"{path}: missing '# frequency_hz=' header line")
    header = lines[0].lstrip("#").strip()
    key, _, value = header.partition("=")
    if key.strip() != "frequency_hz":
        raise SchemaError(f"{path}: missing '# frequency_hz=' header line")
    try:
        frequency = float(value)
    except ValueError:
        raise SchemaError(f"{path}: bad frequency value {value!r}") from None
    if not (frequency > 0 and math.isfinite(frequency)):
        raise SchemaError(f"{path}: frequency must be positive, got {frequency}")

    reader = csv.reader(lines[1:])
    try:
        cols = [c.strip() for c in next(reader)]
    except StopIteration:
        raise SchemaError(f"{path}: missing column header") from None
    missing = [c for c in CSV_COLUMNS if c not in cols]
    if missing:
        raise SchemaError(f"{path}: missing columns {missing}")
    has_phase = all(c in cols for c in CSV_PHASE_COLUMNS)
    if not has_phase and any(c in cols for c in CSV_PHASE_COLUMNS):
        raise SchemaError(f"{path}: phase_u and phase_v must appear together")
    wanted = list(CSV_COLUMNS) + (list(CSV_PHASE_COLUMNS) if has_phase else [])
    idx = [cols.index(c) for c in wanted]

    rows = []
    for rowno, rec in enumerate(reader, start=1):
        if not rec or all(not f.strip() for f in rec):
            continue
        if len(rec) != len(cols):
            raise SchemaError(f"{path}: row {rowno} has {len(rec)} fields, expected {len(cols)}")
        try:
            vals = [float(rec[i]) for i in idx]
        except ValueError:
            raise SchemaError(f"{path}: row {rowno} has a non-numeric field") from None
        if not all(math.isfinite(v) for v in vals):
            raise SchemaError(f"{path}: row {rowno} contains NaN or infinite values")
        if not db_uv_m and (vals[9] < 0 or vals[10] < 0):
            raise SchemaError(f"{path}: row {rowno} has a negative magnitude")
        rows.append(vals)
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    table = np.array(rows)
    pair = _first_close_pair(table[:, 0:3])
    if pair is not None:
        raise SchemaError(f"{path}: row {pair[1] + 1} duplicates the point at row {pair[0] + 1}")
    mag_u, mag_v = table[:, 9], table[:, 10]
    if db_uv_m:
        mag_u, mag_v = db_uv_m_to_v_m(mag_u), db_uv_m_to_v_m(mag_v)
    try:
        surface = ScanSurface(table[:, 0:3], table[:, 3:6], table[:, 6:9], label or path.stem)
    except GeometryError as exc:
        raise SchemaError(f"{path}: {exc}") from None
    phases = (table[:, 11], table[:, 12]) if has_phase else (None, None)
    return FieldDataset(surface, frequency, mag_u, mag_v, *phases)


def surface_from_spec(spec: dict, label: str | None = None) -> ScanSurface:
    """Build a surface from a JSON-style description.

    ``{"type": "cylinder", "radius": .5, "heights": {"start": 1, "stop": 4, "step": .25},
    "azimuths": 36}`` or ``{"type": "plane", ...}`` or ``{"type": "dataset", "path": ...}``.
    """
    kind = spec.get("type", "cylinder")
    label = label or spec.get("label", "surface1")

    def axis(v):
        if isinstance(v, dict):
            start, stop, step = float(v["start"]), float(v["stop"]), float(v["step"])
            n = int(round((stop - start) / step)) + 1
            return start + step * np.arange(n)
        return np.asarray(v, dtype=float)

    if kind == "cylinder":
        az = spec.get("azimuths", 36)
        az = uniform_azimuths(int(az)) if isinstance(az, (int, float)) else axis(az)
        return make_cylinder(float(spec["radius"]), axis(spec["heights"]), az,
                             spec.get("axis_origin", (0.0, 0.0, 0.0)), label)
    if kind == "plane":
        return make_plane(spec["origin"], spec["u_axis"], spec["v_axis"],
                          axis(spec["u_samples"]), axis(spec["v_samples"]), label)
    if kind == "dataset":
        return read_dataset(spec["path"], label=label).surface
    raise SchemaError(f"unknown surface type {kind!r}")
