"""Fields of infinitesimal electric/magnetic dipoles and the transfer matrix.

Conventions: time dependence exp(+j w t), propagation exp(-j k r), electric
moments in A*m, magnetic moments in V*m.  An optional PEC plane at z = 0 is
modeled with image sources (horizontal electric and vertical magnetic images
are negated).
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .errors import SchemaError, SingularityError
from .scan import FieldDataset, ScanSurface

C0 = 299_792_458.0
MU0 = 1.25663706212e-6
EPS0 = 1.0 / (MU0 * C0 * C0)
ETA0 = math.sqrt(MU0 / EPS0)

SINGULAR_DISTANCE = 1e-9


class DipoleType(enum.IntEnum):
    PX = 0
    PY = 1
    PZ = 2
    MX = 3
    MY = 4
    MZ = 5

    @property
    def is_electric(self) -> bool:
        return self < 3

    @property
    def is_magnetic(self) -> bool:
        return self >= 3

    @property
    def axis(self) -> int:
        return int(self) % 3

    @classmethod
    def parse(cls, value) -> "DipoleType":
        if isinstance(value, cls):
            return value
        try:
            if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
                return cls(int(value))
            return cls[str(value).upper()]
        except (KeyError, ValueError):
            raise SchemaError(f"unknown dipole kind {value!r}") from None


@dataclass(frozen=True)
class Dipole:
    kind: DipoleType
    position: tuple
    moment: complex

    def __post_init__(self):
        object.__setattr__(self, "kind", DipoleType.parse(self.kind))
        pos = tuple(float(v) for v in self.position)
        if len(pos) != 3 or not all(math.isfinite(v) for v in pos):
            raise ValueError(f"dipole position must be a finite 3-vector, got {self.position}")
        object.__setattr__(self, "position", pos)
        m = complex(self.moment)
        if not (math.isfinite(m.real) and math.isfinite(m.imag)):
            raise ValueError("dipole moment must be finite")
        object.__setattr__(self, "moment", m)

    @property
    def magnitude(self) -> float:
        return abs(self.moment)

    @property
    def phase_deg(self) -> float:
        return math.degrees(math.atan2(self.moment.imag, self.moment.real))

    def to_record(self) -> dict:
        return {
            "kind": self.kind.name,
            "position": list(self.position),
            "magnitude": self.magnitude,
            "phase_deg": self.phase_deg,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Dipole":
        try:
            mag = float(rec.get("magnitude", 0.0))
            phase = math.radians(float(rec.get("phase_deg", 0.0)))
            return cls(rec["kind"], rec["position"], mag * complex(math.cos(phase), math.sin(phase)))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"bad dipole record {rec!r}: {exc}") from None


@dataclass(frozen=True)
class Environment:
    frequency: float
    ground: bool = False

    def __post_init__(self):
        if not (self.frequency > 0 and math.isfinite(self.frequency)):
            raise ValueError(f"frequency must be positive, got {self.frequency}")

    @property
    def wavenumber(self) -> float:
        return 2.0 * math.pi * self.frequency / C0

    @property
    def wavelength(self) -> float:
        return C0 / self.frequency


@dataclass(frozen=True, eq=False)
class TransferMatrix:
    """Complex (2P, N) map from dipole moments to sampled tangential fields.

    Row ``2i`` is point ``i`` projected on tangent_u, row ``2i + 1`` on tangent_v.
    """

    entries: np.ndarray
    kinds: tuple
    positions: np.ndarray
    surface: ScanSurface

    @property
    def shape(self):
        return self.entries.shape

    def row_map(self) -> list[tuple[int, str]]:
        return [(i // 2, "uv"[i % 2]) for i in range(self.entries.shape[0])]

    def __matmul__(self, moments):
        return self.entries @ np.asarray(moments, dtype=complex)


def _check_ground(positions, env, what):
    if env.ground and np.any(np.asarray(positions)[:, 2] <= 0):
        raise ValueError(f"{what} must lie above the ground plane (z > 0)")


def dipole_efield(kind, position, moment, obs, env: Environment) -> np.ndarray:
    """Complex E (V/m, Cartesian) at one or more observation points.

    ``obs`` may be a 3-vector (returns shape (3,)) or an (P, 3) array.
    """
    kind = DipoleType.parse(kind)
    pts = np.asarray(obs, dtype=float)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    src = np.asarray(position, dtype=float)
    sources = [(src, 1.0)]
    if env.ground:
        sources.append((src * [1.0, 1.0, -1.0], kernels.IMAGE_SIGN[kind]))
    k = env.wavenumber
    e = np.zeros((len(pts), 3), dtype=complex)
    for s, sign in sources:
        if np.min(np.linalg.norm(pts - s, axis=1)) < SINGULAR_DISTANCE:
            raise SingularityError(f"observation point coincides with source at {tuple(s)}")
        e += sign * kernels.unit_field_numpy(int(kind), s, pts, k, ETA0)
    e *= complex(moment)
    return e[0] if single else e


def electric_dipole_hfield(axis: int, position, moment, obs, k: float) -> np.ndarray:
    """Free-space H (A/m) of an electric dipole ``moment * axis_hat``."""
    rv = np.atleast_2d(np.asarray(obs, dtype=float)) - np.asarray(position, dtype=float)
    r = np.linalg.norm(rv, axis=1)
    rh = rv / r[:, None]
    p = np.zeros(3)
    p[axis] = 1.0
    c = 1j * k / (4 * math.pi * r) * (1.0 + 1.0 / (1j * k * r)) * np.exp(-1j * k * r)
    return complex(moment) * c[:, None] * np.cross(p, rh)


def project_components(E, point) -> tuple[complex, complex]:
    """(E . tangent_u, E . tangent_v) for a :class:`ScanPoint`."""
    E = np.asarray(E, dtype=complex)
    return complex(E @ point.tangent_u), complex(E @ point.tangent_v)


def layout_arrays(layout: Iterable) -> tuple[np.ndarray, np.ndarray]:
    kinds, positions = [], []
    for kind, pos in layout:
        kinds.append(int(DipoleType.parse(kind)))
        positions.append(np.asarray(pos, dtype=float))
    return np.array(kinds, dtype=np.int64), np.array(positions, dtype=float).reshape(-1, 3)


def transfer_entries(kinds: np.ndarray, positions: np.ndarray, surface: ScanSurface,
                     env: Environment) -> np.ndarray:
    """Raw (2P, N) transfer entries from encoded kinds/positions arrays."""
    out, rmin = kernels.transfer(
        np.ascontiguousarray(kinds, dtype=np.int64),
        np.ascontiguousarray(positions, dtype=float),
        surface.positions, surface.tangent_u, surface.tangent_v,
        env.wavenumber, ETA0, bool(env.ground),
    )
    if rmin < SINGULAR_DISTANCE:
        raise SingularityError("a dipole (or its ground image) coincides with a scan point")
    return out


def build_transfer_matrix(layout: Sequence, surface: ScanSurface, env: Environment) -> TransferMatrix:
    """Column j is the projected field of dipole j with unit moment."""
    kinds, positions = layout_arrays(layout)
    _check_ground(positions, env, "dipoles")
    entries = transfer_entries(kinds, positions, surface, env)
    return TransferMatrix(entries, tuple(DipoleType(k) for k in kinds), positions, surface)


def forward_fields(dipoles: Sequence[Dipole], surface: ScanSurface, env: Environment) -> FieldDataset:
    """Dataset (with phases) radiated by ``dipoles`` on ``surface``."""
    if len(dipoles) == 0:
        z = np.zeros(len(surface))
        return FieldDataset(surface, env.frequency, z, z, z, z)
    T = build_transfer_matrix([(d.kind, d.position) for d in dipoles], surface, env)
    values = T @ np.array([d.moment for d in dipoles])
    return FieldDataset.from_complex(surface, env.frequency, values)


def write_dipoles(dipoles: Sequence[Dipole], path) -> None:
    Path(path).write_text(json.dumps([d.to_record() for d in dipoles], indent=2) + "\n", encoding="utf-8")


def read_dipoles(path) -> list[Dipole]:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from None
    if isinstance(data, dict) and "dipoles" in data:
        data = data["dipoles"]
    if not isinstance(data, list):
        raise SchemaError(f"{path}: expected a list of dipole records")
    return [Dipole.from_record(rec) for rec in data]
