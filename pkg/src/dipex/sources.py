"""Reference sources and synthetic dataset generation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .errors import SchemaError
from .forward import Dipole, DipoleType, Environment, forward_fields
from .scan import FieldDataset, ScanSurface


@dataclass(frozen=True)
class WireAntenna:
    """Thin center-fed wire carrying a sinusoidal standing-wave current."""

    center: tuple = (0.0, 0.0, 0.0)
    length: float = 0.5
    axis: tuple = (0.0, 0.0, 1.0)
    feed_voltage: complex = 5.0
    input_impedance: complex = 73 + 42.5j

    def __post_init__(self):
        if not self.length > 0:
            raise ValueError("wire length must be positive")
        ax = np.asarray(self.axis, dtype=float)
        if abs(np.linalg.norm(ax) - 1.0) > 1e-12:
            raise ValueError("wire axis must be a unit vector")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "axis", tuple(float(c) for c in ax))

    @property
    def feed_current(self) -> complex:
        return complex(self.feed_voltage) / complex(self.input_impedance)

    @classmethod
    def half_wave(cls, frequency, center=(0.0, 0.0, 0.0), **kw) -> "WireAntenna":
        return cls(center=center, length=Environment(frequency).wavelength / 2, **kw)


def wire_current(ant: WireAntenna, z_local, wavelength: float):
    """I0 * sin(2*pi/lambda * (lambda/4 - |z|)) along the wire (symmetric form)."""
    z = np.asarray(z_local, dtype=float)
    if np.any(np.abs(z) > ant.length / 2 * (1 + 1e-12)):
        raise ValueError(f"z_local outside the wire span +-{ant.length / 2}")
    out = ant.feed_current * np.sin(2 * math.pi / wavelength * (wavelength / 4 - np.abs(z)))
    return complex(out) if np.ndim(out) == 0 else out


def wire_moment(ant: WireAntenna, wavelength: float) -> complex:
    """Integral of the current over a half-wave wire: I0 * lambda / pi."""
    if abs(ant.length - wavelength / 2) > 1e-9 * wavelength:
        raise ValueError("closed-form wire moment only holds for a half-wave wire")
    return ant.feed_current * wavelength / math.pi


def _axis_kind(axis):
    ax = np.asarray(axis)
    i = int(np.argmax(np.abs(ax)))
    if abs(abs(ax[i]) - 1.0) > 1e-12:
        raise ValueError("wire segmentation needs a coordinate-aligned axis")
    return DipoleType(i), float(np.sign(ax[i]))


def wire_segments(ant: WireAntenna, n_segments: int, wavelength: float) -> list[Dipole]:
    """Midpoint-rule discretization into ``n_segments`` electric dipoles."""
    if n_segments < 1:
        raise ValueError("n_segments must be >= 1")
    kind, sign = _axis_kind(ant.axis)
    dz = ant.length / n_segments
    z = -ant.length / 2 + dz * (np.arange(n_segments) + 0.5)
    currents = np.atleast_1d(wire_current(ant, z, wavelength))
    center = np.asarray(ant.center)
    axis = np.asarray(ant.axis)
    return [Dipole(kind, center + zi * axis, sign * ci * dz) for zi, ci in zip(z, currents)]


Source = Union[Dipole, WireAntenna]

WIRE_SEGMENTS = 101


def expand_sources(sources: Sequence[Source], env: Environment, n_segments: int = WIRE_SEGMENTS) -> list[Dipole]:
    out = []
    for s in sources:
        if isinstance(s, WireAntenna):
            out.extend(wire_segments(s, n_segments, env.wavelength))
        else:
            out.append(s)
    return out


def synth_dataset(sources: Sequence[Source], surface: ScanSurface, env: Environment,
                  noise_db: float | None = None, seed: int | None = None,
                  noise_model: str = "db", n_segments: int = WIRE_SEGMENTS) -> FieldDataset:
    """Forward-model a scene; phases are kept as ground truth.

    ``noise_model="db"`` scales each magnitude by 10**(u/20) with u uniform in
    [-noise_db, noise_db]; ``"gaussian"`` adds N(0, sigma) to each magnitude,
    sigma = noise_db * RMS magnitude (result clipped at 0).
    """
    clean = forward_fields(expand_sources(sources, env, n_segments), surface, env)
    if not noise_db:
        return clean
    rng = np.random.default_rng(seed)
    n = len(surface)
    if noise_model == "db":
        fu = 10.0 ** (rng.uniform(-noise_db, noise_db, n) / 20.0)
        fv = 10.0 ** (rng.uniform(-noise_db, noise_db, n) / 20.0)
        mu, mv = clean.mag_u * fu, clean.mag_v * fv
    elif noise_model == "gaussian":
        rms = math.sqrt(float(np.mean(clean.magnitudes() ** 2)))
        mu = np.abs(clean.mag_u + noise_db * rms * rng.standard_normal(n))
        mv = np.abs(clean.mag_v + noise_db * rms * rng.standard_normal(n))
    else:
        raise ValueError(f"unknown noise model {noise_model!r}")
    return FieldDataset(surface, env.frequency, mu, mv, clean.phase_u, clean.phase_v)


@dataclass
class Scene:
    sources: list
    env: Environment
    noise_db: float | None = None
    seed: int | None = None
    noise_model: str = "db"

    def synthesize(self, surface: ScanSurface, seed: int | None = None) -> FieldDataset:
        return synth_dataset(self.sources, surface, self.env, self.noise_db,
                             self.seed if seed is None else seed, self.noise_model)


def scene_from_dict(d: dict) -> Scene:
    try:
        env = Environment(float(d["frequency_hz"]), bool(d.get("ground", False)))
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"scene: bad or missing frequency_hz ({exc})") from None
    sources = []
    for i, rec in enumerate(d.get("sources", [])):
        if "wire" in rec:
            w = dict(rec["wire"])
            try:
                v = w.pop("feed_voltage", 5.0)
                z = w.pop("input_impedance", [73.0, 42.5])
                ant = WireAntenna(
                    center=tuple(w.pop("center", (0.0, 0.0, 0.0))),
                    length=float(w.pop("length", env.wavelength / 2)),
                    axis=tuple(w.pop("axis", (0.0, 0.0, 1.0))),
                    feed_voltage=complex(*v) if isinstance(v, (list, tuple)) else complex(v),
                    input_impedance=complex(*z) if isinstance(z, (list, tuple)) else complex(z),
                )
            except (TypeError, ValueError) as exc:
                raise SchemaError(f"scene: sources[{i}].wire: {exc}") from None
            if w:
                raise SchemaError(f"scene: sources[{i}].wire: unknown keys {sorted(w)}")
            sources.append(ant)
        else:
            try:
                sources.append(Dipole.from_record(rec))
            except SchemaError as exc:
                raise SchemaError(f"scene: sources[{i}]: {exc}") from None
    noise = d.get("noise_db")
    return Scene(sources, env, None if noise is None else float(noise), d.get("seed"),
                 d.get("noise_model", "db"))


def read_scene(path) -> Scene:
    try:
        return scene_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from None
