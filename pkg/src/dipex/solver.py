"""Magnitude-only dipole moment recovery.

The back-and-forth iteration alternates between the measured-magnitude
constraint on each scan surface and the field subspace spanned by a fixed
dipole layout.  Moments are recovered by complex least squares through a QR
factorization of the transfer matrix.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.linalg

from . import kernels
from .errors import ConfigError, IllConditionedError, MetricError
from .forward import Dipole, Environment, TransferMatrix, forward_fields
from .scan import FieldDataset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverConfig:
    epsilon: float = 1e-4
    max_iterations: int = 500
    rcond: float = 1e-10

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if int(self.max_iterations) < 1:
            raise ConfigError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if not 0 < self.rcond < 1:
            raise ConfigError(f"rcond must be in (0, 1), got {self.rcond}")

    @classmethod
    def from_dict(cls, d: dict | None) -> "SolverConfig":
        d = dict(d or {})
        unknown = set(d) - {"epsilon", "max_iterations", "rcond"}
        if unknown:
            raise ConfigError(f"unknown solver keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class IterationTrace:
    """RE per sweep.  ``initial`` is iteration 0 (the constant-phase start);
    ``re_history`` holds sweeps 1..n as ``(iter, re1, re2, re)``."""

    initial: tuple
    re_history: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def __len__(self):
        return len(self.re_history)

    def to_csv(self, include_initial: bool = False) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "re1", "re2", "re"])
        rows = ([self.initial] if include_initial else []) + self.re_history
        for it, r1, r2, r in rows:
            w.writerow([it, repr(r1), "" if r2 is None else repr(r2), repr(r)])
        return buf.getvalue()


@dataclass
class FitResult:
    moments: np.ndarray
    re1: float
    re2: float | None
    re: float
    trace: IterationTrace
    converged: bool
    cond: float = float("nan")

    def to_json(self) -> dict:
        return {
            "moments": [{"magnitude": abs(m), "phase_deg": math.degrees(np.angle(m))} for m in self.moments],
            "re1": self.re1,
            "re2": self.re2,
            "re": self.re,
            "converged": self.converged,
            "cond": self.cond,
            "trace": {
                "initial": list(self.trace.initial),
                "history": [list(r) for r in self.trace.re_history],
                "warnings": list(self.trace.warnings),
            },
        }


def relative_error(dataset: FieldDataset, predicted: FieldDataset) -> float:
    """Magnitude mismatch normalized by the measured field energy on one surface."""
    if len(dataset.surface) != len(predicted.surface):
        raise ValueError("datasets are sampled on different grids")
    return relative_error_mags(dataset.magnitudes(), predicted.magnitudes())


def relative_error_mags(measured, fitted) -> float:
    measured = np.asarray(measured, dtype=float)
    fitted = np.abs(np.asarray(fitted))
    den = float(np.dot(measured, measured))
    if den == 0.0:
        raise MetricError("measured field is identically zero; relative error undefined")
    d = measured - fitted
    return math.sqrt(float(np.dot(d, d)) / den)


def _entries(T):
    return T.entries if isinstance(T, TransferMatrix) else np.asarray(T, dtype=complex)


class LeastSquares:
    """QR-based solver for min ||T d - f||_2 over complex d, factorized once."""

    def __init__(self, T, rcond: float = 1e-10):
        A = _entries(T)
        m, n = A.shape
        if m < n:
            raise ValueError(f"underdetermined system: {m} rows < {n} unknowns")
        self.shape = A.shape
        if not np.all(np.isfinite(A)):
            raise IllConditionedError(np.inf, rcond)
        Q, R = scipy.linalg.qr(A, mode="economic", check_finite=False)
        s = np.linalg.svd(R, compute_uv=False)
        self.cond = float(s[0] / s[-1]) if s[-1] > 0 else np.inf
        if not self.cond * rcond < 1.0:
            raise IllConditionedError(self.cond, rcond)
        # R^{-1} Q^H, applied to many right-hand sides during the iteration
        self.operator = np.ascontiguousarray(
            scipy.linalg.solve_triangular(R, Q.conj().T, check_finite=False)
        )

    def solve(self, f) -> np.ndarray:
        return self.operator @ np.asarray(f, dtype=complex)


def lstsq_complex(T, F, rcond: float = 1e-10) -> np.ndarray:
    return LeastSquares(T, rcond).solve(F)


def init_moments(T2, mags2, rcond: float = 1e-10) -> np.ndarray:
    """Least-squares moments assuming the field has one common phase on the surface."""
    return lstsq_complex(T2, np.asarray(mags2, dtype=float).astype(complex), rcond)


def enforce_magnitude(computed, measured_mags) -> np.ndarray:
    """Replace magnitudes, keep phases; zero entries take phase 0."""
    computed = np.asarray(computed, dtype=complex)
    mags = np.asarray(measured_mags, dtype=float)
    if computed.shape != mags.shape:
        raise ValueError("computed and measured vectors differ in length")
    return mags * np.exp(1j * np.angle(computed))


def _trace_from_hist(hist, n, two_surface):
    def row(i):
        r1, r2, r = (float(v) for v in hist[i])
        return (i, r1, r2 if two_surface else None, r)

    trace = IterationTrace(row(0), [row(i) for i in range(1, n + 1)])
    for i in range(1, n + 1):
        if hist[i, 2] > hist[i - 1, 2]:
            trace.warnings.append(f"RE increased at iteration {i}: {hist[i - 1, 2]:.6g} -> {hist[i, 2]:.6g}")
    return trace


def back_and_forth_two(T1, T2, mags1, mags2, cfg: SolverConfig = SolverConfig(),
                       init=None, solvers=None) -> FitResult:
    """Two-surface back-and-forth iteration.

    Each sweep predicts surface #1, records RE1, enforces the measured
    magnitudes, re-solves the moments, then does the same on surface #2.
    Stops when the sweep-to-sweep decrease of RE = (RE1 + RE2)/2 is <= epsilon
    (an increase also stops it, with a warning) or at ``max_iterations``.
    """
    A1, A2 = _entries(T1), _entries(T2)
    if A1.shape[1] != A2.shape[1]:
        raise ValueError("transfer matrices describe different dipole counts")
    m1 = np.ascontiguousarray(mags1, dtype=float)
    m2 = np.ascontiguousarray(mags2, dtype=float)
    if len(m1) != A1.shape[0] or len(m2) != A2.shape[0]:
        raise ValueError("magnitude vectors do not match transfer-matrix rows")
    if not (m1.any() and m2.any()):
        raise MetricError("measured field is identically zero; relative error undefined")
    ls1, ls2 = solvers or (LeastSquares(A1, cfg.rcond), LeastSquares(A2, cfg.rcond))
    d0 = ls2.solve(m2.astype(complex)) if init is None else np.asarray(init, dtype=complex)
    hist = np.empty((cfg.max_iterations + 1, 3))
    d, n, converged, re1, re2 = kernels.sweep_two(
        np.ascontiguousarray(A1), ls1.operator, m1, np.ascontiguousarray(A2), ls2.operator, m2,
        np.ascontiguousarray(d0), float(cfg.epsilon), int(cfg.max_iterations), hist,
    )
    trace = _trace_from_hist(hist, n, True)
    for w in trace.warnings:
        log.debug(w)
    return FitResult(np.asarray(d), float(re1), float(re2), 0.5 * (float(re1) + float(re2)), trace,
                     bool(converged), max(ls1.cond, ls2.cond))


def back_and_forth_single(T1, mags1, cfg: SolverConfig = SolverConfig(), init=None, solver=None) -> FitResult:
    """Single-surface variant; the start assumes constant phase on surface #1."""
    A1 = _entries(T1)
    m1 = np.ascontiguousarray(mags1, dtype=float)
    if len(m1) != A1.shape[0]:
        raise ValueError("magnitude vector does not match transfer-matrix rows")
    if not m1.any():
        raise MetricError("measured field is identically zero; relative error undefined")
    ls1 = solver or LeastSquares(A1, cfg.rcond)
    d0 = ls1.solve(m1.astype(complex)) if init is None else np.asarray(init, dtype=complex)
    hist = np.empty((cfg.max_iterations + 1, 3))
    d, n, converged, re1, _ = kernels.sweep_one(
        np.ascontiguousarray(A1), ls1.operator, m1, np.ascontiguousarray(d0),
        float(cfg.epsilon), int(cfg.max_iterations), hist,
    )
    trace = _trace_from_hist(hist, n, False)
    return FitResult(np.asarray(d), float(re1), None, float(re1), trace, bool(converged), ls1.cond)


def fit_datasets(transfers: Sequence, datasets: Sequence[FieldDataset], cfg: SolverConfig,
                 init=None) -> FitResult:
    """Dispatch to the one- or two-surface iteration."""
    if len(datasets) == 1:
        return back_and_forth_single(transfers[0], datasets[0].magnitudes(), cfg, init)
    if len(datasets) == 2:
        return back_and_forth_two(transfers[0], transfers[1], datasets[0].magnitudes(),
                                  datasets[1].magnitudes(), cfg, init)
    raise ConfigError(f"expected one or two datasets, got {len(datasets)}")


def retrieve_phase(dipoles: Sequence[Dipole], surface, env: Environment) -> FieldDataset:
    """Field (with phase) predicted by an extracted model.

    Magnitude-only data fixes the moments up to one common phase factor, so
    retrieved phases are only meaningful up to a global offset.
    """
    return forward_fields(dipoles, surface, env)


def _wrap(x):
    return np.angle(np.exp(1j * np.asarray(x)))


def align_global_phase(phases_a, phases_b, weights=None) -> tuple[float, float]:
    """Offset alpha (phases_a ~ phases_b + alpha) and weighted circular RMS residual.

    alpha maximizes sum w*cos(a - b - alpha).  When that objective is flat
    (zero resultant) the offset minimizing the wrapped RMS is used instead.
    """
    a = np.asarray(phases_a, dtype=float)
    b = np.asarray(phases_b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("phase vectors differ in length")
    w = np.ones_like(a) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != a.shape or np.any(w < 0):
        raise ValueError("weights must be non-negative and match the phases")
    wsum = float(w.sum())
    if wsum <= 0:
        raise ValueError("weights are all zero")
    diff = _wrap(a - b)
    resultant = np.sum(w * np.exp(1j * diff))
    if abs(resultant) > 1e-12 * wsum:
        alpha = float(np.angle(resultant))
    else:
        alpha = _arc_mean(diff, w)
    res = _wrap(diff - alpha)
    return alpha, math.sqrt(float(np.sum(w * res * res)) / wsum)


def _arc_mean(diff, w):
    # try every branch cut: unwrap onto [cut, cut + 2pi) and take the weighted mean
    best, best_cost = 0.0, np.inf
    for cut in np.unique(diff):
        shifted = np.where(diff < cut, diff + 2 * np.pi, diff)
        alpha = float(np.sum(w * shifted) / np.sum(w))
        res = _wrap(diff - alpha)
        cost = float(np.sum(w * res * res))
        if cost < best_cost - 1e-15:
            best, best_cost = float(_wrap(alpha)), cost
    return best


def write_trace_csv(trace: IterationTrace, path) -> None:
    Path(path).write_text(trace.to_csv(), encoding="utf-8")


def write_fit_json(fit: FitResult, path, extra: dict | None = None) -> None:
    payload = fit.to_json()
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
