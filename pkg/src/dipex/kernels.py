"""Hot numeric kernels with a numba path and a pure-numpy fallback.

Set ``DIPEX_DISABLE_NUMBA=1`` to force the numpy path (also used automatically
when numba is not importable).  Both implementations are always importable
under explicit names so tests and ``benchmarks/`` can compare them.

Dipole kinds are encoded 0..5 = PX, PY, PZ, MX, MY, MZ.
"""

import math
import os

import numpy as np

try:
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kw):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f

USE_NUMBA = HAVE_NUMBA and os.environ.get("DIPEX_DISABLE_NUMBA", "").lower() not in ("1", "true", "yes", "on")

# image moment sign for a PEC plane at z = 0, indexed by kind
IMAGE_SIGN = np.array([-1.0, -1.0, 1.0, 1.0, 1.0, -1.0])
FOUR_PI = 4.0 * math.pi


# ---------------------------------------------------------------- numpy path

def unit_field_numpy(kind, src, obs, k, eta):
    """E (P, 3) at ``obs`` from a unit-moment dipole of ``kind`` at ``src``."""
    rv = obs - src
    r = np.sqrt(np.einsum("ij,ij->i", rv, rv))
    rh = rv / r[:, None]
    kr = k * r
    ph = np.exp(-1j * kr)
    axis = kind % 3
    if kind < 3:
        c_r = eta / (2.0 * math.pi * r * r) * (1.0 + 1.0 / (1j * kr)) * ph
        c_t = 1j * eta * k / (FOUR_PI * r) * (1.0 + 1.0 / (1j * kr) - 1.0 / (kr * kr)) * ph
        cos_t = rh[:, axis]
        e = rh * (cos_t * (c_r + c_t))[:, None]
        e[:, axis] -= c_t
        return e
    c_m = -1j * k / (FOUR_PI * r) * (1.0 + 1.0 / (1j * kr)) * ph
    e = np.zeros((len(r), 3), dtype=complex)
    # p x r_hat for p = unit vector along axis
    a1, a2 = (axis + 1) % 3, (axis + 2) % 3
    e[:, a2] = rh[:, a1] * c_m
    e[:, a1] = -rh[:, a2] * c_m
    return e


def transfer_numpy(kinds, positions, points, tu, tv, k, eta, ground):
    """Transfer matrix (2P, N); rows interleave tangent_u / tangent_v per point.

    Returns ``(T, min_distance)``.
    """
    n_pts = len(points)
    out = np.empty((2 * n_pts, len(kinds)), dtype=complex)
    rmin = np.inf
    for j in range(len(kinds)):
        kind = int(kinds[j])
        src = positions[j]
        rmin = min(rmin, float(np.min(np.linalg.norm(points - src, axis=1))))
        e = unit_field_numpy(kind, src, points, k, eta)
        if ground:
            img = np.array([src[0], src[1], -src[2]])
            rmin = min(rmin, float(np.min(np.linalg.norm(points - img, axis=1))))
            e = e + IMAGE_SIGN[kind] * unit_field_numpy(kind, img, points, k, eta)
        out[0::2, j] = np.einsum("ij,ij->i", e, tu)
        out[1::2, j] = np.einsum("ij,ij->i", e, tv)
    return out, rmin


def _rel_err_numpy(mags, fit, denom):
    d = mags - np.abs(fit)
    return math.sqrt(float(np.dot(d, d)) / denom)


def _enforce_numpy(values, mags):
    # zero entries have angle 0, so they take phase 0
    return mags * np.exp(1j * np.angle(values))


def sweep_two_numpy(T1, P1, m1, T2, P2, m2, d0, eps, max_iter, hist):
    """Two-surface back-and-forth loop.

    ``P1``/``P2`` are the least-squares solution operators (N, M).  ``hist``
    (max_iter + 1, 3) receives (RE1, RE2, RE); row 0 is the initial guess.
    Returns ``(d, n_sweeps, converged, re1, re2)`` with the errors of the
    returned moments.
    """
    den1 = float(np.dot(m1, m1))
    den2 = float(np.dot(m2, m2))
    d = d0.copy()
    re1 = _rel_err_numpy(m1, T1 @ d, den1)
    re2 = _rel_err_numpy(m2, T2 @ d, den2)
    hist[0, 0], hist[0, 1], hist[0, 2] = re1, re2, 0.5 * (re1 + re2)
    prev = hist[0, 2]
    n = 0
    converged = False
    while n < max_iter:
        n += 1
        f1 = T1 @ d
        re1 = _rel_err_numpy(m1, f1, den1)
        d = P1 @ _enforce_numpy(f1, m1)
        f2 = T2 @ d
        re2 = _rel_err_numpy(m2, f2, den2)
        d = P2 @ _enforce_numpy(f2, m2)
        re = 0.5 * (re1 + re2)
        hist[n, 0], hist[n, 1], hist[n, 2] = re1, re2, re
        if prev - re <= eps:
            converged = True
            break
        prev = re
    re1 = _rel_err_numpy(m1, T1 @ d, den1)
    re2 = _rel_err_numpy(m2, T2 @ d, den2)
    return d, n, converged, re1, re2


def sweep_one_numpy(T1, P1, m1, d0, eps, max_iter, hist):
    """Single-surface variant of :func:`sweep_two_numpy` (RE == RE1).

    Each row holds the error of the moments produced by that sweep.
    """
    den1 = float(np.dot(m1, m1))
    d = d0.copy()
    f1 = T1 @ d
    re1 = _rel_err_numpy(m1, f1, den1)
    hist[0, 0], hist[0, 1], hist[0, 2] = re1, np.nan, re1
    prev = re1
    n = 0
    converged = False
    while n < max_iter:
        n += 1
        d = P1 @ _enforce_numpy(f1, m1)
        f1 = T1 @ d
        re1 = _rel_err_numpy(m1, f1, den1)
        hist[n, 0], hist[n, 1], hist[n, 2] = re1, np.nan, re1
        if prev - re1 <= eps:
            converged = True
            break
        prev = re1
    return d, n, converged, re1, np.nan


# ---------------------------------------------------------------- numba path

@njit(cache=True, nogil=True)
def _accumulate_nb(kind, sx, sy, sz, sign, px, py, pz, k, eta, e):
    rx, ry, rz = px - sx, py - sy, pz - sz
    r = math.sqrt(rx * rx + ry * ry + rz * rz)
    hx, hy, hz = rx / r, ry / r, rz / r
    kr = k * r
    ph = complex(math.cos(kr), -math.sin(kr))
    axis = kind % 3
    if kind < 3:
        inv = 1.0 / (1j * kr)
        c_r = eta / (2.0 * math.pi * r * r) * (1.0 + inv) * ph
        c_t = 1j * eta * k / (FOUR_PI * r) * (1.0 + inv - 1.0 / (kr * kr)) * ph
        if axis == 0:
            cos_t = hx
        elif axis == 1:
            cos_t = hy
        else:
            cos_t = hz
        s = sign * cos_t * (c_r + c_t)
        e[0] += hx * s
        e[1] += hy * s
        e[2] += hz * s
        e[axis] -= sign * c_t
    else:
        c_m = sign * (-1j) * k / (FOUR_PI * r) * (1.0 + 1.0 / (1j * kr)) * ph
        if axis == 0:
            e[1] -= hz * c_m
            e[2] += hy * c_m
        elif axis == 1:
            e[2] -= hx * c_m
            e[0] += hz * c_m
        else:
            e[0] -= hy * c_m
            e[1] += hx * c_m
    return r


@njit(cache=True, nogil=True)
def transfer_numba(kinds, positions, points, tu, tv, k, eta, ground):
    n_pts = points.shape[0]
    n_dip = kinds.shape[0]
    out = np.empty((2 * n_pts, n_dip), dtype=np.complex128)
    e = np.zeros(3, dtype=np.complex128)
    rmin = np.inf
    for j in range(n_dip):
        kind = kinds[j]
        sx, sy, sz = positions[j, 0], positions[j, 1], positions[j, 2]
        img_sign = IMAGE_SIGN[kind]
        for i in range(n_pts):
            e[0] = 0.0
            e[1] = 0.0
            e[2] = 0.0
            px, py, pz = points[i, 0], points[i, 1], points[i, 2]
            r = _accumulate_nb(kind, sx, sy, sz, 1.0, px, py, pz, k, eta, e)
            if r < rmin:
                rmin = r
            if ground:
                r = _accumulate_nb(kind, sx, sy, -sz, img_sign, px, py, pz, k, eta, e)
                if r < rmin:
                    rmin = r
            out[2 * i, j] = e[0] * tu[i, 0] + e[1] * tu[i, 1] + e[2] * tu[i, 2]
            out[2 * i + 1, j] = e[0] * tv[i, 0] + e[1] * tv[i, 1] + e[2] * tv[i, 2]
    return out, rmin


@njit(cache=True, nogil=True)
def _matvec_nb(A, x, out):
    m, n = A.shape
    for i in range(m):
        acc = 0j
        for j in range(n):
            acc += A[i, j] * x[j]
        out[i] = acc


@njit(cache=True, nogil=True)
def _project_nb(values, mags, denom, out):
    """Write the magnitude-enforced field into ``out``; return the relative error."""
    acc = 0.0
    for i in range(values.shape[0]):
        re, im = values[i].real, values[i].imag
        a = math.sqrt(re * re + im * im)
        d = mags[i] - a
        acc += d * d
        if a > 0.0:
            s = mags[i] / a
            out[i] = complex(re * s, im * s)
        else:
            out[i] = mags[i]
    return math.sqrt(acc / denom)


@njit(cache=True, nogil=True)
def _rel_err_nb(mags, fit, denom):
    acc = 0.0
    for i in range(mags.shape[0]):
        re, im = fit[i].real, fit[i].imag
        d = mags[i] - math.sqrt(re * re + im * im)
        acc += d * d
    return math.sqrt(acc / denom)


@njit(cache=True, nogil=True)
def sweep_two_numba(T1, P1, m1, T2, P2, m2, d0, eps, max_iter, hist):
    den1 = 0.0
    for i in range(m1.shape[0]):
        den1 += m1[i] * m1[i]
    den2 = 0.0
    for i in range(m2.shape[0]):
        den2 += m2[i] * m2[i]
    d = d0.copy()
    f1 = np.empty(T1.shape[0], dtype=np.complex128)
    f2 = np.empty(T2.shape[0], dtype=np.complex128)
    g1 = np.empty_like(f1)
    g2 = np.empty_like(f2)
    _matvec_nb(T1, d, f1)
    _matvec_nb(T2, d, f2)
    re1 = _rel_err_nb(m1, f1, den1)
    re2 = _rel_err_nb(m2, f2, den2)
    hist[0, 0] = re1
    hist[0, 1] = re2
    hist[0, 2] = 0.5 * (re1 + re2)
    prev = hist[0, 2]
    n = 0
    converged = False
    while n < max_iter:
        n += 1
        _matvec_nb(T1, d, f1)
        re1 = _project_nb(f1, m1, den1, g1)
        _matvec_nb(P1, g1, d)
        _matvec_nb(T2, d, f2)
        re2 = _project_nb(f2, m2, den2, g2)
        _matvec_nb(P2, g2, d)
        re = 0.5 * (re1 + re2)
        hist[n, 0] = re1
        hist[n, 1] = re2
        hist[n, 2] = re
        if prev - re <= eps:
            converged = True
            break
        prev = re
    _matvec_nb(T1, d, f1)
    _matvec_nb(T2, d, f2)
    re1 = _rel_err_nb(m1, f1, den1)
    re2 = _rel_err_nb(m2, f2, den2)
    return d, n, converged, re1, re2


@njit(cache=True, nogil=True)
def sweep_one_numba(T1, P1, m1, d0, eps, max_iter, hist):
    den1 = 0.0
    for i in range(m1.shape[0]):
        den1 += m1[i] * m1[i]
    d = d0.copy()
    f1 = np.empty(T1.shape[0], dtype=np.complex128)
    g1 = np.empty_like(f1)
    _matvec_nb(T1, d, f1)
    re1 = _rel_err_nb(m1, f1, den1)
    hist[0, 0] = re1
    hist[0, 1] = np.nan
    hist[0, 2] = re1
    prev = re1
    n = 0
    converged = False
    while n < max_iter:
        n += 1
        _project_nb(f1, m1, den1, g1)
        _matvec_nb(P1, g1, d)
        _matvec_nb(T1, d, f1)
        re1 = _rel_err_nb(m1, f1, den1)
        hist[n, 0] = re1
        hist[n, 1] = np.nan
        hist[n, 2] = re1
        if prev - re1 <= eps:
            converged = True
            break
        prev = re1
    return d, n, converged, re1, np.nan


# ---------------------------------------------------------------- dispatch

if USE_NUMBA:
    transfer = transfer_numba
    sweep_two = sweep_two_numba
    sweep_one = sweep_one_numba
else:
    transfer = transfer_numpy
    sweep_two = sweep_two_numpy
    sweep_one = sweep_one_numpy


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
