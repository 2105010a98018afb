import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from dipex.errors import IllConditionedError, MetricError
from dipex.forward import Dipole, Environment, build_transfer_matrix, forward_fields
from dipex.scan import FieldDataset, make_cylinder, uniform_azimuths
from dipex.solver import (
    SolverConfig,
    align_global_phase,
    back_and_forth_single,
    back_and_forth_two,
    enforce_magnitude,
    init_moments,
    lstsq_complex,
    relative_error,
    retrieve_phase,
)
from dipex import kernels

import oracles

F = 781.25e6
PEC = Environment(F, ground=True)
HEIGHTS = 1.0 + 0.25 * np.arange(13)
PAIR = [Dipole("PX", (0.25, 0, 1.5), 1j), Dipole("MY", (-0.25, 0, 1.5), 100.0)]


def crandn(rng, *shape):
    return rng.normal(size=shape) + 1j * rng.normal(size=shape)


@pytest.fixture(scope="module")
def pair():
    s1 = make_cylinder(0.5, HEIGHTS, uniform_azimuths(36), label="surface1")
    s2 = make_cylinder(1.0, HEIGHTS, uniform_azimuths(36), label="surface2")
    layout = [(d.kind, d.position) for d in PAIR]
    T1 = build_transfer_matrix(layout, s1, PEC)
    T2 = build_transfer_matrix(layout, s2, PEC)
    d1, d2 = forward_fields(PAIR, s1, PEC), forward_fields(PAIR, s2, PEC)
    return T1, T2, d1, d2


# ---------------------------------------------------------------- relative error

def _two_point(mu, mv):
    s = make_cylinder(1.0, [0.0], [0.0, 1.0])
    return FieldDataset(s, F, mu, mv)


def test_relative_error_identity_and_zero():
    a = _two_point([1.0, 2.0], [0.5, 0.0])
    assert relative_error(a, a) == 0.0
    assert relative_error(a, _two_point([0, 0], [0, 0])) == 1.0


def test_relative_error_hand_value():
    a = _two_point([1.0, 0.0], [0.0, 1.0])
    b = _two_point([0.9, 0.0], [0.0, 1.1])
    assert relative_error(a, b) == pytest.approx(math.sqrt(0.02 / 2), rel=1e-12)
    assert relative_error(a, b) == pytest.approx(0.1, rel=1e-12)


def test_relative_error_zero_measured():
    z = _two_point([0, 0], [0, 0])
    with pytest.raises(MetricError):
        relative_error(z, z)


# ---------------------------------------------------------------- least squares

def test_lstsq_square_exact():
    T = np.array([[2.0, 1j], [0.5 - 1j, 3.0]])
    x = np.array([1 + 1j, 2.0])
    assert np.allclose(lstsq_complex(T, T @ x), x, atol=1e-12, rtol=0)


def test_lstsq_overdetermined_consistent():
    rng = np.random.default_rng(0)
    T = crandn(rng, 30, 4)
    x = crandn(rng, 4)
    got = lstsq_complex(T, T @ x)
    assert np.allclose(got, x, atol=1e-12, rtol=0)
    assert np.linalg.norm(T @ got - T @ x) < 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_lstsq_matches_svd_oracle_and_orthogonality(seed):
    rng = np.random.default_rng(seed)
    T, F_ = crandn(rng, 40, 6), crandn(rng, 40)
    got = lstsq_complex(T, F_)
    assert np.allclose(got, oracles.pinv_solve(T, F_), atol=1e-10, rtol=0)
    res = T @ got - F_
    assert np.all(np.abs(T.conj().T @ res) < 1e-10 * np.linalg.norm(F_))


def test_lstsq_local_optimality():
    rng = np.random.default_rng(9)
    T, F_ = crandn(rng, 50, 3), crandn(rng, 50)
    D = lstsq_complex(T, F_)
    base = np.linalg.norm(T @ D - F_)
    for _ in range(100):
        delta = crandn(rng, 3)
        delta *= 1e-6 * np.linalg.norm(D) / np.linalg.norm(delta)
        assert np.linalg.norm(T @ (D + delta) - F_) >= base


def test_lstsq_ill_conditioned():
    rng = np.random.default_rng(1)
    col = crandn(rng, 20)
    T = np.column_stack((col, col, crandn(rng, 20)))
    with pytest.raises(IllConditionedError) as info:
        lstsq_complex(T, crandn(rng, 20))
    assert info.value.cond > 1e10


def test_lstsq_underdetermined():
    with pytest.raises(ValueError):
        lstsq_complex(np.ones((2, 3), dtype=complex), np.ones(2))


# ---------------------------------------------------------------- init / enforce

def test_init_moments_constant_phase_exact():
    rng = np.random.default_rng(2)
    t = rng.random(12) + 0.5  # real positive column: field phase 0 everywhere
    T = t[:, None].astype(complex)
    mags = 0.7 * t
    assert np.allclose(init_moments(T, mags), [0.7], atol=1e-14)
    assert np.allclose(init_moments(T, np.zeros(12)), [0.0])


def test_init_moments_pair(pair):
    T1, T2, d1, d2 = pair
    D0 = init_moments(T2, d2.magnitudes())
    fit = back_and_forth_two(T1, T2, d1.magnitudes(), d2.magnitudes(), SolverConfig(max_iterations=1))
    assert np.allclose(fit.trace.initial[1:], [
        np.linalg.norm(d1.magnitudes() - np.abs(T1 @ D0)) / np.linalg.norm(d1.magnitudes()),
        np.linalg.norm(d2.magnitudes() - np.abs(T2 @ D0)) / np.linalg.norm(d2.magnitudes()),
        fit.trace.initial[3],
    ])
    assert fit.trace.initial[0] == 0
    assert math.isfinite(fit.trace.initial[3]) and fit.trace.initial[3] < 1


def test_enforce_examples():
    out = enforce_magnitude([2 * np.exp(1j * np.pi / 4)], [5.0])
    assert out[0] == pytest.approx(5 * np.exp(1j * np.pi / 4))
    assert enforce_magnitude([0j], [3.0])[0] == 3 + 0j


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.complex128, 8, elements=st.complex_numbers(max_magnitude=1e3, allow_nan=False)),
       hnp.arrays(np.float64, 8, elements=st.floats(0, 1e3)))
def test_enforce_properties(c, m):
    once = enforce_magnitude(c, m)
    assert np.allclose(np.abs(once), m, rtol=1e-12, atol=1e-12)
    assert np.allclose(enforce_magnitude(once, m), once, rtol=1e-12, atol=1e-9)


# ---------------------------------------------------------------- back-and-forth

def test_two_surface_pair_exact_layout(pair):
    T1, T2, d1, d2 = pair
    fit = back_and_forth_two(T1, T2, d1.magnitudes(), d2.magnitudes(), SolverConfig())
    assert fit.re <= 1e-3
    assert fit.re == 0.5 * (fit.re1 + fit.re2)
    amp = np.abs(fit.moments)
    assert amp[0] == pytest.approx(1.0, rel=1e-3)
    assert amp[1] == pytest.approx(100.0, rel=1e-3)
    dphi = math.degrees(np.angle(fit.moments[0] / fit.moments[1]))
    assert abs(dphi - 90.0) <= 0.5
    assert fit.converged


def test_two_surface_fixed_point(pair):
    T1, T2, d1, d2 = pair
    truth = np.array([d.moment for d in PAIR])
    fit = back_and_forth_two(T1, T2, d1.magnitudes(), d2.magnitudes(), SolverConfig(), init=truth)
    assert len(fit.trace) == 1 and fit.converged
    assert fit.re < 1e-12


def test_two_surface_random_single_dipole_converges_fast():
    rng = np.random.default_rng(4)
    s1 = make_cylinder(0.5, HEIGHTS, uniform_azimuths(36))
    s2 = make_cylinder(1.0, HEIGHTS, uniform_azimuths(36))
    for kind in ("PX", "MZ", "PZ"):
        pos = (rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), rng.uniform(1.2, 1.8))
        src = [Dipole(kind, pos, crandn(rng, 1)[0])]
        T1 = build_transfer_matrix([(kind, pos)], s1, PEC)
        T2 = build_transfer_matrix([(kind, pos)], s2, PEC)
        fit = back_and_forth_two(T1, T2, forward_fields(src, s1, PEC).magnitudes(),
                                 forward_fields(src, s2, PEC).magnitudes(), SolverConfig())
        assert fit.converged and len(fit.trace) <= 50
        assert fit.re < 1e-6
        assert abs(fit.moments[0]) == pytest.approx(abs(src[0].moment), rel=1e-6)


def test_stopping_soundness(pair):
    T1, T2, d1, d2 = pair
    rng = np.random.default_rng(0)
    mags1 = d1.magnitudes() * (1 + 0.1 * rng.random(936))
    mags2 = d2.magnitudes()
    for cfg in (SolverConfig(), SolverConfig(max_iterations=3), SolverConfig(epsilon=1e-12, max_iterations=40)):
        fit = back_and_forth_two(T1, T2, mags1, mags2, cfg)
        hist = [fit.trace.initial] + fit.trace.re_history
        assert fit.converged == (hist[-2][3] - hist[-1][3] <= cfg.epsilon)
        assert fit.converged or len(fit.trace) == cfg.max_iterations
        assert all(r[3] >= 0 for r in hist)


def test_global_phase_invariance(pair):
    T1, T2, d1, d2 = pair
    D = np.array([d.moment for d in PAIR]) * np.array([1.01, 0.98])
    base = [np.abs(T1 @ D), np.abs(T2 @ D)]
    for alpha in (0.3, -2.0, np.pi):
        rot = D * np.exp(1j * alpha)
        for T, b in zip((T1, T2), base):
            assert np.allclose(np.abs(T @ rot), b, rtol=1e-12, atol=0)
    re = [np.linalg.norm(d.magnitudes() - b) / np.linalg.norm(d.magnitudes()) for d, b in zip((d1, d2), base)]
    for alpha in (0.3, -2.0):
        rot = D * np.exp(1j * alpha)
        re_rot = [np.linalg.norm(d.magnitudes() - np.abs(T @ rot)) / np.linalg.norm(d.magnitudes())
                  for d, T in zip((d1, d2), (T1, T2))]
        assert np.allclose(re_rot, re, rtol=1e-12, atol=1e-15)


def test_noiseless_exact_layout_ratios(pair):
    T1, T2, d1, d2 = pair
    fit = back_and_forth_two(T1, T2, d1.magnitudes(), d2.magnitudes(), SolverConfig())
    assert fit.re < 1e-3
    ratio = fit.moments[1] / fit.moments[0]
    true_ratio = PAIR[1].moment / PAIR[0].moment
    assert abs(ratio) == pytest.approx(abs(true_ratio), rel=5e-3)
    assert abs(math.degrees(np.angle(ratio / true_ratio))) < 1.0


def test_single_surface_exact_dipole():
    s = make_cylinder(1.0, HEIGHTS, uniform_azimuths(36))
    src = [Dipole("PZ", (0.01, -0.02, 1.5), 0.0066 * np.exp(-0.18j))]
    T = build_transfer_matrix([("PZ", src[0].position)], s, PEC)
    fit = back_and_forth_single(T, forward_fields(src, s, PEC).magnitudes(), SolverConfig())
    assert fit.re < 1e-6 and fit.re2 is None and fit.re == fit.re1
    assert abs(fit.moments[0]) == pytest.approx(0.0066, rel=1e-6)


def test_single_vs_two_surface_consistency():
    rng = np.random.default_rng(12)
    s1 = make_cylinder(0.5, HEIGHTS, uniform_azimuths(36))
    s2 = make_cylinder(1.0, HEIGHTS, uniform_azimuths(36))
    layout = [("PY", (0.1, 0.05, 1.4)), ("MZ", (-0.2, 0.1, 1.6))]
    src = [Dipole(k, p, crandn(rng, 1)[0]) for k, p in layout]
    T1, T2 = build_transfer_matrix(layout, s1, PEC), build_transfer_matrix(layout, s2, PEC)
    m1, m2 = forward_fields(src, s1, PEC).magnitudes(), forward_fields(src, s2, PEC).magnitudes()
    two = back_and_forth_two(T1, T2, m1, m2, SolverConfig())
    one = back_and_forth_single(T2, m2, SolverConfig())
    assert two.re < 0.05 and one.re < 0.05


def test_numba_and_numpy_sweeps_agree(pair):
    T1, T2, d1, d2 = pair
    from dipex.solver import LeastSquares
    P1, P2 = LeastSquares(T1).operator, LeastSquares(T2).operator
    m1, m2 = d1.magnitudes(), d2.magnitudes()
    d0 = P2 @ m2.astype(complex)
    h1, h2 = np.empty((501, 3)), np.empty((501, 3))
    a = kernels.sweep_two_numpy(T1.entries, P1, m1, T2.entries, P2, m2, d0, 1e-4, 500, h1)
    b = kernels.sweep_two_numba(np.ascontiguousarray(T1.entries), P1, m1, np.ascontiguousarray(T2.entries),
                                P2, m2, d0, 1e-4, 500, h2)
    assert a[1] == b[1] and a[2] == b[2]
    assert np.allclose(a[0], b[0], rtol=1e-10)
    assert np.allclose(h1[: a[1] + 1], h2[: b[1] + 1], rtol=1e-10, atol=1e-14)
    h1, h2 = np.empty((501, 3)), np.empty((501, 3))
    a = kernels.sweep_one_numpy(T1.entries, P1, m1, P1 @ m1.astype(complex), 1e-4, 500, h1)
    b = kernels.sweep_one_numba(np.ascontiguousarray(T1.entries), P1, m1, P1 @ m1.astype(complex), 1e-4, 500, h2)
    assert a[1] == b[1] and np.allclose(a[0], b[0], rtol=1e-10)


# ---------------------------------------------------------------- phase

def test_retrieve_phase_exact_and_global_shift():
    s = make_cylinder(0.5, HEIGHTS, uniform_azimuths(12))
    src = [Dipole("PZ", (0, 0, 1.5), 0.006 * np.exp(-0.5j))]
    truth = forward_fields(src, s, PEC)
    got = retrieve_phase(src, s, PEC)
    assert np.array_equal(got.phase_u, truth.phase_u)
    rot = retrieve_phase([Dipole("PZ", (0, 0, 1.5), src[0].moment * np.exp(0.4j))], s, PEC)
    assert np.allclose(rot.magnitudes(), truth.magnitudes(), rtol=1e-14)
    diff = np.angle(np.exp(1j * (rot.phase_u - truth.phase_u)))
    assert np.allclose(diff, 0.4, atol=1e-12)


def test_align_constant_offset():
    rng = np.random.default_rng(0)
    b = rng.uniform(-np.pi, np.pi, 30)
    alpha, rms = align_global_phase(b + 0.3, b)
    assert alpha == pytest.approx(0.3, abs=1e-12) and rms == pytest.approx(0.0, abs=1e-12)


def test_align_antipodal():
    alpha, rms = align_global_phase(np.array([0.0, np.pi]), np.zeros(2), np.ones(2))
    assert rms == pytest.approx(np.pi / 2, abs=1e-12)
    assert abs(abs(alpha) - np.pi / 2) < 1e-12


def test_align_optimal_against_probes():
    rng = np.random.default_rng(3)
    a, b, w = rng.uniform(-3, 3, 40), rng.uniform(-3, 3, 40), rng.random(40)
    alpha, _ = align_global_phase(a, b, w)
    obj = lambda t: np.sum(w * np.cos(a - b - t))
    assert all(obj(alpha) >= obj(t) - 1e-12 for t in rng.uniform(-np.pi, np.pi, 100))


def test_align_zero_weights():
    with pytest.raises(ValueError):
        align_global_phase(np.zeros(3), np.zeros(3), np.zeros(3))


def test_trace_csv_format(pair):
    T1, T2, d1, d2 = pair
    fit = back_and_forth_two(T1, T2, d1.magnitudes(), d2.magnitudes(), SolverConfig(max_iterations=1))
    lines = fit.trace.to_csv().splitlines()
    assert lines[0] == "iter,re1,re2,re"
    assert len(lines) == 2


def test_single_surface_rows_describe_swept_moments():
    rng = np.random.default_rng(21)
    s2 = make_cylinder(1.0, HEIGHTS, uniform_azimuths(36))
    layout = [("PY", (0.1, 0.05, 1.4)), ("MZ", (-0.2, 0.1, 1.6))]
    src = [Dipole(k, p, m) for (k, p), m in zip(layout, crandn(rng, 2))]
    T2 = build_transfer_matrix(layout, s2, PEC)
    fit = back_and_forth_single(T2, forward_fields(src, s2, PEC).magnitudes(), SolverConfig())
    assert len(fit.trace) > 1
    assert fit.trace.re_history[0][3] < fit.trace.initial[3]
    assert fit.trace.re_history[-1][3] == fit.re
