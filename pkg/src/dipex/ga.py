"""Genetic search over dipole kinds and positions, nested in a dipole-count loop.

Each individual fixes a layout (kind + position per dipole); its fitness is
the relative error reached by the back-and-forth iteration for that layout,
so moments are never part of the genome.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np
import scipy.optimize

from .errors import ConfigError, DipexError, IllConditionedError, MetricError, SingularityError
from .forward import Dipole, DipoleType, Environment, transfer_entries
from .scan import FieldDataset
from .solver import FitResult, LeastSquares, SolverConfig, back_and_forth_single, back_and_forth_two

log = logging.getLogger(__name__)

PENALTY = 2.0
IMPROVEMENT_TOL = 1e-6
MUTATION_SIGMA = 0.05


@dataclass(frozen=True)
class SearchBounds:
    x_range: tuple = (-0.5, 0.5)
    y_range: tuple = (-0.5, 0.5)
    z_range: tuple = (1.0, 2.0)
    allowed_kinds: tuple = tuple(DipoleType)

    def __post_init__(self):
        for name in ("x_range", "y_range", "z_range"):
            lo, hi = (float(v) for v in getattr(self, name))
            if not (math.isfinite(lo) and math.isfinite(hi)) or hi < lo:
                raise ConfigError(f"{name} must be a finite interval with lo <= hi")
            object.__setattr__(self, name, (lo, hi))
        kinds = tuple(dict.fromkeys(DipoleType.parse(k) for k in self.allowed_kinds))
        if not kinds:
            raise ConfigError("allowed_kinds is empty")
        object.__setattr__(self, "allowed_kinds", kinds)

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.x_range[0], self.y_range[0], self.z_range[0]])

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.x_range[1], self.y_range[1], self.z_range[1]])

    def contains(self, positions, tol: float = 0.0) -> bool:
        p = np.asarray(positions).reshape(-1, 3)
        return bool(np.all(p >= self.lower - tol) and np.all(p <= self.upper + tol))

    @classmethod
    def from_dict(cls, d: dict) -> "SearchBounds":
        d = dict(d)
        kinds = d.pop("kinds", d.pop("allowed_kinds", [k.name for k in DipoleType]))
        rng = {k: tuple(d.pop(k, d.pop(f"{k[0]}_range", default)))
               for k, default in (("x", (-0.5, 0.5)), ("y", (-0.5, 0.5)), ("z", (1.0, 2.0)))}
        if d:
            raise ConfigError(f"unknown bounds keys {sorted(d)}")
        return cls(rng["x"], rng["y"], rng["z"], tuple(kinds))

    def to_dict(self) -> dict:
        return {"x": list(self.x_range), "y": list(self.y_range), "z": list(self.z_range),
                "kinds": [k.name for k in self.allowed_kinds]}


@dataclass(frozen=True)
class GAConfig:
    population: int = 50
    max_generations: int = 100
    stall_generations: int = 20
    crossover_rate: float = 0.8
    mutation_rate: float = 0.15
    elite_count: int = 2
    seed: int = 0
    tournament_size: int = 3
    mutation_sigma: float = 0.05
    reset_rate: float = 0.4
    polish_evals: int = 600
    polish_step: float = 0.02
    workers: int = 1

    def __post_init__(self):
        if self.population < 2:
            raise ConfigError("population must be >= 2")
        if not all(0 <= r <= 1 for r in (self.crossover_rate, self.mutation_rate, self.reset_rate)):
            raise ConfigError("crossover_rate, mutation_rate and reset_rate must lie in [0, 1]")
        if not 0 <= self.elite_count < self.population:
            raise ConfigError("elite_count must be in [0, population)")
        if self.max_generations < 1 or self.stall_generations < 1:
            raise ConfigError("max_generations and stall_generations must be >= 1")
        if self.tournament_size < 1 or self.workers < 1:
            raise ConfigError("tournament_size and workers must be >= 1")
        if self.polish_evals < 0 or not self.polish_step > 0:
            raise ConfigError("polish_evals must be >= 0 and polish_step > 0")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")

    @classmethod
    def from_dict(cls, d: dict | None) -> "GAConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        if set(d) - known:
            raise ConfigError(f"unknown ga keys {sorted(set(d) - known)}")
        return cls(**d)


@dataclass
class Problem:
    """Measured magnitude datasets (one or two surfaces) plus the environment."""

    datasets: tuple
    env: Environment

    def __post_init__(self):
        self.datasets = tuple(self.datasets)
        if len(self.datasets) not in (1, 2):
            raise ConfigError(f"expected one or two datasets, got {len(self.datasets)}")
        for ds in self.datasets:
            if not math.isclose(ds.frequency, self.env.frequency, rel_tol=1e-12):
                raise ConfigError(f"dataset {ds.label} is at {ds.frequency} Hz, environment at {self.env.frequency} Hz")
            if not ds.magnitudes().any():
                raise MetricError(f"dataset {ds.label} is identically zero")
        self.mags = tuple(np.ascontiguousarray(ds.magnitudes()) for ds in self.datasets)

    @property
    def single_surface(self) -> bool:
        return len(self.datasets) == 1


@dataclass
class Individual:
    kinds: tuple
    positions: np.ndarray
    fitness: float = math.inf
    fit: FitResult | None = field(default=None, repr=False)

    @property
    def n_dipoles(self) -> int:
        return len(self.kinds)

    @property
    def genes(self) -> list:
        out = []
        for k, p in zip(self.kinds, self.positions):
            out.extend([DipoleType(k), *map(float, p)])
        return out

    def key(self):
        return tuple(self.kinds), np.asarray(self.positions, dtype=float).tobytes()

    def dipoles(self) -> list[Dipole]:
        moments = self.fit.moments if self.fit is not None else np.zeros(self.n_dipoles)
        return [Dipole(DipoleType(k), p, m) for k, p, m in zip(self.kinds, self.positions, moments)]


def fit_layout(kinds, positions, problem: Problem, cfg: SolverConfig) -> FitResult:
    """Back-and-forth fit for a fixed layout; raises on singular/ill-conditioned layouts."""
    kinds = np.asarray(kinds, dtype=np.int64)
    positions = np.ascontiguousarray(positions, dtype=float).reshape(-1, 3)
    if problem.env.ground and np.any(positions[:, 2] <= 0):
        raise SingularityError("dipole on or below the ground plane")
    Ts = [transfer_entries(kinds, positions, ds.surface, problem.env) for ds in problem.datasets]
    solvers = [LeastSquares(T, cfg.rcond) for T in Ts]
    if problem.single_surface:
        return back_and_forth_single(Ts[0], problem.mags[0], cfg, solver=solvers[0])
    return back_and_forth_two(Ts[0], Ts[1], problem.mags[0], problem.mags[1], cfg, solvers=solvers)


def evaluate_individual(ind: Individual, problem: Problem, cfg: SolverConfig = SolverConfig()) -> float:
    """Set and return the individual's fitness; failed layouts get ``PENALTY``."""
    try:
        ind.fit = fit_layout(ind.kinds, ind.positions, problem, cfg)
        ind.fitness = ind.fit.re if math.isfinite(ind.fit.re) else PENALTY
    except (IllConditionedError, SingularityError, np.linalg.LinAlgError):
        ind.fit = None
        ind.fitness = PENALTY
    return ind.fitness


class _Evaluator:
    """Fitness evaluation with a per-run cache (elites are never re-solved)."""

    def __init__(self, problem, cfg, workers=1):
        self.problem, self.cfg, self.workers = problem, cfg, workers
        self.cache = {}
        self.evaluated = []

    def __call__(self, population):
        todo = []
        for ind in population:
            hit = self.cache.get(ind.key())
            if hit is not None:
                ind.fitness, ind.fit = hit
            else:
                todo.append(ind)
        unique = list({ind.key(): ind for ind in todo}.values())
        if self.workers > 1 and len(unique) > 1:
            with ThreadPoolExecutor(self.workers) as pool:
                list(pool.map(lambda i: evaluate_individual(i, self.problem, self.cfg), unique))
        else:
            for ind in unique:
                evaluate_individual(ind, self.problem, self.cfg)
        for ind in unique:
            self.cache[ind.key()] = (ind.fitness, ind.fit)
            self.evaluated.append((tuple(ind.kinds), ind.positions.copy()))
        for ind in todo:
            ind.fitness, ind.fit = self.cache[ind.key()]


def _random_individual(n, bounds, rng):
    kinds = tuple(int(bounds.allowed_kinds[i]) for i in rng.integers(len(bounds.allowed_kinds), size=n))
    pos = bounds.lower + (bounds.upper - bounds.lower) * rng.random((n, 3))
    return Individual(kinds, pos)


def _tournament(ranked, size, rng):
    # ranked is sorted best-first; the lowest rank among the drawn entrants wins
    return ranked[int(rng.integers(len(ranked), size=size).min())]


def _crossover(a, b, rng):
    mask = rng.random(a.n_dipoles) < 0.5
    k1 = tuple(ka if m else kb for ka, kb, m in zip(a.kinds, b.kinds, mask))
    k2 = tuple(kb if m else ka for ka, kb, m in zip(a.kinds, b.kinds, mask))
    p1 = np.where(mask[:, None], a.positions, b.positions)
    p2 = np.where(mask[:, None], b.positions, a.positions)
    return Individual(k1, p1), Individual(k2, p2)


def _mutate(ind, bounds, rate, rng, sigma_frac=MUTATION_SIGMA, reset_rate=0.0):
    lo, hi = bounds.lower, bounds.upper
    sigma = sigma_frac * (hi - lo)
    kinds = list(ind.kinds)
    pos = ind.positions.copy()
    for i in range(ind.n_dipoles):
        if rng.random() < rate:
            kinds[i] = int(bounds.allowed_kinds[int(rng.integers(len(bounds.allowed_kinds)))])
        hit = rng.random(3) < rate
        pos[i] = np.where(hit, np.clip(pos[i] + sigma * rng.standard_normal(3), lo, hi), pos[i])
    if reset_rate and rng.random() < reset_rate:
        # redraw one whole dipole so a good partial layout can reach distant basins
        i = int(rng.integers(ind.n_dipoles))
        kinds[i] = int(bounds.allowed_kinds[int(rng.integers(len(bounds.allowed_kinds)))])
        pos[i] = lo + (hi - lo) * rng.random(3)
    return Individual(tuple(kinds), pos)


def _rank(population):
    # stable sort: equal fitness keeps population order (lower index wins)
    return sorted(population, key=lambda ind: ind.fitness)


def polish(ind: Individual, bounds: SearchBounds, problem: Problem, solver: SolverConfig,
           max_evals: int = 600, step: float = 0.02, evaluated: list | None = None) -> Individual:
    """Bounded Nelder-Mead on the positions of ``ind`` with its kinds held fixed.

    ``step`` is the initial simplex edge as a fraction of each axis range.
    Returns ``ind`` itself unless a strictly better layout is found.
    """
    if max_evals <= 0 or ind.fit is None:
        return ind
    lo = np.tile(bounds.lower, ind.n_dipoles)
    hi = np.tile(bounds.upper, ind.n_dipoles)
    x0 = np.asarray(ind.positions, dtype=float).ravel()
    span = np.where(hi > lo, hi - lo, 0.0)
    simplex = [x0]
    for i in range(len(x0)):
        x = x0.copy()
        # step inward so the simplex stays inside the box
        x[i] += step * span[i] if x0[i] + step * span[i] <= hi[i] else -step * span[i]
        simplex.append(x)
    best = [ind]

    def f(x):
        cand = Individual(ind.kinds, np.clip(x, lo, hi).reshape(-1, 3))
        evaluate_individual(cand, problem, solver)
        if evaluated is not None:
            evaluated.append((tuple(cand.kinds), cand.positions.copy()))
        if cand.fitness < best[0].fitness:
            best[0] = cand
        return cand.fitness

    scipy.optimize.minimize(f, x0, method="Nelder-Mead", bounds=list(zip(lo, hi)),
                            options={"initial_simplex": np.array(simplex), "maxfev": max_evals,
                                     "xatol": 1e-6, "fatol": 1e-9})
    return best[0]


def ga_run(n_dipoles: int, bounds: SearchBounds, ga: GAConfig, problem: Problem,
           solver: SolverConfig = SolverConfig(), rng: np.random.Generator | None = None,
           history: list | None = None, evaluated: list | None = None) -> Individual:
    """Best individual found for a fixed dipole count.

    Stops after ``max_generations`` or when the best fitness has not improved
    by more than 1e-6 for ``stall_generations`` generations.  ``history``
    receives the best fitness per generation, ``evaluated`` every distinct
    layout that was solved.
    """
    if n_dipoles < 1:
        raise ConfigError("n_dipoles must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(ga.seed)
    evaluate = _Evaluator(problem, solver, ga.workers)

    population = [_random_individual(n_dipoles, bounds, rng) for _ in range(ga.population)]
    evaluate(population)
    ranked = _rank(population)
    best = ranked[0]
    curve = [best.fitness]
    stall = 0
    log.info("N=%d gen 1: best RE %.6g", n_dipoles, best.fitness)
    for gen in range(2, ga.max_generations + 1):
        if stall >= ga.stall_generations:
            break
        children = [Individual(e.kinds, e.positions.copy(), e.fitness, e.fit) for e in ranked[:ga.elite_count]]
        while len(children) < ga.population:
            a = _tournament(ranked, ga.tournament_size, rng)
            b = _tournament(ranked, ga.tournament_size, rng)
            if rng.random() < ga.crossover_rate:
                c1, c2 = _crossover(a, b, rng)
            else:
                c1, c2 = Individual(a.kinds, a.positions.copy()), Individual(b.kinds, b.positions.copy())
            children.append(_mutate(c1, bounds, ga.mutation_rate, rng, ga.mutation_sigma, ga.reset_rate))
            if len(children) < ga.population:
                children.append(_mutate(c2, bounds, ga.mutation_rate, rng, ga.mutation_sigma, ga.reset_rate))
        evaluate(children)
        ranked = _rank(children)
        if ranked[0].fitness < best.fitness - IMPROVEMENT_TOL:
            stall = 0
        else:
            stall += 1
        if ranked[0].fitness < best.fitness:
            best = ranked[0]
        curve.append(best.fitness)
        log.info("N=%d gen %d: best RE %.6g", n_dipoles, gen, best.fitness)
    polished = polish(best, bounds, problem, solver, ga.polish_evals, ga.polish_step, evaluate.evaluated)
    if polished is not best:
        log.info("N=%d polish: RE %.6g -> %.6g", n_dipoles, best.fitness, polished.fitness)
        best = polished
        curve.append(best.fitness)
    if history is not None:
        history.extend(curve)
    if evaluated is not None:
        evaluated.extend(evaluate.evaluated)
    return best


@dataclass
class ExtractionResult:
    dipoles: list
    re: float
    re1: float
    re2: float | None
    n_history: list
    generation_history: dict
    seed: int
    capped: bool = False
    warnings: list = field(default_factory=list)
    fit: FitResult | None = field(default=None, repr=False)

    @property
    def n_dipoles(self) -> int:
        return len(self.dipoles)

    def report(self) -> dict:
        return {
            "n_dipoles": self.n_dipoles,
            "dipoles": [d.to_record() for d in self.dipoles],
            "re": self.re,
            "re1": self.re1,
            "re2": self.re2,
            "n_history": [list(r) for r in self.n_history],
            "generation_history": {str(k): v for k, v in self.generation_history.items()},
            "seed": self.seed,
            "capped": self.capped,
            "warnings": list(self.warnings),
            "iterations": len(self.fit.trace) if self.fit is not None else None,
        }


def _count_rng(seed, n):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(n)]))


def extract_auto(bounds: SearchBounds, ga: GAConfig, solver: SolverConfig, problem: Problem,
                 mu: float = 0.01, max_dipoles: int = 10) -> ExtractionResult:
    """Add dipoles one at a time until the best RE stops improving by more than ``mu``.

    The zero-dipole baseline RE is 1.  When adding the N-th dipole gains
    ``<= mu`` the (N-1)-dipole layout is returned; N = 1 is returned if even the
    first dipole does not beat the baseline by ``mu``.
    """
    if not mu > 0:
        raise ConfigError("mu must be positive")
    if max_dipoles < 1:
        raise ConfigError("max_dipoles must be >= 1")
    prev_re = 1.0
    prev = None
    n_history, gen_history, warnings = [], {}, []
    chosen, capped = None, False
    for n in range(1, max_dipoles + 1):
        curve = []
        best = ga_run(n, bounds, ga, problem, solver, rng=_count_rng(ga.seed, n), history=curve)
        n_history.append((n, best.fitness))
        gen_history[n] = curve
        log.info("N=%d: best RE %.6g (previous %.6g)", n, best.fitness, prev_re)
        if prev_re - best.fitness <= mu:
            chosen = prev if prev is not None else best
            if prev is None:
                warnings.append("a single dipole does not improve on the zero-source baseline by mu")
            break
        prev_re, prev = best.fitness, best
    else:
        chosen, capped = prev, True
        warnings.append(f"max_dipoles={max_dipoles} reached before RE converged")
        log.warning(warnings[-1])
    if chosen.fit is None:
        raise DipexError("no admissible layout found (all candidates ill-conditioned)")
    fit = chosen.fit
    return ExtractionResult(
        dipoles=chosen.dipoles(), re=fit.re, re1=fit.re1, re2=fit.re2,
        n_history=n_history, generation_history=gen_history, seed=int(ga.seed),
        capped=capped, warnings=warnings, fit=fit,
    )


def problem_from_datasets(datasets: Sequence[FieldDataset], ground: bool) -> Problem:
    return Problem(tuple(datasets), Environment(datasets[0].frequency, ground))
