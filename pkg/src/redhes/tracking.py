"""Real-time tracking of the reduced-space optimum under time-varying loads.

Each period takes one curvature step ``p <- p - H^{-1} g`` computed at the
new loads: step 1 forms the reduced gradient and the full reduced Hessian,
step 2 solves the dense symmetric system by Cholesky.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
import scipy.linalg as la

from .grid import PowerNetwork
from .powerflow import LoadVector, PowerFlowProblem
from .reduction import (DEFAULT_TOL, NewtonError, full_reduced_hessian, make_workspace,
                        newton_solve, reduced_gradient)
from .sparse_linalg import SingularMatrixError

log = logging.getLogger(__name__)

TAU_START = 1e-6
TAU_MAX_DOUBLINGS = 200
ORACLE_GRAD_TOL = 1e-6

CSV_COLUMNS = ("t", "cost", "cost_optimal", "grad_norm", "step_norm", "max_dev",
               "median_dev", "ms_step1", "ms_step2", "tau", "status")


# --------------------------------------------------------------------------
# load scenarios

@dataclass(frozen=True)
class LoadScenario:
    """Loads over ``T`` periods, each within ``amplitude`` of the base loads."""

    base: LoadVector
    loads: tuple
    rule: str
    amplitude: float
    seed: int | None = None

    def __post_init__(self):
        if len(self.loads) < 1:
            raise ValueError("a scenario needs at least one period")

    def __len__(self):
        return len(self.loads)

    def __getitem__(self, t) -> LoadVector:
        return self.loads[t]

    def __iter__(self):
        return iter(self.loads)

    @classmethod
    def constant(cls, base: LoadVector, periods: int) -> "LoadScenario":
        return cls(base, (base,) * periods, "constant", 0.0)

    @classmethod
    def sinusoidal(cls, base: LoadVector, periods: int, amplitude: float = 0.05,
                   cycles: float = 1.0) -> "LoadScenario":
        """All loads scaled by ``1 + amplitude * sin(2 pi cycles t / T)``."""
        _check_amplitude(amplitude)
        t = np.arange(periods)
        factors = 1.0 + amplitude * np.sin(2 * np.pi * cycles * t / periods)
        return cls(base, tuple(base.scaled(f) for f in factors), "sinusoidal", amplitude)

    @classmethod
    def random_walk(cls, base: LoadVector, periods: int, sigma: float = 0.005,
                    amplitude: float = 0.05, seed: int = 0) -> "LoadScenario":
        """Per-bus multiplicative random walk, clipped to ``1 +- amplitude``.

        The same factor scales the active and reactive load of a bus.
        """
        _check_amplitude(amplitude)
        if sigma < 0:
            raise ValueError("sigma must be nonnegative")
        rng = np.random.default_rng(seed)
        n = len(base.p_load)
        f = np.ones(n)
        out = []
        for _ in range(periods):
            out.append(LoadVector(base.p_load * f, base.q_load * f))
            f = np.clip(f + sigma * rng.standard_normal(n), 1 - amplitude, 1 + amplitude)
        return cls(base, tuple(out), "random_walk", amplitude, seed)


def _check_amplitude(a):
    if not 0 <= a < 1:
        raise ValueError("amplitude must lie in [0, 1)")


# --------------------------------------------------------------------------
# trace

@dataclass
class StepRecord:
    t: int
    p: np.ndarray = field(repr=False)
    x: np.ndarray | None = field(default=None, repr=False)
    cost: float = math.nan
    grad_norm: float = math.nan
    step_norm: float = math.nan
    ms_step1: float = 0.0
    ms_step2: float = 0.0
    tau: float = 0.0
    status: str = "ok"
    descent: float = math.nan
    newton_iterations: int = 0
    p_optimal: np.ndarray | None = field(default=None, repr=False)
    cost_optimal: float = math.nan
    max_dev: float = math.nan
    median_dev: float = math.nan

    @property
    def failed(self) -> bool:
        return self.status != "ok"

    def row(self) -> dict:
        return {k: getattr(self, k) for k in CSV_COLUMNS}


@dataclass
class TrackingTrace:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i) -> StepRecord:
        return self.records[i]

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    def rows(self) -> list[dict]:
        return [r.row() for r in self.records]

    def write_csv(self, stream):
        w = csv.DictWriter(stream, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.rows():
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})

    def median_deviation(self) -> float:
        d = np.concatenate([np.abs(r.p - r.p_optimal) for r in self.records
                            if r.p_optimal is not None and not r.failed] or [np.array([])])
        return float(np.median(d)) if d.size else math.nan


# --------------------------------------------------------------------------
# dense Newton system

def solve_newton_system(H: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, float]:
    """``d`` with ``(H + tau I) d = -g`` by Cholesky.

    ``tau = 0`` when ``H`` is positive definite; otherwise ``tau`` starts at
    ``TAU_START`` and doubles until the factorization succeeds.
    """
    H = 0.5 * (H + H.T)
    tau = 0.0
    for _ in range(TAU_MAX_DOUBLINGS):
        try:
            c = la.cho_factor(H + tau * np.eye(len(H)) if tau else H)
            return -la.cho_solve(c, g), tau
        except la.LinAlgError:
            tau = TAU_START if tau == 0 else 2 * tau
    raise la.LinAlgError("regularized Newton system stayed indefinite")


# --------------------------------------------------------------------------
# steps

def tracking_step(problem: PowerFlowProblem, p: np.ndarray, batch_size: int,
                  threads: int = 1, x0: np.ndarray | None = None,
                  tol: float = DEFAULT_TOL, t: int = 0) -> tuple[np.ndarray, StepRecord, np.ndarray]:
    """One tracking update at the loads held by ``problem``.

    Returns ``(p_next, record, x)`` where ``x`` solves the power flow at
    ``p`` and can warm-start the next period.
    """
    p = np.asarray(p, dtype=float)
    t0 = time.perf_counter()
    proj = newton_solve(problem, p, x0, tol=tol)
    ws = make_workspace(problem, proj, p, threads=threads)
    g = reduced_gradient(ws)
    H = full_reduced_hessian(ws, batch_size)
    t1 = time.perf_counter()
    if np.any(g):
        d, tau = solve_newton_system(H, g)
    else:
        d, tau = np.zeros_like(p), 0.0
    t2 = time.perf_counter()
    rec = StepRecord(t=t, p=p.copy(), x=proj.x, cost=float(problem.objective(proj.x, p)),
                     grad_norm=float(np.abs(g).max()), step_norm=float(np.abs(d).max()),
                     ms_step1=1e3 * (t1 - t0), ms_step2=1e3 * (t2 - t1), tau=tau,
                     descent=float(g @ d), newton_iterations=proj.iterations)
    return p + d, rec, proj.x


def optimal_parameters(problem: PowerFlowProblem, p0: np.ndarray, x0=None,
                       grad_tol: float = ORACLE_GRAD_TOL, max_iter: int = 50,
                       batch_size: int | None = None, tol: float = 1e-10
                       ) -> tuple[np.ndarray, float, np.ndarray]:
    """Offline optimum of ``F`` by damped Newton with Armijo backtracking.

    Steps that leave the power-flow basin are halved like rejected steps.
    Returns ``(p_star, F(p_star), x_star)``.
    """
    p = np.asarray(p0, dtype=float).copy()
    n = batch_size or problem.n_p
    proj = newton_solve(problem, p, x0, tol=tol)
    fval = float(problem.objective(proj.x, p))
    for it in range(max_iter):
        ws = make_workspace(problem, proj, p)
        g = reduced_gradient(ws)
        if np.abs(g).max() <= grad_tol:
            return p, fval, proj.x
        d, _ = solve_newton_system(full_reduced_hessian(ws, n), g)
        slope = float(g @ d)
        if slope >= 0:
            d, slope = -g, -float(g @ g)
        alpha = 1.0
        while True:
            q = p + alpha * d
            try:
                trial = newton_solve(problem, q, proj.x, tol=tol)
                fq = float(problem.objective(trial.x, q))
            except (NewtonError, SingularMatrixError):
                fq = math.inf
            # slack absorbs roundoff in F once the predicted decrease is tiny
            if fq <= fval + 1e-4 * alpha * slope + 1e-13 * abs(fval):
                break
            alpha *= 0.5
            if alpha < 1e-10:
                raise RuntimeError(f"line search stalled at iteration {it}, "
                                   f"|grad F| = {np.abs(g).max():.3e}")
        p, fval, proj = q, fq, trial
    raise RuntimeError(f"optimum oracle did not reach |grad F| <= {grad_tol:g} "
                       f"in {max_iter} iterations")


def run_tracking(net: PowerNetwork, scenario: Iterable[LoadVector], p0: np.ndarray,
                 batch_size: int, threads: int = 1, oracle: bool = False,
                 tol: float = DEFAULT_TOL, x0: np.ndarray | None = None) -> TrackingTrace:
    """Track the optimum over all periods of ``scenario``.

    Record ``t`` describes the point ``p_t`` used at loads ``w_t`` and the
    step taken from it.  A period whose power flow or dense solve fails is
    marked and ``p`` is carried over unchanged.  With ``oracle`` each
    period also gets the exact optimum ``p_t*`` and the deviations
    ``|p_t - p_t*|``.  ``x0`` warm-starts the first power flow; flat start
    otherwise.
    """
    trace = TrackingTrace()
    p = np.asarray(p0, dtype=float).copy()
    x = None if x0 is None else np.asarray(x0, dtype=float)
    p_star, x_star = p.copy(), x
    for t, loads in enumerate(scenario):
        problem = PowerFlowProblem(net, loads)
        try:
            p_next, rec, x = tracking_step(problem, p, batch_size, threads, x, tol, t)
        except (NewtonError, SingularMatrixError, la.LinAlgError) as exc:
            log.warning("tracking step %d failed: %s", t, exc)
            rec = StepRecord(t=t, p=p.copy(), status=f"failed: {type(exc).__name__}")
            p_next = p
        if oracle:
            try:
                p_star, f_star, x_star = optimal_parameters(problem, p_star, x_star,
                                                            batch_size=batch_size)
                rec.p_optimal = p_star.copy()
                rec.cost_optimal = f_star
                dev = np.abs(rec.p - p_star)
                rec.max_dev = float(dev.max())
                rec.median_dev = float(np.median(dev))
            except (NewtonError, SingularMatrixError, la.LinAlgError, RuntimeError) as exc:
                log.warning("optimum oracle failed at period %d: %s", t, exc)
                p_star, x_star = rec.p.copy(), None
        trace.records.append(rec)
        p = p_next
    return trace
