"""Reduced-space first and second order sensitivities.

For a parametric system ``g(x, p) = 0`` with objective ``f(x, p)``, the
reduced function is ``F(p) = f(x(p), p)``.  Given the solution ``x(p)``
(:func:`newton_solve`) this module computes

* the reduced gradient with one transposed solve for the adjoint ``lam``;
* reduced Hessian-vector products with the adjoint-adjoint scheme: a
  forward solve for ``z``, a Hessian-of-Lagrangian projection along
  ``(z, w)`` and a transposed solve for ``psi``;
* the same for a block of ``N`` vectors at once, with a barrier after each
  solve stage, and the full reduced Hessian by Cartesian blocks.

A *problem* is any object providing ``n_x``, ``n_p``, ``residual(x, p)``,
``objective(x, p)``, ``jacobians(x, p) -> (csc, csc)``,
``objective_gradient(x, p)`` and ``lagrangian_adjoint(x, p, lam)`` where the
latter works on dual inputs (see :mod:`redhes.autodiff`).
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import sparse_linalg as sl
from .autodiff import DEFAULT_WIDTH, hessian_tensor_projection

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8
DEFAULT_MEMORY_BUDGET = 2 * 1024**3
STAGES = ("SpMul", "BatchSparseSolve", "BatchTensorProjection", "SpMulAdd")


class NewtonError(RuntimeError):
    def __init__(self, message: str, history: list[float]):
        super().__init__(message)
        self.history = history


class MaxIterationsError(NewtonError):
    pass


class DivergenceError(NewtonError):
    pass


@dataclass
class ProjectionResult:
    x: np.ndarray
    iterations: int
    residual_norm: float
    factors: sl.LUFactors = field(repr=False)
    jac_x: sp.csc_matrix = field(repr=False)
    jac_p: sp.csc_matrix = field(repr=False)
    history: list[float] = field(default_factory=list)

    @property
    def x_star(self) -> np.ndarray:
        return self.x


def newton_solve(problem, p: np.ndarray, x0: np.ndarray | None = None,
                 tol: float = DEFAULT_TOL, max_iter: int = 20,
                 symbolic: sl.SymbolicAnalysis | None = None) -> ProjectionResult:
    """Plain Newton-Raphson on ``g(., p) = 0``; no damping.

    The Jacobian is analyzed and factorized once, then refactorized at every
    later iterate.  The returned factors belong to the final iterate.
    Raises :class:`DivergenceError` if the residual norm grows four times in
    a row and :class:`MaxIterationsError` after ``max_iter`` steps.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    p = np.asarray(p, dtype=np.float64)
    x = np.array(problem.initial_state() if x0 is None else x0, dtype=np.float64)
    history: list[float] = []
    factors = None
    growth = 0
    for it in range(max_iter + 1):
        r = np.asarray(problem.residual(x, p))
        norm = float(np.max(np.abs(r))) if len(r) else 0.0
        history.append(norm)
        if not np.isfinite(norm):
            raise DivergenceError(f"residual became non-finite at iteration {it}", history)
        if it > 0 and norm > history[-2]:
            growth += 1
            if growth >= 4:
                raise DivergenceError(
                    f"residual grew 4 iterations in a row (|g| = {norm:.3e})", history)
        else:
            growth = 0
        jx, jp = problem.jacobians(x, p)
        if factors is None:
            factors = sl.lu_factorize(jx, symbolic)
        else:
            factors = sl.lu_refactorize(factors, jx)
        if norm <= tol:
            log.debug("newton converged in %d iterations, |g| = %.3e", it, norm)
            return ProjectionResult(x, it, norm, factors, jx, jp, history)
        if it == max_iter:
            break
        x = x - sl.solve(factors, r)
    raise MaxIterationsError(f"no convergence in {max_iter} iterations "
                             f"(|g| = {history[-1]:.3e})", history)


@dataclass(eq=False)
class ReductionWorkspace:
    """Buffers of one reduction at a fixed ``(x*, p)``.

    ``lam`` is filled by :func:`reduced_gradient`.  ``W, B, Z, Psi, Yx, Yp``
    hold the last batch; ``timings`` accumulates seconds per stage.
    """

    problem: object
    projection: ProjectionResult
    p: np.ndarray
    width: int = DEFAULT_WIDTH
    threads: int = 1
    memory_budget: int = DEFAULT_MEMORY_BUDGET
    lam: np.ndarray | None = None
    gradient: np.ndarray | None = None
    W: np.ndarray | None = field(default=None, repr=False)
    B: np.ndarray | None = field(default=None, repr=False)
    Z: np.ndarray | None = field(default=None, repr=False)
    Psi: np.ndarray | None = field(default=None, repr=False)
    Yx: np.ndarray | None = field(default=None, repr=False)
    Yp: np.ndarray | None = field(default=None, repr=False)
    timings: dict = field(default_factory=lambda: dict.fromkeys(STAGES, 0.0))
    batches: int = 0

    @property
    def x(self) -> np.ndarray:
        return self.projection.x

    @property
    def n_x(self) -> int:
        return self.problem.n_x

    @property
    def n_p(self) -> int:
        return self.problem.n_p

    def batch_bytes(self, n: int) -> int:
        """Bytes held by the dense batch buffers for ``n`` columns."""
        nx, np_ = self.n_x, self.n_p
        dense = 8 * n * (2 * np_ + 3 * nx + np_ + nx)
        tape = getattr(self.problem, "tape_bytes", lambda w: 0)(min(n, self.width))
        return dense + tape

    def reset_timings(self):
        self.timings = dict.fromkeys(STAGES, 0.0)
        self.batches = 0


def make_workspace(problem, projection: ProjectionResult, p: np.ndarray, **kwargs
                   ) -> ReductionWorkspace:
    ws = ReductionWorkspace(problem, projection, np.asarray(p, dtype=np.float64), **kwargs)
    if ws.width < 1:
        raise ValueError("dual width must be at least 1")
    if ws.threads < 1:
        raise ValueError("thread count must be at least 1")
    return ws


def reduced_gradient(ws: ReductionWorkspace) -> np.ndarray:
    """``grad F = df/dp + lam^T dg/dp`` with ``(dg/dx)^T lam = -(df/dx)^T``."""
    prob, proj = ws.problem, ws.projection
    fx, fp = prob.objective_gradient(proj.x, ws.p)
    ws.lam = sl.solve_transpose(proj.factors, -np.asarray(fx))
    ws.gradient = np.asarray(fp) + sl.spmv_transpose(proj.jac_p, ws.lam)
    return ws.gradient


def _ensure_adjoint(ws: ReductionWorkspace):
    if ws.lam is None:
        reduced_gradient(ws)


def _adjoint_kernel(problem):
    return lambda x, p, lam: problem.lagrangian_adjoint(x, p, lam)


def hessian_vector_product(ws: ReductionWorkspace, w: np.ndarray) -> np.ndarray:
    """One reduced Hessian-vector product ``(grad^2 F) w``, step by step."""
    _ensure_adjoint(ws)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (ws.n_p,):
        raise ValueError(f"direction must have shape ({ws.n_p},), got {w.shape}")
    proj = ws.projection
    b = sl.spmv(proj.jac_p, w)
    z = sl.solve(proj.factors, -b)
    v = np.concatenate([z, w])[:, None]
    yx, yp = hessian_tensor_projection(_adjoint_kernel(ws.problem), proj.x, ws.p,
                                       ws.lam, v, width=1)
    psi = sl.solve_transpose(proj.factors, -yx[:, 0])
    return yp[:, 0] + sl.spmv_transpose(proj.jac_p, psi)


def batch_reduced_hessian(ws: ReductionWorkspace, W: np.ndarray) -> np.ndarray:
    """``(grad^2 F) W`` for a seed block ``W`` of shape ``(n_p, N)``.

    Stages: ``B = (dg/dp) W``; solve ``(dg/dx) Z = -B``; project along
    ``V = (Z, W)``; solve ``(dg/dx)^T Psi = -Y_x``; ``Y_p + (dg/dp)^T Psi``.
    Each stage finishes for all columns before the next one starts.
    """
    _ensure_adjoint(ws)
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] != ws.n_p:
        raise ValueError(f"seed block must have {ws.n_p} rows, got {W.shape}")
    n = W.shape[1]
    need = ws.batch_bytes(n)
    if need > ws.memory_budget:
        per_col = max(1, ws.batch_bytes(1))
        raise MemoryError(
            f"batch of {n} columns needs about {need / 2**20:.1f} MiB, over the "
            f"{ws.memory_budget / 2**20:.1f} MiB budget; use a batch size of at most "
            f"{max(1, ws.memory_budget // per_col)}")
    proj = ws.projection
    t = ws.timings
    t0 = time.perf_counter()
    B = sl.spmm(proj.jac_p, W)
    t1 = time.perf_counter()
    Z = sl.batch_solve(proj.factors, -B, threads=ws.threads)
    t2 = time.perf_counter()
    # sync: all of Z before the projection
    V = np.vstack([Z, W])
    Yx, Yp = hessian_tensor_projection(_adjoint_kernel(ws.problem), proj.x, ws.p, ws.lam,
                                       V, width=ws.width, threads=ws.threads)
    t3 = time.perf_counter()
    # sync: all of Y_x before the transposed solve
    Psi = sl.batch_solve_transpose(proj.factors, -Yx, threads=ws.threads)
    t4 = time.perf_counter()
    HW = Yp + sl.spmm_transpose(proj.jac_p, Psi)
    t5 = time.perf_counter()
    t["SpMul"] += t1 - t0
    t["BatchSparseSolve"] += (t2 - t1) + (t4 - t3)
    t["BatchTensorProjection"] += t3 - t2
    t["SpMulAdd"] += t5 - t4
    ws.batches += 1
    ws.W, ws.B, ws.Z, ws.Psi, ws.Yx, ws.Yp = W, B, Z, Psi, Yx, Yp
    return HW


def n_batches(n_p: int, batch_size: int) -> int:
    return math.ceil(n_p / batch_size)


def full_reduced_hessian(ws: ReductionWorkspace, batch_size: int) -> np.ndarray:
    """Assemble the ``n_p x n_p`` reduced Hessian from Cartesian seed blocks
    of at most ``batch_size`` columns."""
    if batch_size < 1:
        raise ValueError("batch size must be at least 1")
    n = ws.n_p
    H = np.empty((n, n))
    for j0 in range(0, n, batch_size):
        j1 = min(j0 + batch_size, n)
        W = np.zeros((n, j1 - j0))
        W[np.arange(j0, j1), np.arange(j1 - j0)] = 1.0
        H[:, j0:j1] = batch_reduced_hessian(ws, W)
    return H


def reduce_at(problem, p: np.ndarray, x0: np.ndarray | None = None,
              tol: float = DEFAULT_TOL, **kwargs) -> ReductionWorkspace:
    """Project onto ``g = 0`` at ``p`` and return a workspace with the
    reduced gradient already computed."""
    proj = newton_solve(problem, p, x0, tol=tol)
    ws = make_workspace(problem, proj, p, **kwargs)
    reduced_gradient(ws)
    return ws


def reduced_objective(problem, p: np.ndarray, x0: np.ndarray | None = None,
                      tol: float = DEFAULT_TOL) -> tuple[float, ProjectionResult]:
    proj = newton_solve(problem, p, x0, tol=tol)
    return float(problem.objective(proj.x, p)), proj
