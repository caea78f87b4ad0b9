"""Numerical oracles and self-checks.

The finite-difference oracles evaluate ``F(p)`` and ``grad F(p)`` through
an independent path: complex power ``S = V * conj(Y V)`` in extended
precision (``numpy.longdouble``), with the state polished by Newton
corrections and the multiplier refined against residuals formed in that
precision.  This keeps cancellation noise in the central differences far
below their truncation error, so the comparison measures the derivative
code under test and not float64 roundoff.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import sparse_linalg as sl
from .autodiff import hessian_tensor_projection
from .powerflow import PowerFlowProblem, layout
from .reduction import (DEFAULT_TOL, ReductionWorkspace, full_reduced_hessian,
                        make_workspace, newton_solve, reduced_gradient)

FD_STEP_GRADIENT = 1e-6
FD_STEP_HESSIAN = 1e-5
GRADIENT_TOL = 1e-6
HESSIAN_TOL = 1e-5
SYMMETRY_TOL = 1e-8
INVARIANCE_TOL = 1e-12
DOT_TOL = 1e-12
PROJECTION_SYMMETRY_TOL = 1e-10

LD = np.longdouble


@dataclass
class CheckResult:
    name: str
    value: float
    tol: float
    passed: bool
    detail: str = ""

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        extra = f"  ({self.detail})" if self.detail else ""
        return f"{tag}  {self.name:<28s} {self.value:.3e} <= {self.tol:.1e}{extra}"

    def as_dict(self) -> dict:
        return asdict(self)


def _check(name, value, tol, detail="") -> CheckResult:
    value = float(value)
    return CheckResult(name, value, tol, bool(np.isfinite(value) and value <= tol), detail)


# --------------------------------------------------------------------------
# error measures

def max_relative_error(a, b) -> float:
    """``max |a - b| / |b|`` over entries; zero reference entries count only
    if ``a`` differs there."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    d = np.abs(a - b)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(d == 0, 0.0, d / np.abs(b))
    return float(r.max()) if r.size else 0.0


def symmetry_error(h) -> float:
    """``||H - H^T||_inf / ||H||_inf`` with max-entry norms."""
    h = np.asarray(h, dtype=float)
    top = np.abs(h).max()
    return float(np.abs(h - h.T).max() / top) if top > 0 else 0.0


# --------------------------------------------------------------------------
# extended precision oracle

class ExtendedPrecisionOracle:
    """Scalar evaluation of ``g`` and ``f`` in extended precision.

    Shares only the index partition with :mod:`redhes.powerflow`; the
    injections come from complex arithmetic on the admittance triplets.
    """

    def __init__(self, problem: PowerFlowProblem):
        net = problem.network
        self.problem = problem
        part = net.partition
        y = net.ybus.tocoo()
        self.rows = y.row.astype(np.int64)
        self.cols = y.col.astype(np.int64)
        self.y = y.data.astype(np.clongdouble)
        self.nb = net.n_v
        self.part = part
        lay = layout(net)
        self.c2 = lay.c2.astype(LD)
        self.c1 = lay.c1.astype(LD)
        self.c0 = lay.c0.astype(LD)
        self.pd = problem.loads.p_load.astype(LD)
        self.qd = problem.loads.q_load.astype(LD)
        self.nonref = np.concatenate([part.pv, part.pq])

    def _buses(self, x, p):
        part = self.part
        theta = np.zeros(self.nb, dtype=LD)
        vm = np.ones(self.nb, dtype=LD)
        theta[self.nonref] = x[part.theta_pos[self.nonref]]
        vm[part.pq] = x[part.vm_x_pos[part.pq]]
        vm[part.gen_buses] = p[part.vm_p_pos[part.gen_buses]]
        pg = np.zeros(self.nb, dtype=LD)
        pg[part.pg_buses] = p[part.pg_pos[part.pg_buses]]
        return theta, vm, pg

    def injections(self, x, p):
        theta, vm, pg = self._buses(np.asarray(x, LD), np.asarray(p, LD))
        v = vm * (np.cos(theta) + 1j * np.sin(theta)).astype(np.clongdouble)
        cur = np.zeros(self.nb, dtype=np.clongdouble)
        np.add.at(cur, self.rows, self.y * v[self.cols])
        s = v * np.conj(cur)
        return s.real, s.imag, pg

    def residual(self, x, p):
        pinj, qinj, pg = self.injections(x, p)
        dp = pinj - pg + self.pd
        dq = qinj + self.qd
        return np.concatenate([dp[self.part.pv], dp[self.part.pq], dq[self.part.pq]])

    def generation(self, x, p):
        """Per-bus active generation with the reference output recovered."""
        pinj, _, pg = self.injections(x, p)
        r = self.part.ref
        pg[r] = pinj[r] + self.pd[r]
        return pg

    def objective(self, x, p):
        pg = self.generation(x, p)
        return np.sum(self.c2 * pg * pg + self.c1 * pg + self.c0)

    def solve(self, p, x0=None, tol: float = 1e-10, polish: int = 4):
        """State at ``p`` (a longdouble vector) polished in extended precision."""
        return self._solve(p, x0, tol, polish)[0]

    def _solve(self, p, x0=None, tol: float = 1e-10, polish: int = 4):
        p = np.asarray(p, dtype=LD)
        proj = newton_solve(self.problem, p.astype(float), x0, tol=tol)
        x = proj.x.astype(LD)
        best, best_norm = x, np.inf
        for _ in range(polish):
            r = self.residual(x, p)
            n = float(np.abs(r).max())
            if n < best_norm:
                best, best_norm = x, n
            if n == 0.0:
                break
            x = x - sl.solve(proj.factors, r.astype(float)).astype(LD)
        return best, proj

    def lagrangian_gradient(self, x, p, lam):
        """``(dL/dx, dL/dp)`` for ``L = f + lam^T g``.

        With bus weights ``w = mu - j*b`` on ``(P, Q)``, ``Re sum w S`` has
        derivative ``Re(dV * c)`` where ``c = w conj(I) + Y^T conj(w V)``.
        """
        part = self.part
        x = np.asarray(x, dtype=LD)
        p = np.asarray(p, dtype=LD)
        lam = np.asarray(lam, dtype=LD)
        theta, vm, pg = self._buses(x, p)
        v = vm * (np.cos(theta) + 1j * np.sin(theta)).astype(np.clongdouble)
        cur = np.zeros(self.nb, dtype=np.clongdouble)
        np.add.at(cur, self.rows, self.y * v[self.cols])
        nnr = len(self.nonref)
        mu = np.zeros(self.nb, dtype=LD)
        b = np.zeros(self.nb, dtype=LD)
        mu[self.nonref] = lam[:nnr]
        b[part.pq] = lam[nnr:]
        r = part.ref
        pref = (v[r] * np.conj(cur[r])).real + self.pd[r]
        mu[r] = 2 * self.c2[r] * pref + self.c1[r]
        w = mu - 1j * b
        u = np.zeros(self.nb, dtype=np.clongdouble)
        np.add.at(u, self.cols, self.y * np.conj(w[self.rows] * v[self.rows]))
        c = v * (w * np.conj(cur) + u)
        d_theta = -c.imag
        d_vm = c.real / vm
        gx = np.zeros(len(x), dtype=LD)
        gx[part.theta_pos[self.nonref]] = d_theta[self.nonref]
        gx[part.vm_x_pos[part.pq]] = d_vm[part.pq]
        gp = np.zeros(len(p), dtype=LD)
        gb = part.gen_buses
        gp[part.vm_p_pos[gb]] = d_vm[gb]
        pb = part.pg_buses
        gp[part.pg_pos[pb]] = 2 * self.c2[pb] * pg[pb] + self.c1[pb] - mu[pb]
        return gx, gp

    def reduced_gradient(self, p, x0=None, refine: int = 4):
        """Adjoint reduced gradient with the multiplier refined against
        extended precision residuals."""
        p = np.asarray(p, dtype=LD)
        x, proj = self._solve(p, x0)
        lam = np.zeros(len(x), dtype=LD)
        for _ in range(refine):
            rx, _ = self.lagrangian_gradient(x, p, lam)
            if not np.any(rx):
                break
            lam = lam - sl.solve_transpose(proj.factors, rx.astype(float)).astype(LD)
        return self.lagrangian_gradient(x, p, lam)[1]

    def reduced_objective(self, p, x0=None):
        p = np.asarray(p, dtype=LD)
        return self.objective(self.solve(p, x0), p)

    def cost_difference(self, p_plus, p_minus, x0=None):
        """``F(p_plus) - F(p_minus)`` grouped per bus to avoid cancelling
        the constant cost terms."""
        p_plus = np.asarray(p_plus, dtype=LD)
        p_minus = np.asarray(p_minus, dtype=LD)
        a = self.generation(self.solve(p_plus, x0), p_plus)
        b = self.generation(self.solve(p_minus, x0), p_minus)
        return np.sum((a - b) * (self.c2 * (a + b) + self.c1))


def fd_reduced_gradient(problem: PowerFlowProblem, p, h: float = FD_STEP_GRADIENT,
                        x0=None, indices=None) -> np.ndarray:
    """Central differences of ``F`` along Cartesian directions."""
    oracle = ExtendedPrecisionOracle(problem)
    p = np.asarray(p, dtype=LD)
    idx = range(len(p)) if indices is None else indices
    out = []
    for k in idx:
        e = np.zeros(len(p), dtype=LD)
        e[k] = LD(h)
        out.append(float(oracle.cost_difference(p + e, p - e, x0) / (2 * LD(h))))
    return np.array(out)


def tight_workspace(problem, p, x0=None, tol: float = 1e-11, **kwargs) -> ReductionWorkspace:
    """Reduction at a state solved below the default tolerance."""
    p = np.asarray(p, dtype=float)
    ws = make_workspace(problem, newton_solve(problem, p, x0, tol=tol), p, **kwargs)
    reduced_gradient(ws)
    return ws


def fd_reduced_hessian(problem, p, h: float = FD_STEP_HESSIAN, x0=None,
                       indices=None) -> np.ndarray:
    """Columns of central differences of the reduced gradient, evaluated
    by the extended precision oracle."""
    oracle = ExtendedPrecisionOracle(problem)
    p = np.asarray(p, dtype=LD)
    idx = list(range(len(p)) if indices is None else indices)
    cols = []
    for k in idx:
        e = np.zeros(len(p), dtype=LD)
        e[k] = LD(h)
        d = oracle.reduced_gradient(p + e, x0) - oracle.reduced_gradient(p - e, x0)
        cols.append((d / (2 * LD(h))).astype(float))
    return np.column_stack(cols) if cols else np.zeros((len(p), 0))


def fd_adjoint_projection(problem, x, p, lam, v, h: float = FD_STEP_HESSIAN):
    """Central differences of the first-order adjoint map
    ``(x, p) -> grad L`` along ``v``; power-flow problems are evaluated by
    the extended precision oracle."""
    nx = len(x)
    if isinstance(problem, PowerFlowProblem):
        adjoint = ExtendedPrecisionOracle(problem).lagrangian_gradient
        x, p, v = (np.asarray(a, dtype=LD) for a in (x, p, v))
        h = LD(h)
    else:
        adjoint = problem.lagrangian_adjoint
    vx, vp = v[:nx], v[nx:]
    xp, pp = adjoint(x + h * vx, p + h * vp, lam)
    xm, pm = adjoint(x - h * vx, p - h * vp, lam)
    return ((np.asarray(xp) - xm) / (2 * h)).astype(float), ((np.asarray(pp) - pm) / (2 * h)).astype(float)


# --------------------------------------------------------------------------
# structural checks

def coloring_conflicts(pattern, color_of_column) -> int:
    """Number of (row, same-colored column pair) conflicts; exhaustive."""
    csr = pattern.tocsr()
    conflicts = 0
    for i in range(csr.shape[0]):
        cols = csr.indices[csr.indptr[i]:csr.indptr[i + 1]]
        colors = np.asarray(color_of_column)[cols]
        _, counts = np.unique(colors, return_counts=True)
        conflicts += int(np.sum(counts * (counts - 1) // 2))
    return conflicts


def dot_product_error(problem, x, p, rng, residual_adjoint=None) -> float:
    """Worst relative mismatch of ``lam^T (J u)`` against ``(J^T lam)^T u``
    for ``J`` in ``{dg/dx, dg/dp}`` with forward products from the colored
    Jacobians and transposed products from the adjoint kernel."""
    jx, jp = problem.jacobians(x, p)
    lam = rng.standard_normal(problem.n_x)
    ux = rng.standard_normal(problem.n_x)
    up = rng.standard_normal(problem.n_p)
    if residual_adjoint is None:
        xbar, pbar = problem.lagrangian_adjoint(x, p, lam, objective_weight=0.0)
    else:
        xbar, pbar = residual_adjoint(x, p, lam)
    worst = 0.0
    for fwd, bwd, u in ((jx @ ux, xbar, ux), (jp @ up, pbar, up)):
        a = float(lam @ fwd)
        b = float(np.asarray(bwd) @ u)
        scale = max(abs(a), abs(b), np.abs(lam).dot(np.abs(fwd)))
        worst = max(worst, abs(a - b) / scale if scale > 0 else 0.0)
    return worst


# --------------------------------------------------------------------------
# suite

def run_checks(problem: PowerFlowProblem, p=None, batch_sizes=(1, 4, 32),
               threads=(1, 4, 8), seed: int = 0, tol: float = DEFAULT_TOL,
               fd: bool = True, dot_trials: int = 100) -> list[CheckResult]:
    """Gradient and Hessian FD checks, symmetry, batch invariance, adjoint
    dot-product test and coloring validity at the power-flow solution."""
    if p is None:
        p = problem.initial_parameters()
    p = np.asarray(p, dtype=float)
    rng = np.random.default_rng(seed)
    results = []
    ws = tight_workspace(problem, p) if fd else make_workspace(
        problem, newton_solve(problem, p, tol=tol), p)
    if ws.lam is None:
        reduced_gradient(ws)
    x = ws.x

    cx, cp = problem.colorings()
    px, pp = layout(problem.network).patterns()
    conflicts = coloring_conflicts(px, cx.color_of_column) + coloring_conflicts(pp, cp.color_of_column)
    results.append(_check("coloring_conflicts", conflicts, 0,
                          f"{cx.num_colors}+{cp.num_colors} colors"))

    worst = max(dot_product_error(problem, x, p, rng) for _ in range(dot_trials))
    results.append(_check("adjoint_dot_product", worst, DOT_TOL, f"{dot_trials} seeds"))

    lam = rng.standard_normal(problem.n_x)
    V = rng.standard_normal((problem.n_x + problem.n_p, 2))
    Yx, Yp = hessian_tensor_projection(problem.lagrangian_adjoint, x, p, lam, V)
    Y = np.vstack([Yx, Yp])
    a, b = float(V[:, 0] @ Y[:, 1]), float(V[:, 1] @ Y[:, 0])
    results.append(_check("projection_symmetry", abs(a - b) / max(abs(a), abs(b), 1e-300),
                          PROJECTION_SYMMETRY_TOL))
    if fd:
        fx, fp = fd_adjoint_projection(problem, x, p, lam, V[:, 0])
        results.append(_check("projection_vs_fd",
                              max_relative_error(Y[:, 0], np.concatenate([fx, fp])),
                              HESSIAN_TOL, f"h={FD_STEP_HESSIAN:g}"))

    n_p = problem.n_p
    H = full_reduced_hessian(ws, n_p)
    results.append(_check("hessian_symmetry", symmetry_error(H), SYMMETRY_TOL))

    spread = 0.0
    for t in threads:
        for n in tuple(batch_sizes) + (n_p,):
            w = make_workspace(problem, ws.projection, p, threads=t)
            w.lam = ws.lam
            spread = max(spread, float(np.abs(full_reduced_hessian(w, n) - H).max()))
    results.append(_check("batch_invariance", spread, INVARIANCE_TOL,
                          f"N in {list(batch_sizes) + [n_p]}, threads {list(threads)}"))

    if fd:
        g_fd = fd_reduced_gradient(problem, p, x0=x)
        results.append(_check("gradient_vs_fd", max_relative_error(ws.gradient, g_fd),
                              GRADIENT_TOL, f"h={FD_STEP_GRADIENT:g}"))
        H_fd = fd_reduced_hessian(problem, p, x0=x)
        results.append(_check("hessian_vs_fd", max_relative_error(H, H_fd), HESSIAN_TOL,
                              f"h={FD_STEP_HESSIAN:g}"))
    return results
