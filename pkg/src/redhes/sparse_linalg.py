"""Sparse LU with pattern-reusing refactorization, batched triangular
solves and greedy column coloring.

Matrices are :class:`scipy.sparse.csc_matrix` in canonical form (sorted
row indices, no duplicates).  The factorization is a left-looking
Gilbert-Peierls LU with threshold partial pivoting on top of a
minimum-degree column ordering of ``pattern(A + A^T)``:

    P A Q = L U

with ``L`` unit lower triangular.  :func:`lu_refactorize` reuses the
ordering, the pivot sequence and the L/U patterns of a previous
factorization and only recomputes values.
"""
from __future__ import annotations

import heapq
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numba
import numpy as np
import scipy.io
import scipy.sparse as sp

PIVOT_THRESHOLD = 1e-3
SINGULAR_THRESHOLD = 1e-12


class SingularMatrixError(ArithmeticError):
    pass


class PatternMismatchError(ValueError):
    pass


def default_threads() -> int:
    return max(1, int(os.environ.get("REDHES_THREADS", "1")))


def as_csc(a) -> sp.csc_matrix:
    """Canonical CSC copy (sorted indices, duplicates summed, float64)."""
    a = sp.csc_matrix(a, dtype=np.float64)
    a.sum_duplicates()
    a.sort_indices()
    return a


def same_pattern(a: sp.csc_matrix, b: sp.csc_matrix) -> bool:
    return (a.shape == b.shape and np.array_equal(a.indptr, b.indptr)
            and np.array_equal(a.indices, b.indices))


# --------------------------------------------------------------------------
# ordering

def minimum_degree_order(a: sp.spmatrix) -> np.ndarray:
    """Minimum-degree elimination order on the symmetrized pattern.

    Exact degrees on the explicit elimination graph; ties broken by the
    smaller index, so the order is deterministic.
    """
    n = a.shape[0]
    s = sp.csr_matrix(a, dtype=bool)
    s = (s + s.T).tocsr()
    adj = [set(s.indices[s.indptr[i]:s.indptr[i + 1]].tolist()) - {i}
           for i in range(n)]
    heap = [(len(adj[i]), i) for i in range(n)]
    heapq.heapify(heap)
    done = np.zeros(n, dtype=bool)
    order = np.empty(n, dtype=np.int64)
    k = 0
    while heap:
        deg, v = heapq.heappop(heap)
        if done[v] or deg != len(adj[v]):
            continue
        done[v] = True
        order[k] = v
        k += 1
        nbrs = adj[v]
        for u in nbrs:
            au = adj[u]
            au.discard(v)
            au |= nbrs
            au.discard(u)
            heapq.heappush(heap, (len(au), u))
        adj[v] = set()
    return order


# --------------------------------------------------------------------------
# numeric kernels

@numba.njit(cache=True)
def _reach(Lp, Li, pinv, rows, mark, stamp, xi, stack, pstack, n):
    """Rows reachable from ``rows`` in the graph of the partial L, in
    topological order in ``xi[top:n]``."""
    top = n
    for r in rows:
        if mark[r] == stamp:
            continue
        head = 0
        stack[0] = r
        while head >= 0:
            j = stack[head]
            jnew = pinv[j]
            if mark[j] != stamp:
                mark[j] = stamp
                pstack[head] = Lp[jnew] + 1 if jnew >= 0 else 0
            done = True
            if jnew >= 0:
                end = Lp[jnew + 1]
                p = pstack[head]
                while p < end:
                    i = Li[p]
                    if mark[i] != stamp:
                        pstack[head] = p + 1
                        head += 1
                        stack[head] = i
                        done = False
                        break
                    p += 1
            if done:
                head -= 1
                top -= 1
                xi[top] = j
    return top


@numba.njit(cache=True)
def _grow(arr, need):
    if need <= arr.shape[0]:
        return arr
    out = np.empty(max(need, 2 * arr.shape[0]), dtype=arr.dtype)
    out[:arr.shape[0]] = arr
    return out


@numba.njit(cache=True)
def _lu_numeric(n, Ap, Ai, Ax, q, tol, sing_tol):
    """Left-looking LU with threshold partial pivoting.

    Returns ``(status, k, Lp, Li, Lx, Up, Ui, Ux, pinv)``; ``status`` is 0 on
    success and 1 if column ``k`` has no acceptable pivot.  ``Li`` holds
    original row indices.
    """
    cap = max(4 * Ap[n], n + 1)
    Lp = np.zeros(n + 1, dtype=np.int64)
    Up = np.zeros(n + 1, dtype=np.int64)
    Li = np.empty(cap, dtype=np.int64)
    Lx = np.empty(cap)
    Ui = np.empty(cap, dtype=np.int64)
    Ux = np.empty(cap)
    pinv = -np.ones(n, dtype=np.int64)
    x = np.zeros(n)
    xi = np.empty(n, dtype=np.int64)
    stack = np.empty(n, dtype=np.int64)
    pstack = np.empty(n, dtype=np.int64)
    mark = -np.ones(n, dtype=np.int64)
    lnz = 0
    unz = 0
    for k in range(n):
        Lp[k] = lnz
        Up[k] = unz
        Li = _grow(Li, lnz + n)
        Lx = _grow(Lx, lnz + n)
        Ui = _grow(Ui, unz + n)
        Ux = _grow(Ux, unz + n)
        col = q[k]
        rows = Ai[Ap[col]:Ap[col + 1]]
        top = _reach(Lp, Li, pinv, rows, mark, k, xi, stack, pstack, n)
        colmax = 0.0
        for p in range(Ap[col], Ap[col + 1]):
            x[Ai[p]] = Ax[p]
            colmax = max(colmax, abs(Ax[p]))
        for px in range(top, n):
            j = xi[px]
            J = pinv[j]
            if J < 0:
                continue
            xj = x[j]
            for p in range(Lp[J] + 1, Lp[J + 1]):
                x[Li[p]] -= Lx[p] * xj
        ipiv = -1
        a = -1.0
        for px in range(top, n):
            i = xi[px]
            if pinv[i] < 0:
                t = abs(x[i])
                if t > a:
                    a = t
                    ipiv = i
            else:
                Ui[unz] = pinv[i]
                Ux[unz] = x[i]
                unz += 1
        if ipiv < 0 or a <= sing_tol * colmax or a == 0.0:
            return 1, k, Lp, Li, Lx, Up, Ui, Ux, pinv
        if pinv[col] < 0 and mark[col] == k and abs(x[col]) >= tol * a:
            ipiv = col
        pivot = x[ipiv]
        Ui[unz] = k
        Ux[unz] = pivot
        unz += 1
        pinv[ipiv] = k
        Li[lnz] = ipiv
        Lx[lnz] = 1.0
        lnz += 1
        for px in range(top, n):
            i = xi[px]
            if pinv[i] < 0:
                Li[lnz] = i
                Lx[lnz] = x[i] / pivot
                lnz += 1
            x[i] = 0.0
    Lp[n] = lnz
    Up[n] = unz
    return 0, n, Lp, Li[:lnz].copy(), Lx[:lnz].copy(), Up, Ui[:unz].copy(), Ux[:unz].copy(), pinv


@numba.njit(cache=True)
def _lu_renumeric(n, Ap, Ai, Ax, q, prow, Lp, Li_orig, Lx, Up, Ui, Ux, tol, sing_tol):
    """Recompute L and U values in place for a matrix with the same pattern.

    Returns ``(status, k)``: 0 on success, 1 on singular column ``k``, 2 if
    the stored pivot of column ``k`` fell below the threshold.
    """
    x = np.zeros(n)
    for k in range(n):
        col = q[k]
        colmax = 0.0
        for p in range(Ap[col], Ap[col + 1]):
            x[Ai[p]] = Ax[p]
            colmax = max(colmax, abs(Ax[p]))
        for p in range(Up[k], Up[k + 1] - 1):
            J = Ui[p]
            u = x[prow[J]]
            Ux[p] = u
            for r in range(Lp[J] + 1, Lp[J + 1]):
                x[Li_orig[r]] -= Lx[r] * u
        pivot = x[prow[k]]
        a = abs(pivot)
        for r in range(Lp[k] + 1, Lp[k + 1]):
            a = max(a, abs(x[Li_orig[r]]))
        if a <= sing_tol * colmax or a == 0.0:
            return 1, k
        if abs(pivot) < tol * a:
            return 2, k
        Ux[Up[k + 1] - 1] = pivot
        for r in range(Lp[k] + 1, Lp[k + 1]):
            i = Li_orig[r]
            Lx[r] = x[i] / pivot
            x[i] = 0.0
        for p in range(Up[k], Up[k + 1] - 1):
            x[prow[Ui[p]]] = 0.0
        x[prow[k]] = 0.0
    return 0, n


@numba.njit(cache=True, nogil=True)
def _solve_cols(B, X, q, pinv, prow, Lp, Li, Lx, Up, Ui, Ux, transpose, c0, c1):
    n = q.shape[0]
    y = np.empty(n)
    for c in range(c0, c1):
        if not transpose:
            for k in range(n):
                y[k] = B[prow[k], c]
            for j in range(n):
                yj = y[j]
                for p in range(Lp[j] + 1, Lp[j + 1]):
                    y[Li[p]] -= Lx[p] * yj
            for j in range(n - 1, -1, -1):
                y[j] /= Ux[Up[j + 1] - 1]
                yj = y[j]
                for p in range(Up[j], Up[j + 1] - 1):
                    y[Ui[p]] -= Ux[p] * yj
            for k in range(n):
                X[q[k], c] = y[k]
        else:
            for k in range(n):
                y[k] = B[q[k], c]
            for j in range(n):
                s = y[j]
                for p in range(Up[j], Up[j + 1] - 1):
                    s -= Ux[p] * y[Ui[p]]
                y[j] = s / Ux[Up[j + 1] - 1]
            for j in range(n - 1, -1, -1):
                s = y[j]
                for p in range(Lp[j] + 1, Lp[j + 1]):
                    s -= Lx[p] * y[Li[p]]
                y[j] = s
            for k in range(n):
                X[prow[k], c] = y[k]


@numba.njit(cache=True)
def _greedy_color(n_cols, Ap, Ai, Rp, Rj):
    color = -np.ones(n_cols, dtype=np.int64)
    forbid = -np.ones(n_cols + 1, dtype=np.int64)
    for j in range(n_cols):
        for p in range(Ap[j], Ap[j + 1]):
            r = Ai[p]
            for s in range(Rp[r], Rp[r + 1]):
                c = color[Rj[s]]
                if c >= 0:
                    forbid[c] = j
        c = 0
        while forbid[c] == j:
            c += 1
        color[j] = c
    return color


# --------------------------------------------------------------------------
# factorization objects

@dataclass(frozen=True)
class SymbolicAnalysis:
    """Column ordering for one sparsity pattern."""

    shape: tuple[int, int]
    indptr: np.ndarray = field(repr=False)
    indices: np.ndarray = field(repr=False)
    q: np.ndarray = field(repr=False)


@dataclass(eq=False)
class LUFactors:
    """``P A Q = L U``.  ``q`` is the column order, ``pinv[i]`` the pivot
    step of original row ``i`` and ``prow`` its inverse.  L is unit lower
    triangular with the diagonal stored first in each column; U stores the
    diagonal last.  Row indices of L/U are in pivot order."""

    symbolic: SymbolicAnalysis
    pinv: np.ndarray
    prow: np.ndarray
    Lp: np.ndarray
    Li: np.ndarray
    Li_orig: np.ndarray
    Lx: np.ndarray
    Up: np.ndarray
    Ui: np.ndarray
    Ux: np.ndarray
    matrix: sp.csc_matrix = field(repr=False)
    refine_steps: int = 0
    refactorizations: int = 0

    @property
    def n(self) -> int:
        return self.symbolic.shape[0]

    @property
    def q(self) -> np.ndarray:
        return self.symbolic.q

    @property
    def nnz(self) -> int:
        return len(self.Lx) + len(self.Ux)

    def L(self) -> sp.csc_matrix:
        return sp.csc_matrix((self.Lx, self.Li, self.Lp), shape=self.symbolic.shape)

    def U(self) -> sp.csc_matrix:
        return sp.csc_matrix((self.Ux, self.Ui, self.Up), shape=self.symbolic.shape)


def analyze(a: sp.csc_matrix) -> SymbolicAnalysis:
    a = as_csc(a)
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"matrix must be square, got {a.shape}")
    q = minimum_degree_order(a)
    return SymbolicAnalysis(a.shape, a.indptr.copy(), a.indices.copy(), q)


def lu_factorize(a, symbolic: SymbolicAnalysis | None = None,
                 refine_steps: int = 0) -> LUFactors:
    """Factorize a square sparse matrix.

    Raises :class:`SingularMatrixError` when no pivot of a column exceeds
    ``1e-12`` times that column's largest entry.
    """
    a = as_csc(a)
    if symbolic is None:
        symbolic = analyze(a)
    elif not (symbolic.shape == a.shape and np.array_equal(symbolic.indptr, a.indptr)
              and np.array_equal(symbolic.indices, a.indices)):
        raise PatternMismatchError("symbolic analysis belongs to another pattern")
    n = a.shape[0]
    status, k, Lp, Li, Lx, Up, Ui, Ux, pinv = _lu_numeric(
        n, a.indptr.astype(np.int64), a.indices.astype(np.int64), a.data,
        symbolic.q, PIVOT_THRESHOLD, SINGULAR_THRESHOLD)
    if status != 0:
        raise SingularMatrixError(f"matrix is singular at pivot step {k} "
                                  f"(column {int(symbolic.q[k])})")
    prow = np.empty(n, dtype=np.int64)
    prow[pinv] = np.arange(n)
    Li_orig = Li
    Li = pinv[Li_orig]
    return LUFactors(symbolic, pinv, prow, Lp, Li, Li_orig, Lx, Up, Ui, Ux, a,
                     refine_steps=refine_steps)


def lu_refactorize(factors: LUFactors, a_new) -> LUFactors:
    """Numeric refactorization reusing ordering, pivots and L/U patterns.

    Falls back to a fresh numeric factorization (same column ordering) when
    a stored pivot degrades below the pivoting threshold.
    """
    a = as_csc(a_new)
    sym = factors.symbolic
    if not (a.shape == sym.shape and np.array_equal(a.indptr, sym.indptr)
            and np.array_equal(a.indices, sym.indices)):
        raise PatternMismatchError("refactorization requires the original sparsity pattern")
    Lx = factors.Lx.copy()
    Ux = factors.Ux.copy()
    status, k = _lu_renumeric(
        sym.shape[0], a.indptr.astype(np.int64), a.indices.astype(np.int64), a.data,
        sym.q, factors.prow, factors.Lp, factors.Li_orig, Lx, factors.Up, factors.Ui,
        Ux, PIVOT_THRESHOLD, SINGULAR_THRESHOLD)
    if status == 1:
        raise SingularMatrixError(f"matrix is singular at pivot step {k}")
    if status == 2:
        fresh = lu_factorize(a, sym, refine_steps=factors.refine_steps)
        fresh.refactorizations = factors.refactorizations + 1
        return fresh
    return LUFactors(sym, factors.pinv, factors.prow, factors.Lp, factors.Li,
                     factors.Li_orig, Lx, factors.Up, factors.Ui, Ux, a,
                     refine_steps=factors.refine_steps,
                     refactorizations=factors.refactorizations + 1)


# --------------------------------------------------------------------------
# solves

def _run_solve(factors: LUFactors, B: np.ndarray, transpose: bool, threads: int) -> np.ndarray:
    n_cols = B.shape[1]
    X = np.empty_like(B, order="F")
    args = (factors.q, factors.pinv, factors.prow, factors.Lp, factors.Li, factors.Lx,
            factors.Up, factors.Ui, factors.Ux, transpose)
    threads = max(1, min(threads, n_cols))
    if threads == 1:
        _solve_cols(B, X, *args, 0, n_cols)
    else:
        bounds = np.linspace(0, n_cols, threads + 1).astype(int)
        with ThreadPoolExecutor(threads) as pool:
            futures = [pool.submit(_solve_cols, B, X, *args, int(c0), int(c1))
                       for c0, c1 in zip(bounds[:-1], bounds[1:]) if c1 > c0]
            for f in futures:
                f.result()
    return X


def _refine(factors: LUFactors, B: np.ndarray, X: np.ndarray, transpose: bool,
            threads: int) -> np.ndarray:
    A = factors.matrix.T if transpose else factors.matrix
    for _ in range(factors.refine_steps):
        R = np.asfortranarray(B - A @ X)
        X = X + _run_solve(factors, R, transpose, threads)
    return X


def batch_solve(factors: LUFactors, B: np.ndarray, threads: int | None = None) -> np.ndarray:
    """Solve ``A X = B`` column by column; columns are spread over threads."""
    return _batch(factors, B, False, threads)


def batch_solve_transpose(factors: LUFactors, B: np.ndarray,
                          threads: int | None = None) -> np.ndarray:
    """Solve ``A^T X = B`` column by column."""
    return _batch(factors, B, True, threads)


def _batch(factors, B, transpose, threads):
    B = np.asarray(B, dtype=np.float64)
    if B.ndim != 2 or B.shape[0] != factors.n:
        raise ValueError(f"right-hand side block must have {factors.n} rows, got {B.shape}")
    threads = default_threads() if threads is None else threads
    B = np.asfortranarray(B)
    X = _run_solve(factors, B, transpose, threads)
    if factors.refine_steps:
        X = _refine(factors, B, X, transpose, threads)
    return X


def solve(factors: LUFactors, b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    if b.shape != (factors.n,):
        raise ValueError(f"right-hand side must have shape ({factors.n},), got {b.shape}")
    return batch_solve(factors, b[:, None], threads=1)[:, 0]


def solve_transpose(factors: LUFactors, b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    if b.shape != (factors.n,):
        raise ValueError(f"right-hand side must have shape ({factors.n},), got {b.shape}")
    return batch_solve_transpose(factors, b[:, None], threads=1)[:, 0]


# --------------------------------------------------------------------------
# products

def spmv(a: sp.spmatrix, v: np.ndarray) -> np.ndarray:
    v = np.asarray(v)
    if v.shape != (a.shape[1],):
        raise ValueError(f"vector length {v.shape} does not match {a.shape}")
    return a @ v


def spmv_transpose(a: sp.spmatrix, v: np.ndarray) -> np.ndarray:
    v = np.asarray(v)
    if v.shape != (a.shape[0],):
        raise ValueError(f"vector length {v.shape} does not match {a.shape}^T")
    return a.T @ v


def spmm(a: sp.spmatrix, V: np.ndarray) -> np.ndarray:
    V = np.asarray(V)
    if V.ndim != 2 or V.shape[0] != a.shape[1]:
        raise ValueError(f"block {V.shape} does not match {a.shape}")
    return np.asarray(a @ V)


def spmm_transpose(a: sp.spmatrix, V: np.ndarray) -> np.ndarray:
    V = np.asarray(V)
    if V.ndim != 2 or V.shape[0] != a.shape[0]:
        raise ValueError(f"block {V.shape} does not match {a.shape}^T")
    return np.asarray(a.T @ V)


def export_matrix_market(path, a: sp.spmatrix) -> None:
    scipy.io.mmwrite(str(path), sp.coo_matrix(a))


# --------------------------------------------------------------------------
# coloring

@dataclass(frozen=True)
class ColoringScheme:
    """Column coloring of a sparsity pattern.

    ``rows``/``cols`` list the pattern's nonzeros in CSC order and
    ``slot_color[k]`` is the compressed column holding nonzero ``k``.
    """

    color_of_column: np.ndarray
    num_colors: int
    shape: tuple[int, int]
    indptr: np.ndarray = field(repr=False)
    rows: np.ndarray = field(repr=False)
    cols: np.ndarray = field(repr=False)
    slot_color: np.ndarray = field(repr=False)

    def seed_matrix(self) -> np.ndarray:
        n = self.shape[1]
        S = np.zeros((n, self.num_colors))
        S[np.arange(n), self.color_of_column] = 1.0
        return S

    def decompress(self, compressed: np.ndarray, check: bool = True) -> sp.csc_matrix:
        """Scatter ``J @ seed_matrix()`` back into the sparse pattern.

        With ``check`` any nonzero of ``compressed`` that no pattern entry
        maps to raises :class:`PatternDriftError`.
        """
        compressed = np.asarray(compressed)
        if compressed.shape != (self.shape[0], self.num_colors):
            raise ValueError(f"compressed block must be {(self.shape[0], self.num_colors)}, "
                             f"got {compressed.shape}")
        if check:
            covered = np.zeros(compressed.shape, dtype=bool)
            covered[self.rows, self.slot_color] = True
            stray = (compressed != 0) & ~covered
            if stray.any():
                r, c = np.argwhere(stray)[0]
                raise PatternDriftError(
                    f"nonzero at row {r}, color {c} lies outside the predicted pattern")
        vals = compressed[self.rows, self.slot_color]
        return sp.csc_matrix((vals, self.rows.copy(), self.indptr.copy()), shape=self.shape)


class PatternDriftError(RuntimeError):
    pass


def color_columns(pattern: sp.spmatrix) -> ColoringScheme:
    """Greedy distance-2 coloring of the columns in natural order.

    Two columns get different colors whenever they share a row.
    """
    a = as_csc(pattern)
    r = a.tocsr()
    n_cols = a.shape[1]
    color = _greedy_color(n_cols, a.indptr.astype(np.int64), a.indices.astype(np.int64),
                          r.indptr.astype(np.int64), r.indices.astype(np.int64))
    num = int(color.max()) + 1 if n_cols else 0
    cols = np.repeat(np.arange(n_cols), np.diff(a.indptr))
    rows = a.indices.astype(np.int64)
    return ColoringScheme(color, num, a.shape, a.indptr.copy(), rows, cols, color[cols])
