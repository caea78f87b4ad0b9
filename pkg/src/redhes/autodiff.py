"""Vectorized forward-mode dual numbers, colored sparse Jacobians and
forward-over-reverse Hessian projections.

A :class:`Dual` holds an array of values of shape ``S`` together with
``C`` tangent directions stored as an array of shape ``S + (C,)``.  Kernels
written with ``+ - * /``, indexing, :func:`sin`, :func:`cos`,
:func:`concatenate` and :func:`linear_map` run unchanged on plain float
arrays and on duals, which is how Jacobians and second-order projections
are extracted below.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .sparse_linalg import ColoringScheme

DEFAULT_WIDTH = 8


class Dual:
    """Array of dual numbers with ``C`` simultaneous tangent directions."""

    __slots__ = ("value", "tangents")
    # make ``ndarray op Dual`` defer to the reflected Dual methods
    __array_ufunc__ = None

    def __init__(self, value, tangents):
        value = np.asarray(value, dtype=np.float64)
        tangents = np.asarray(tangents, dtype=np.float64)
        if tangents.shape[:-1] != value.shape:
            tangents = np.broadcast_to(tangents, value.shape + tangents.shape[-1:])
        self.value = value
        self.tangents = tangents

    @classmethod
    def constant(cls, value, width: int) -> "Dual":
        value = np.asarray(value, dtype=np.float64)
        return cls(value, np.zeros(value.shape + (width,)))

    @classmethod
    def seed(cls, value, directions) -> "Dual":
        """Dual with ``value`` of shape ``(n,)`` and tangents ``directions``
        of shape ``(n, C)``."""
        return cls(value, directions)

    @property
    def width(self) -> int:
        return self.tangents.shape[-1]

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Dual(value={self.value!r}, tangents={self.tangents!r})"

    def __getitem__(self, idx):
        return Dual(self.value[idx], self.tangents[idx])

    def __neg__(self):
        return Dual(-self.value, -self.tangents)

    def __pos__(self):
        return self

    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual(self.value + other.value, self.tangents + other.tangents)
        return Dual(self.value + other, self.tangents)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Dual):
            return Dual(self.value - other.value, self.tangents - other.tangents)
        return Dual(self.value - other, self.tangents)

    def __rsub__(self, other):
        return Dual(other - self.value, -self.tangents)

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(self.value * other.value,
                        self.tangents * other.value[..., None]
                        + other.tangents * self.value[..., None])
        other = np.asarray(other)
        return Dual(self.value * other, self.tangents * other[..., None])

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            if np.any(other.value == 0):
                raise ZeroDivisionError("dual division by zero value")
            q = self.value / other.value
            return Dual(q, (self.tangents - other.tangents * q[..., None])
                        / other.value[..., None])
        other = np.asarray(other)
        if np.any(other == 0):
            raise ZeroDivisionError("dual division by zero value")
        return Dual(self.value / other, self.tangents / other[..., None])

    def __rtruediv__(self, other):
        if np.any(self.value == 0):
            raise ZeroDivisionError("dual division by zero value")
        q = np.asarray(other) / self.value
        return Dual(q, -self.tangents * (q / self.value)[..., None])

    def __pow__(self, n):
        if isinstance(n, Dual):
            raise TypeError("dual exponents are not supported")
        if n == 0:
            return Dual(np.ones_like(self.value), np.zeros_like(self.tangents))
        v = self.value ** n
        return Dual(v, self.tangents * (n * self.value ** (n - 1))[..., None])

    def sum(self):
        return Dual(self.value.sum(), self.tangents.sum(axis=0))


DualNumber = Dual


def sin(a):
    if isinstance(a, Dual):
        return Dual(np.sin(a.value), a.tangents * np.cos(a.value)[..., None])
    return np.sin(a)


def cos(a):
    if isinstance(a, Dual):
        return Dual(np.cos(a.value), -a.tangents * np.sin(a.value)[..., None])
    return np.cos(a)


def linear_map(m: sp.spmatrix, a):
    """``m @ a`` for a float vector or a 1-D dual array."""
    if isinstance(a, Dual):
        return Dual(m @ a.value, np.asarray(m @ a.tangents))
    return m @ a


def concatenate(parts):
    duals = [p for p in parts if isinstance(p, Dual)]
    if not duals:
        return np.concatenate(parts)
    width = duals[0].width
    parts = [p if isinstance(p, Dual) else Dual.constant(p, width) for p in parts]
    return Dual(np.concatenate([p.value for p in parts]),
                np.concatenate([p.tangents for p in parts]))


def value_of(a) -> np.ndarray:
    return a.value if isinstance(a, Dual) else np.asarray(a)


def tangents_of(a, width: int) -> np.ndarray:
    if isinstance(a, Dual):
        return a.tangents
    return np.zeros(np.shape(a) + (width,))


# --------------------------------------------------------------------------
# sparse Jacobians

def sparse_jacobian(kernel: Callable, x: np.ndarray, p: np.ndarray,
                    coloring_x: ColoringScheme, coloring_p: ColoringScheme,
                    check: bool = True) -> tuple[sp.csc_matrix, sp.csc_matrix]:
    """``(d kernel/dx, d kernel/dp)`` from one colored forward sweep.

    Both seed blocks travel together in a dual of width
    ``num_colors_x + num_colors_p``.
    """
    cx, cp = coloring_x.num_colors, coloring_p.num_colors
    sx = np.zeros((len(x), cx + cp))
    sx[:, :cx] = coloring_x.seed_matrix()
    spp = np.zeros((len(p), cx + cp))
    spp[:, cx:] = coloring_p.seed_matrix()
    out = kernel(Dual(x, sx), Dual(p, spp))
    t = tangents_of(out, cx + cp)
    jx = coloring_x.decompress(t[:, :cx], check=check)
    jp = coloring_p.decompress(t[:, cx:], check=check)
    return jx, jp


def dense_jacobian(kernel: Callable, x: np.ndarray, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Jacobians by seeding every Cartesian basis direction."""
    nx, np_ = len(x), len(p)
    sx = np.zeros((nx, nx + np_))
    sx[:, :nx] = np.eye(nx)
    spp = np.zeros((np_, nx + np_))
    spp[:, nx:] = np.eye(np_)
    t = tangents_of(kernel(Dual(x, sx), Dual(p, spp)), nx + np_)
    return t[:, :nx].copy(), t[:, nx:].copy()


# --------------------------------------------------------------------------
# second order

@dataclass
class SecondOrderDual:
    """Variables after a forward-over-reverse sweep.

    ``value`` (x), ``adjoint`` (x_(1)), ``tangent`` (x^(2), one column per
    direction) and ``adjoint_tangent`` (x_(1)^(2)).
    """

    value: np.ndarray
    adjoint: np.ndarray
    tangent: np.ndarray
    adjoint_tangent: np.ndarray


def forward_over_reverse(adjoint_kernel: Callable, x: np.ndarray, p: np.ndarray,
                         lam: np.ndarray, vx: np.ndarray, vp: np.ndarray
                         ) -> tuple[SecondOrderDual, SecondOrderDual]:
    """Run ``adjoint_kernel(x, p, lam) -> (xbar, pbar)`` with tangents
    ``(vx, vp)`` on the inputs and a passive adjoint seed ``lam``."""
    xbar, pbar = adjoint_kernel(Dual(x, vx), Dual(p, vp), lam)
    w = vx.shape[1]
    return (SecondOrderDual(x, value_of(xbar), vx, tangents_of(xbar, w)),
            SecondOrderDual(p, value_of(pbar), vp, tangents_of(pbar, w)))


def hessian_tensor_projection(adjoint_kernel: Callable, x: np.ndarray, p: np.ndarray,
                              lam: np.ndarray, V: np.ndarray, width: int = DEFAULT_WIDTH,
                              threads: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Project the Lagrangian Hessian onto the columns of ``V``.

    ``V`` has ``n_x + n_p`` rows; column ``j`` is a tangent ``(z, w)``.
    Returns ``(Y_x, Y_p)`` with ``[Y_x; Y_p] = (grad^2 L) V`` where ``L`` is
    whatever scalar function ``adjoint_kernel`` differentiates.  Directions
    are propagated ``width`` at a time; chunks may run on several threads.
    """
    nx, np_ = len(x), len(p)
    V = np.asarray(V, dtype=np.float64)
    if V.ndim != 2 or V.shape[0] != nx + np_:
        raise ValueError(f"tangent block must have {nx + np_} rows, got {V.shape}")
    if width < 1:
        raise ValueError("width must be positive")
    n_dir = V.shape[1]
    Yx = np.empty((nx, n_dir))
    Yp = np.empty((np_, n_dir))
    chunks = [(j, min(j + width, n_dir)) for j in range(0, n_dir, width)]

    def run(bounds):
        j0, j1 = bounds
        sx, sp_ = forward_over_reverse(adjoint_kernel, x, p, lam,
                                       V[:nx, j0:j1], V[nx:, j0:j1])
        Yx[:, j0:j1] = sx.adjoint_tangent
        Yp[:, j0:j1] = sp_.adjoint_tangent

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(min(threads, len(chunks))) as pool:
            list(pool.map(run, chunks))
    else:
        for c in chunks:
            run(c)
    return Yx, Yp
