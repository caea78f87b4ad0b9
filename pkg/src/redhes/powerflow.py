"""Power-flow residual ``g(x, p)``, operating cost ``f(x, p)`` and their
hand-written adjoints.

Injections use full rows of the bus admittance matrix (diagonal included),
so shunts, line charging and taps are accounted for.  The balance rows of
the reference bus are not part of ``g``; its active generation is
recovered from the state inside ``f``.

Every kernel here is generic over the scalar type: pass float arrays or
:class:`~redhes.autodiff.Dual` arrays.  Trigonometric terms are evaluated
once per admittance entry and shared by the P and Q rows.
"""
from __future__ import annotations

import weakref
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import concatenate, cos, linear_map, sin
from .grid import PowerNetwork
from .sparse_linalg import ColoringScheme, color_columns


class StaleTapeError(ValueError):
    pass


@dataclass(frozen=True)
class LoadVector:
    p_load: np.ndarray
    q_load: np.ndarray

    def __post_init__(self):
        if self.p_load.shape != self.q_load.shape:
            raise ValueError("active and reactive load vectors differ in length")
        if not (np.all(np.isfinite(self.p_load)) and np.all(np.isfinite(self.q_load))):
            raise ValueError("loads must be finite")

    @classmethod
    def from_network(cls, net: PowerNetwork) -> "LoadVector":
        pd, qd = net.loads()
        return cls(pd, qd)

    def scaled(self, factor) -> "LoadVector":
        return LoadVector(self.p_load * factor, self.q_load * factor)


@dataclass
class ResidualTape:
    """Values recorded by a forward sweep and consumed by the reverse sweep."""

    pattern_key: tuple
    theta: object
    vm: object
    cos: object
    sin: object
    vv: object
    p_inj: object
    q_inj: object

    def __len__(self):
        return 3 * len(ad.value_of(self.cos)) + 2 * len(ad.value_of(self.p_inj))


class _Layout:
    """Index maps and aggregation matrices derived from one network."""

    def __init__(self, net: PowerNetwork):
        part = net.partition
        nb, nx, np_ = net.n_v, net.n_x, net.n_p
        y = net.ybus.tocoo()
        self.ei = y.row.astype(np.int64)
        self.ej = y.col.astype(np.int64)
        self.G = y.data.real.copy()
        self.B = y.data.imag.copy()
        nnz = len(self.ei)
        self.key = (nb, nnz, hash(self.ei.tobytes()), hash(self.ej.tobytes()))
        ones = np.ones(nnz)
        # edge -> node accumulation
        self.sum_from = sp.csr_matrix((ones, (self.ei, np.arange(nnz))), shape=(nb, nnz))
        self.sum_to = sp.csr_matrix((ones, (self.ej, np.arange(nnz))), shape=(nb, nnz))

        def sel(pos_of_bus, buses, ncols):
            return sp.csr_matrix((np.ones(len(buses)), (buses, pos_of_bus[buses])),
                                 shape=(nb, ncols))

        nonref = np.concatenate([part.pv, part.pq])
        self.theta_x = sel(part.theta_pos, nonref, nx)
        self.vm_x = sel(part.vm_x_pos, part.pq, nx)
        self.vm_p = sel(part.vm_p_pos, part.gen_buses, np_)
        self.pg_p = sel(part.pg_pos, part.pg_buses, np_)
        self.theta_xT = self.theta_x.T.tocsr()
        self.vm_xT = self.vm_x.T.tocsr()
        self.vm_pT = self.vm_p.T.tocsr()
        self.pg_pT = self.pg_p.T.tocsr()
        # residual rows -> bus adjoints
        rows_p = np.concatenate([part.pv, part.pq])
        self.lamP = sp.csr_matrix((np.ones(len(rows_p)), (rows_p, np.arange(len(rows_p)))),
                                  shape=(nb, nx))
        self.lamQ = sp.csr_matrix((np.ones(len(part.pq)),
                                   (part.pq, len(rows_p) + np.arange(len(part.pq)))),
                                  shape=(nb, nx))
        self.pv = part.pv
        self.pq = part.pq
        self.ref = part.ref
        self.pg_buses = part.pg_buses
        costs = net.bus_costs()
        self.c2 = costs[:, 0]
        self.c1 = costs[:, 1]
        self.c0 = costs[:, 2]
        self.e_ref = np.zeros(nb)
        self.e_ref[part.ref] = 1.0
        self.nx, self.np_, self.nb = nx, np_, nb
        self._colorings = None
        self._patterns = None

    def patterns(self):
        """Structural patterns of ``dg/dx`` and ``dg/dp``."""
        if self._patterns is None:
            nb = self.nb
            adj = sp.csr_matrix((np.ones(len(self.ei)), (self.ei, self.ej)), shape=(nb, nb))
            dep_x = (adj @ (self.theta_x + self.vm_x)).tocsr()
            dep_p = (adj @ self.vm_p + self.pg_p).tocsr()
            rowsel = (self.lamP + self.lamQ).T.tocsr()
            px = (rowsel @ dep_x).tocsc()
            pp = (rowsel @ dep_p).tocsc()
            for m in (px, pp):
                m.data[:] = 1.0
                m.sort_indices()
            self._patterns = (px, pp)
        return self._patterns

    def colorings(self) -> tuple[ColoringScheme, ColoringScheme]:
        if self._colorings is None:
            px, pp = self.patterns()
            self._colorings = (color_columns(px), color_columns(pp))
        return self._colorings


_layouts: "weakref.WeakKeyDictionary[PowerNetwork, _Layout]" = weakref.WeakKeyDictionary()


def layout(net: PowerNetwork) -> _Layout:
    lay = _layouts.get(net)
    if lay is None:
        lay = _layouts[net] = _Layout(net)
    return lay


def _check_dims(net: PowerNetwork, x, p, loads: LoadVector | None = None):
    if len(x) != net.n_x:
        raise ValueError(f"state has length {len(x)}, expected {net.n_x}")
    if len(p) != net.n_p:
        raise ValueError(f"parameters have length {len(p)}, expected {net.n_p}")
    if loads is not None and len(loads.p_load) != net.n_v:
        raise ValueError(f"loads have length {len(loads.p_load)}, expected {net.n_v}")


# --------------------------------------------------------------------------
# forward sweep

def record_tape(net: PowerNetwork, x, p) -> ResidualTape:
    """Forward sweep: per-entry trigonometric terms and bus injections."""
    _check_dims(net, x, p)
    lay = layout(net)
    theta = linear_map(lay.theta_x, x)
    vm = linear_map(lay.vm_x, x) + linear_map(lay.vm_p, p)
    dtheta = theta[lay.ei] - theta[lay.ej]
    c = cos(dtheta)
    s = sin(dtheta)
    vv = vm[lay.ei] * vm[lay.ej]
    pk = vv * (lay.G * c + lay.B * s)
    qk = vv * (lay.G * s - lay.B * c)
    return ResidualTape(lay.key, theta, vm, c, s, vv,
                        linear_map(lay.sum_from, pk), linear_map(lay.sum_from, qk))


def injections(net: PowerNetwork, x, p):
    """Active and reactive bus injections ``(P_inj, Q_inj)``."""
    t = record_tape(net, x, p)
    return t.p_inj, t.q_inj


def residual(net: PowerNetwork, x, p, loads: LoadVector, tape: ResidualTape | None = None):
    """``[dP(pv); dP(pq); dQ(pq)]`` with ``dP = P_inj - Pg + Pd`` and
    ``dQ = Q_inj + Qd``."""
    _check_dims(net, x, p, loads)
    lay = layout(net)
    if tape is None:
        tape = record_tape(net, x, p)
    _check_tape(lay, tape)
    pg = linear_map(lay.pg_p, p)
    dp = tape.p_inj - pg + loads.p_load
    dq = tape.q_inj + loads.q_load
    return concatenate([dp[lay.pv], dp[lay.pq], dq[lay.pq]])


def _ref_generation(lay: _Layout, tape: ResidualTape, loads: LoadVector):
    return tape.p_inj[lay.ref] + loads.p_load[lay.ref]


def objective(net: PowerNetwork, x, p, loads: LoadVector, tape: ResidualTape | None = None):
    """Polynomial generation cost in $/h; the reference bus output is
    ``P_inj + Pd`` at that bus."""
    _check_dims(net, x, p, loads)
    lay = layout(net)
    if tape is None:
        tape = record_tape(net, x, p)
    _check_tape(lay, tape)
    pg = linear_map(lay.pg_p, p)[lay.pg_buses]
    b = lay.pg_buses
    cost = (lay.c2[b] * pg * pg + lay.c1[b] * pg).sum() + lay.c0[b].sum()
    r = lay.ref
    pref = _ref_generation(lay, tape, loads)
    return cost + lay.c2[r] * pref * pref + lay.c1[r] * pref + lay.c0[r]


# --------------------------------------------------------------------------
# reverse sweep

def _check_tape(lay: _Layout, tape: ResidualTape):
    if tape.pattern_key != lay.key:
        raise StaleTapeError("tape was recorded on a different network pattern")


def _injection_adjoint(lay: _Layout, tape: ResidualTape, lam_p, lam_q):
    """Pull bus-injection adjoints back to ``(theta_bar, vm_bar)``.

    Adjoints are formed on the admittance entries first and only then
    summed into the buses.
    """
    pbar = lam_p[lay.ei]
    qbar = lam_q[lay.ei]
    c, s, vv = tape.cos, tape.sin, tape.vv
    vvbar = pbar * (lay.G * c + lay.B * s) + qbar * (lay.G * s - lay.B * c)
    cbar = vv * (pbar * lay.G - qbar * lay.B)
    sbar = vv * (pbar * lay.B + qbar * lay.G)
    tbar = sbar * c - cbar * s
    vm = tape.vm
    vbar_i = vvbar * vm[lay.ej]
    vbar_j = vvbar * vm[lay.ei]
    theta_bar = linear_map(lay.sum_from, tbar) - linear_map(lay.sum_to, tbar)
    vm_bar = linear_map(lay.sum_from, vbar_i) + linear_map(lay.sum_to, vbar_j)
    return theta_bar, vm_bar


def _to_state_params(lay: _Layout, theta_bar, vm_bar, pg_bar):
    xbar = linear_map(lay.theta_xT, theta_bar) + linear_map(lay.vm_xT, vm_bar)
    pbar = linear_map(lay.vm_pT, vm_bar) + linear_map(lay.pg_pT, pg_bar)
    return xbar, pbar


def lagrangian_adjoint(net: PowerNetwork, x, p, loads: LoadVector, lam,
                       objective_weight: float = 1.0, tape: ResidualTape | None = None):
    """Gradient of ``w * f(x, p) + lam^T g(x, p)`` as ``(x_bar, p_bar)``.

    With dual ``x``/``p`` the tangent components are Hessian-of-Lagrangian
    projections; ``lam`` is treated as passive.
    """
    _check_dims(net, x, p, loads)
    lay = layout(net)
    if len(ad.value_of(lam)) != net.n_x:
        raise ValueError(f"adjoint has length {len(ad.value_of(lam))}, expected {net.n_x}")
    if tape is None:
        tape = record_tape(net, x, p)
    _check_tape(lay, tape)
    lam_p = linear_map(lay.lamP, lam)
    lam_q = linear_map(lay.lamQ, lam)
    pg = linear_map(lay.pg_p, p)
    pg_bar = -lam_p
    if objective_weight != 0.0:
        r = lay.ref
        pref = _ref_generation(lay, tape, loads)
        dref = (2.0 * lay.c2[r] * objective_weight) * pref + lay.c1[r] * objective_weight
        lam_p = lam_p + lay.e_ref * dref
        pg_bar = pg_bar + (2.0 * objective_weight) * lay.c2 * pg + objective_weight * lay.c1
    theta_bar, vm_bar = _injection_adjoint(lay, tape, lam_p, lam_q)
    return _to_state_params(lay, theta_bar, vm_bar, pg_bar)


def residual_adjoint(net: PowerNetwork, x, p, loads: LoadVector, lam,
                     tape: ResidualTape | None = None):
    """``((dg/dx)^T lam, (dg/dp)^T lam)`` by a reverse sweep over ``tape``."""
    return lagrangian_adjoint(net, x, p, loads, lam, objective_weight=0.0, tape=tape)


def objective_adjoint(net: PowerNetwork, x, p, loads: LoadVector,
                      tape: ResidualTape | None = None):
    """``(df/dx, df/dp)``."""
    zero = np.zeros(net.n_x)
    return lagrangian_adjoint(net, x, p, loads, zero, objective_weight=1.0, tape=tape)


# --------------------------------------------------------------------------
# problem object consumed by the reduction

class PowerFlowProblem:
    """Parametric power-flow equations with a generation-cost objective.

    Bundles a network and a load profile behind the interface used by
    :mod:`redhes.reduction`.
    """

    def __init__(self, net: PowerNetwork, loads: LoadVector | None = None):
        self.network = net
        self.loads = LoadVector.from_network(net) if loads is None else loads
        if len(self.loads.p_load) != net.n_v:
            raise ValueError("load vector does not match the network")
        self._layout = layout(net)

    @property
    def n_x(self) -> int:
        return self.network.n_x

    @property
    def n_p(self) -> int:
        return self.network.n_p

    def with_loads(self, loads: LoadVector) -> "PowerFlowProblem":
        return PowerFlowProblem(self.network, loads)

    def initial_state(self) -> np.ndarray:
        return self.network.flat_start()

    def initial_parameters(self) -> np.ndarray:
        return self.network.case_parameters()

    def residual(self, x, p):
        return residual(self.network, x, p, self.loads)

    def objective(self, x, p):
        return objective(self.network, x, p, self.loads)

    def lagrangian_adjoint(self, x, p, lam, objective_weight: float = 1.0):
        return lagrangian_adjoint(self.network, x, p, self.loads, lam, objective_weight)

    def colorings(self):
        return self._layout.colorings()

    def jacobians(self, x, p) -> tuple[sp.csc_matrix, sp.csc_matrix]:
        cx, cp = self.colorings()
        return ad.sparse_jacobian(self.residual, x, p, cx, cp)

    def tape_bytes(self, width: int) -> int:
        lay = self._layout
        return 8 * (1 + width) * (3 * len(lay.ei) + 4 * lay.nb)

    def objective_gradient(self, x, p):
        return objective_adjoint(self.network, x, p, self.loads)
