"""Network model: MATPOWER case parsing, bus admittance matrix and the
state/parameter partition used by the power-flow equations.

All quantities are stored in per-unit on the case MVA base.  Bus numbers
from the file are remapped to contiguous internal indices ``0..n_v-1`` in
file order.
"""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp


class BusType(enum.IntEnum):
    PQ = 1
    PV = 2
    REF = 3


class MatpowerSyntaxError(ValueError):
    """Malformed case file.  ``lineno`` is 1-based (``None`` if unknown)."""

    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class NetworkError(ValueError):
    """Case file parsed but the network it describes is invalid."""


@dataclass(frozen=True)
class Bus:
    id: int
    bus_type: BusType
    v_mag: float
    v_ang: float
    p_load: float
    q_load: float
    shunt_g: float
    shunt_b: float


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float
    tap_ratio: float = 1.0
    phase_shift: float = 0.0


@dataclass(frozen=True)
class Generator:
    bus: int
    p_gen: float
    cost_c2: float
    cost_c1: float
    cost_c0: float
    v_set: float = 1.0


@dataclass(frozen=True)
class Partition:
    """Index sets and the maps from bus quantities to ``x`` / ``p`` slots.

    ``x = (theta[pv], theta[pq], v[pq])`` and
    ``p = (Pg[pg_buses], v[gen_buses])``, where ``pg_buses`` are the generator
    buses other than the reference bus and ``gen_buses`` includes it.
    Position arrays hold ``-1`` for buses that have no such entry.
    """

    ref: int
    pv: np.ndarray
    pq: np.ndarray
    gen_buses: np.ndarray
    pg_buses: np.ndarray
    theta_pos: np.ndarray
    vm_x_pos: np.ndarray
    pg_pos: np.ndarray
    vm_p_pos: np.ndarray

    @property
    def n_x(self) -> int:
        return len(self.pv) + 2 * len(self.pq)

    @property
    def n_p(self) -> int:
        return len(self.pg_buses) + len(self.gen_buses)


@dataclass(frozen=True, eq=False)
class PowerNetwork:
    name: str
    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    ybus: sp.csr_matrix = field(repr=False)
    partition: Partition = field(repr=False)

    @property
    def n_v(self) -> int:
        return len(self.buses)

    @property
    def n_e(self) -> int:
        return len(self.branches)

    @property
    def n_x(self) -> int:
        return self.partition.n_x

    @property
    def n_p(self) -> int:
        return self.partition.n_p

    @property
    def pv(self) -> np.ndarray:
        return self.partition.pv

    @property
    def pq(self) -> np.ndarray:
        return self.partition.pq

    @property
    def ref(self) -> int:
        return self.partition.ref

    def bus_costs(self) -> np.ndarray:
        """Per-bus aggregated cost coefficients, shape ``(n_v, 3)`` as
        ``(c2, c1, c0)`` in $/h per per-unit power.

        With ``m`` generators at one bus the bus output is shared evenly, so
        the bus polynomial is ``sum_k c_k(P / m)``.
        """
        coef = np.zeros((self.n_v, 3))
        count = np.zeros(self.n_v)
        for g in self.generators:
            count[g.bus] += 1
        for g in self.generators:
            m = count[g.bus]
            coef[g.bus] += (g.cost_c2 / m**2, g.cost_c1 / m, g.cost_c0)
        return coef

    def bus_generation(self) -> np.ndarray:
        pg = np.zeros(self.n_v)
        for g in self.generators:
            pg[g.bus] += g.p_gen
        return pg

    def bus_voltage_setpoints(self) -> np.ndarray:
        """Voltage magnitudes from the case: generator set-points at
        generator buses (first generator wins), bus ``v_mag`` elsewhere."""
        v = np.array([b.v_mag for b in self.buses])
        seen = set()
        for g in self.generators:
            if g.bus not in seen:
                v[g.bus] = g.v_set
                seen.add(g.bus)
        return v

    def loads(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.array([b.p_load for b in self.buses]),
                np.array([b.q_load for b in self.buses]))

    def case_parameters(self) -> np.ndarray:
        """Parameter vector ``p`` taken from the case data."""
        part = self.partition
        pg = self.bus_generation()
        v = self.bus_voltage_setpoints()
        return np.concatenate([pg[part.pg_buses], v[part.gen_buses]])

    def flat_start(self) -> np.ndarray:
        """State vector with zero angles and unit PQ voltage magnitudes."""
        part = self.partition
        return np.concatenate([np.zeros(len(part.pv) + len(part.pq)),
                               np.ones(len(part.pq))])

    def case_start(self) -> np.ndarray:
        """State vector built from the bus voltages stored in the case."""
        part = self.partition
        ang = np.array([b.v_ang for b in self.buses])
        ang = ang - ang[part.ref]
        vm = np.array([b.v_mag for b in self.buses])
        return np.concatenate([ang[part.pv], ang[part.pq], vm[part.pq]])


# --------------------------------------------------------------------------
# admittance

def build_admittance(buses: Sequence[Bus], branches: Sequence[Branch]) -> sp.csr_matrix:
    """Complex bus admittance matrix (per-unit), MATPOWER conventions.

    Series admittance ``1/(r + jx)``, half the line charging at each end,
    off-nominal tap and phase shift on the from side, bus shunts on the
    diagonal.  Explicit zeros are kept so the pattern is always symmetric.
    """
    nb = len(buses)
    f = np.array([br.from_bus for br in branches], dtype=np.int64)
    t = np.array([br.to_bus for br in branches], dtype=np.int64)
    z = np.array([complex(br.r, br.x) for br in branches])
    if np.any(z == 0):
        k = int(np.flatnonzero(z == 0)[0])
        raise NetworkError(f"branch {k} has zero series impedance")
    ys = 1.0 / z
    bc = np.array([br.b_charging for br in branches])
    tap = np.array([br.tap_ratio * np.exp(1j * br.phase_shift) for br in branches])
    ytt = ys + 0.5j * bc
    yff = ytt / (tap * np.conj(tap))
    yft = -ys / np.conj(tap)
    ytf = -ys / tap
    ysh = np.array([complex(b.shunt_g, b.shunt_b) for b in buses])

    rows = np.concatenate([f, t, f, t, np.arange(nb)])
    cols = np.concatenate([f, t, t, f, np.arange(nb)])
    vals = np.concatenate([yff, ytt, yft, ytf, ysh])
    y = sp.coo_matrix((vals, (rows, cols)), shape=(nb, nb)).tocsr()
    y.sum_duplicates()
    y.sort_indices()
    return y


# --------------------------------------------------------------------------
# partition

def partition(buses: Sequence[Bus], generators: Sequence[Generator]) -> Partition:
    nb = len(buses)
    types = np.array([int(b.bus_type) for b in buses])
    ref = np.flatnonzero(types == BusType.REF)
    if len(ref) != 1:
        raise NetworkError(f"expected exactly one REF bus, found {len(ref)}")
    ref = int(ref[0])
    gen_buses = np.array(sorted({g.bus for g in generators}), dtype=np.int64)
    pv = np.flatnonzero(types == BusType.PV)
    pq = np.flatnonzero(types == BusType.PQ)
    pg_buses = gen_buses[gen_buses != ref]

    theta_pos = np.full(nb, -1, dtype=np.int64)
    theta_pos[pv] = np.arange(len(pv))
    theta_pos[pq] = len(pv) + np.arange(len(pq))
    vm_x_pos = np.full(nb, -1, dtype=np.int64)
    vm_x_pos[pq] = len(pv) + len(pq) + np.arange(len(pq))
    pg_pos = np.full(nb, -1, dtype=np.int64)
    pg_pos[pg_buses] = np.arange(len(pg_buses))
    vm_p_pos = np.full(nb, -1, dtype=np.int64)
    vm_p_pos[gen_buses] = len(pg_buses) + np.arange(len(gen_buses))
    for arr in (pv, pq, gen_buses, pg_buses, theta_pos, vm_x_pos, pg_pos, vm_p_pos):
        arr.setflags(write=False)
    return Partition(ref, pv, pq, gen_buses, pg_buses,
                     theta_pos, vm_x_pos, pg_pos, vm_p_pos)


def make_network(name: str, base_mva: float, buses: Sequence[Bus],
                 branches: Sequence[Branch],
                 generators: Sequence[Generator]) -> PowerNetwork:
    """Validate components and assemble an immutable :class:`PowerNetwork`.

    Bus/generator/branch ``bus`` fields must already be internal indices.
    """
    buses = tuple(buses)
    branches = tuple(branches)
    generators = tuple(generators)
    nb = len(buses)
    ids = [b.id for b in buses]
    if len(set(ids)) != len(ids):
        raise NetworkError("duplicate bus id")
    for b in buses:
        if not b.v_mag > 0:
            raise NetworkError(f"bus {b.id}: non-positive voltage magnitude")
    for k, br in enumerate(branches):
        if br.from_bus == br.to_bus:
            raise NetworkError(f"branch {k} connects bus {ids[br.from_bus]} to itself")
        if not br.tap_ratio > 0:
            raise NetworkError(f"branch {k}: non-positive tap ratio")
        if not (0 <= br.from_bus < nb and 0 <= br.to_bus < nb):
            raise NetworkError(f"branch {k}: bus index out of range")
    for g in generators:
        if buses[g.bus].bus_type == BusType.PQ:
            raise NetworkError(f"generator at PQ bus {ids[g.bus]}")
    part = partition(buses, generators)
    ybus = build_admittance(buses, branches)
    for arr in (ybus.data, ybus.indices, ybus.indptr):
        arr.setflags(write=False)
    return PowerNetwork(name, float(base_mva), buses, branches, generators, ybus, part)


# --------------------------------------------------------------------------
# MATPOWER reader

_BLOCK_START = re.compile(r"^\s*mpc\.(\w+)\s*=\s*([\[{])(.*)$")
_SCALAR = re.compile(r"^\s*mpc\.(\w+)\s*=\s*([^;\[{]*);")
_REQUIRED = ("bus", "gen", "branch", "gencost")


def _read_blocks(text: str) -> tuple[dict, dict]:
    """Split a case file into numeric matrix blocks and scalar assignments.

    Returns ``(blocks, scalars)`` where ``blocks[name] = (rows, linenos)``.
    Cell arrays (``{...}``) are skipped.
    """
    blocks: dict[str, tuple[list[list[float]], list[int]]] = {}
    scalars: dict[str, tuple[str, int]] = {}
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        line = lines[i].split("%", 1)[0]
        m = _BLOCK_START.match(line)
        if m is None:
            s = _SCALAR.match(line)
            if s is not None:
                scalars[s.group(1)] = (s.group(2).strip(), i + 1)
            i += 1
            continue
        name, opener, rest = m.groups()
        closer = "]" if opener == "[" else "}"
        start = i + 1
        rows: list[list[float]] = []
        linenos: list[int] = []
        body = rest
        lineno = i + 1
        closed = False
        while True:
            if closer in body:
                body = body[:body.index(closer)]
                closed = True
            if opener == "[":
                for chunk in body.split(";"):
                    toks = chunk.replace(",", " ").split()
                    if not toks:
                        continue
                    try:
                        vals = [float(tok) for tok in toks]
                    except ValueError:
                        bad = next(t for t in toks if not _is_number(t))
                        raise MatpowerSyntaxError(
                            f"invalid number {bad!r} in mpc.{name}", lineno) from None
                    rows.append(vals)
                    linenos.append(lineno)
            if closed:
                break
            i += 1
            if i >= len(lines):
                raise MatpowerSyntaxError(f"unterminated block mpc.{name}", start)
            body = lines[i].split("%", 1)[0]
            lineno = i + 1
        if opener == "[":
            widths = {len(r) for r in rows}
            if len(widths) > 1:
                want = len(rows[0])
                k = next(j for j, r in enumerate(rows) if len(r) != want)
                raise MatpowerSyntaxError(
                    f"row of mpc.{name} has {len(rows[k])} columns, expected {want}",
                    linenos[k])
            blocks[name] = (rows, linenos)
        i += 1
    return blocks, scalars


def _is_number(tok: str) -> bool:
    try:
        float(tok)
    except ValueError:
        return False
    return True


def parse_matpower(text: str, name: str = "case") -> PowerNetwork:
    """Parse MATPOWER case text into a validated :class:`PowerNetwork`.

    Out-of-service branches and generators are dropped.  Only polynomial
    generator costs (model 2) of degree at most two are accepted.
    """
    m = re.search(r"function\s+\w+\s*=\s*(\w+)", text)
    if m is not None:
        name = m.group(1)
    blocks, scalars = _read_blocks(text)
    if "baseMVA" not in scalars:
        raise MatpowerSyntaxError("missing mpc.baseMVA")
    try:
        base_mva = float(scalars["baseMVA"][0])
    except ValueError:
        raise MatpowerSyntaxError("invalid mpc.baseMVA", scalars["baseMVA"][1]) from None
    for key in _REQUIRED:
        if key not in blocks:
            raise MatpowerSyntaxError(f"missing mpc.{key}")

    bus_rows, bus_lines = blocks["bus"]
    id_to_idx: dict[int, int] = {}
    buses = []
    for row, ln in zip(bus_rows, bus_lines):
        if len(row) < 13:
            raise MatpowerSyntaxError("bus row needs 13 columns", ln)
        bid = int(row[0])
        if bid in id_to_idx:
            raise NetworkError(f"duplicate bus id {bid} (line {ln})")
        btype = int(row[1])
        if btype not in (1, 2, 3):
            raise NetworkError(f"bus {bid}: unsupported bus type {btype} (line {ln})")
        id_to_idx[bid] = len(buses)
        buses.append(Bus(
            id=bid, bus_type=BusType(btype), v_mag=row[7], v_ang=np.deg2rad(row[8]),
            p_load=row[2] / base_mva, q_load=row[3] / base_mva,
            shunt_g=row[4] / base_mva, shunt_b=row[5] / base_mva))

    gen_rows, gen_lines = blocks["gen"]
    cost_rows, cost_lines = blocks["gencost"]
    if len(cost_rows) < len(gen_rows):
        raise NetworkError("mpc.gencost has fewer rows than mpc.gen")
    generators = []
    for row, ln, crow, cln in zip(gen_rows, gen_lines, cost_rows, cost_lines):
        if len(row) < 10:
            raise MatpowerSyntaxError("gen row needs at least 10 columns", ln)
        if int(crow[0]) != 2:
            raise NetworkError(f"unsupported gencost model {int(crow[0])} (line {cln})")
        ncoef = int(crow[3])
        coefs = crow[4:4 + ncoef]
        if len(coefs) != ncoef:
            raise MatpowerSyntaxError("gencost row shorter than its coefficient count", cln)
        if ncoef > 3 and any(c != 0 for c in coefs[:ncoef - 3]):
            raise NetworkError(f"gencost polynomial of degree {ncoef - 1} unsupported (line {cln})")
        c2, c1, c0 = ([0.0] * 3 + list(coefs))[-3:]
        if row[7] <= 0:
            continue
        gid = int(row[0])
        if gid not in id_to_idx:
            raise NetworkError(f"generator at nonexistent bus {gid} (line {ln})")
        generators.append(Generator(
            bus=id_to_idx[gid], p_gen=row[1] / base_mva,
            cost_c2=c2 * base_mva**2, cost_c1=c1 * base_mva, cost_c0=c0,
            v_set=row[5]))

    # PV buses without an in-service generator become PQ
    gen_buses = {g.bus for g in generators}
    buses = [b if b.bus_type != BusType.PV or i in gen_buses
             else Bus(b.id, BusType.PQ, b.v_mag, b.v_ang, b.p_load, b.q_load,
                      b.shunt_g, b.shunt_b)
             for i, b in enumerate(buses)]

    branches = []
    for row, ln in zip(*blocks["branch"]):
        if len(row) < 11:
            raise MatpowerSyntaxError("branch row needs at least 11 columns", ln)
        if row[10] <= 0:
            continue
        fb, tb = int(row[0]), int(row[1])
        for b in (fb, tb):
            if b not in id_to_idx:
                raise NetworkError(f"branch references nonexistent bus {b} (line {ln})")
        if row[2] == 0 and row[3] == 0:
            raise NetworkError(f"branch with zero impedance (line {ln})")
        branches.append(Branch(
            from_bus=id_to_idx[fb], to_bus=id_to_idx[tb], r=row[2], x=row[3],
            b_charging=row[4], tap_ratio=row[8] if row[8] != 0 else 1.0,
            phase_shift=np.deg2rad(row[9])))

    return make_network(name, base_mva, buses, branches, generators)


def read_case(path: str | Path) -> PowerNetwork:
    path = Path(path)
    return parse_matpower(path.read_text(), name=path.stem)


SHIPPED_CASES = ("case9", "case14", "case30", "case118", "case300",
                 "case1354pegase", "case2869pegase")


def load_case(name_or_path: str | Path) -> PowerNetwork:
    """Load a shipped case by name (e.g. ``"case118"``) or a file path."""
    p = Path(name_or_path)
    if p.suffix == ".m" or p.exists():
        return read_case(p)
    name = str(name_or_path)
    ref = resources.files("redhes").joinpath("cases", f"{name}.m")
    if not ref.is_file():
        raise FileNotFoundError(f"no such case: {name}")
    return parse_matpower(ref.read_text(), name=name)


# --------------------------------------------------------------------------
# MATPOWER writer

def write_matpower(net: PowerNetwork) -> str:
    """Serialize the retained fields back to MATPOWER text.

    Costs are written as model-2 quadratics; values are printed with full
    precision so a parse of the output reproduces the network.
    """
    base = net.base_mva
    fmt = lambda vals: "\t".join(f"{v:.17g}" for v in vals)  # noqa: E731
    out = [f"function mpc = {net.name}", "mpc.version = '2';",
           f"mpc.baseMVA = {base:.17g};", "mpc.bus = ["]
    for b in net.buses:
        out.append("\t" + fmt([b.id, int(b.bus_type), b.p_load * base, b.q_load * base,
                                b.shunt_g * base, b.shunt_b * base, 1, b.v_mag, np.rad2deg(b.v_ang),
                                0, 1, 1.1, 0.9]) + ";")
    out += ["];", "mpc.gen = ["]
    for g in net.generators:
        out.append("\t" + fmt([net.buses[g.bus].id, g.p_gen * base, 0, 0, 0, g.v_set,
                                base, 1, 0, 0]) + ";")
    out += ["];", "mpc.branch = ["]
    for br in net.branches:
        out.append("\t" + fmt([net.buses[br.from_bus].id, net.buses[br.to_bus].id,
                                br.r, br.x, br.b_charging, 0, 0, 0,
                                br.tap_ratio, np.rad2deg(br.phase_shift), 1, -360, 360])
                   + ";")
    out += ["];", "mpc.gencost = ["]
    for g in net.generators:
        out.append("\t" + fmt([2, 0, 0, 3, g.cost_c2 / base**2, g.cost_c1 / base,
                                g.cost_c0]) + ";")
    out += ["];", ""]
    return "\n".join(out)
