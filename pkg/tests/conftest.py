import numpy as np
import pytest
import scipy.sparse as sp

from redhes.grid import load_case, parse_matpower
from redhes.powerflow import PowerFlowProblem

TWO_BUS = """function mpc = twobus
mpc.version = '2';
mpc.baseMVA = 100;
%% bus_i type Pd Qd Gs Bs area Vm Va baseKV zone Vmax Vmin
mpc.bus = [
	1	3	0	0	0	0	1	{v1}	0	230	1	1.1	0.9;
	2	1	{pd}	{qd}	0	0	1	1	0	230	1	1.1	0.9;
];
mpc.gen = [
	1	0	0	300	-300	{v1}	100	1	250	10;
];
mpc.branch = [
	1	2	{r}	{x}	{b}	250	250	250	0	0	1	-360	360;
];
mpc.gencost = [
	2	0	0	3	{c2}	{c1}	0;
];
"""


def two_bus_text(r=0.0, x=0.1, b=0.0, pd=0.0, qd=0.0, v1=1.0, c2=0.0, c1=0.0):
    return TWO_BUS.format(r=r, x=x, b=b, pd=pd, qd=qd, v1=v1, c2=c2, c1=c1)


def two_bus(**kw):
    return parse_matpower(two_bus_text(**kw), name="twobus")


THREE_BUS = """function mpc = threebus
mpc.baseMVA = 100;
mpc.bus = [
	1	3	0	0	0	0	1	1	0	230	1	1.1	0.9;
	2	2	0	0	0	0	1	1	0	230	1	1.1	0.9;
	3	1	{pd3}	{qd3}	0	0	1	1	0	230	1	1.1	0.9;
];
mpc.gen = [
	1	0	0	300	-300	1	100	1	250	10;
	2	{pg2}	0	300	-300	1	100	1	250	10;
];
mpc.branch = [
	1	2	0	0.1	0	250	250	250	0	0	1	-360	360;
	2	3	0	0.2	0	250	250	250	0	0	1	-360	360;
	1	3	0	0.25	0	250	250	250	0	0	1	-360	360;
];
mpc.gencost = [
	2	0	0	3	{ref_c2}	{ref_c1}	0;
	2	0	0	3	0	{c1}	0;
];
"""


def three_bus(pd3=0.0, qd3=0.0, pg2=0.0, ref_c2=0.0, ref_c1=0.0, c1=0.0):
    return parse_matpower(THREE_BUS.format(pd3=pd3, qd3=qd3, pg2=pg2, ref_c2=ref_c2,
                                           ref_c1=ref_c1, c1=c1), name="threebus")


class LinearQuadratic:
    """``g = x - A p``, ``f = |x|^2 / 2 + |p|^2 / 2``.

    The implicit map is ``x = A p`` so ``grad F = (A^T A + I) p`` and the
    reduced Hessian is ``A^T A + I``.
    """

    def __init__(self, A):
        self.A = np.asarray(A, dtype=float)
        self.As = sp.csc_matrix(self.A)
        self.n_x, self.n_p = self.A.shape

    def initial_state(self):
        return np.zeros(self.n_x)

    def residual(self, x, p):
        return x - self.As @ p

    def objective(self, x, p):
        return 0.5 * float(x @ x) + 0.5 * float(p @ p)

    def jacobians(self, x, p):
        return sp.identity(self.n_x, format="csc"), sp.csc_matrix(-self.A)

    def objective_gradient(self, x, p):
        return x.copy(), p.copy()

    def lagrangian_adjoint(self, x, p, lam, objective_weight=1.0):
        # p - A^T lam written as a plain-array product on the right
        return x * objective_weight + lam, p * objective_weight - self.A.T @ lam


@pytest.fixture
def toy():
    rng = np.random.default_rng(7)
    return LinearQuadratic(rng.standard_normal((6, 4)))


@pytest.fixture(scope="session")
def case118():
    return load_case("case118")


@pytest.fixture(scope="session")
def case300():
    return load_case("case300")


@pytest.fixture(scope="session")
def case9():
    return load_case("case9")


@pytest.fixture(scope="session")
def problem118(case118):
    return PowerFlowProblem(case118)


@pytest.fixture(scope="session")
def problem9(case9):
    return PowerFlowProblem(case9)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
