import numpy as np
import pytest

from preforge.constraints import build_system
from preforge.heuristic import permutation_from_cycles
from preforge.io import fixture_me, fixture_pre, fixture_scheme
from preforge.lindblad import CLASS_IV_SYMMETRY, SymmetryDescriptor
from preforge.scheme import derive_scheme
from preforge.solver import newton_refine
from preforge.verify import PRE, symmetrize_pre

P_IV = permutation_from_cycles([(1, 4), (2, 3)], 4)


def refine(me, pre, opts):
    sys = build_system(me, pre.K, None, opts)
    c = newton_refine(sys, sys.pack(pre.states, pre.kappa))
    states, kap = sys.unpack(c.x)
    return PRE(states, kap, me_hash=me.content_hash(), residual_norm=c.residual_norm)


@pytest.fixture(scope="session")
def me_iii():
    return fixture_me("iii")


@pytest.fixture(scope="session")
def me_iv():
    return fixture_me("iv")


@pytest.fixture(scope="session")
def pre_iii():
    return fixture_pre("iii")


@pytest.fixture(scope="session")
def pre_iv():
    return fixture_pre("iv")


@pytest.fixture(scope="session")
def sym_iv():
    return SymmetryDescriptor(True, CLASS_IV_SYMMETRY, P_IV)


@pytest.fixture(scope="session")
def refined_iii(me_iii, pre_iii):
    return refine(me_iii, pre_iii, SymmetryDescriptor(True))


@pytest.fixture(scope="session")
def refined_iv(me_iv, pre_iv, sym_iv):
    return symmetrize_pre(refine(me_iv, pre_iv, sym_iv), CLASS_IV_SYMMETRY, P_IV)


@pytest.fixture(scope="session")
def scheme_iii(me_iii, refined_iii):
    return derive_scheme(me_iii, refined_iii, seed=0)


@pytest.fixture(scope="session")
def scheme_iv(me_iv, refined_iv):
    return derive_scheme(me_iv, refined_iv, seed=0, wigner=(CLASS_IV_SYMMETRY, P_IV))


@pytest.fixture(scope="session")
def quoted_scheme_iii():
    return fixture_scheme("iii")


@pytest.fixture(scope="session")
def quoted_scheme_iv():
    return fixture_scheme("iv")


def random_density(rng, D, real=False):
    A = rng.standard_normal((D, D))
    if not real:
        A = A + 1j * rng.standard_normal((D, D))
    rho = A @ A.conj().T
    return rho / np.trace(rho)


def random_semi_unitary(rng, M, L):
    Z = rng.standard_normal((M, L)) + 1j * rng.standard_normal((M, L))
    Q, _ = np.linalg.qr(Z)
    return Q[:, :L]


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":").split("(")[0])):
            terminalreporter.write_line(line)
