"""Lindblad master equations: the generator, its superoperator, steady states,
random and fixture generators, symmetry checks and a Monte-Carlo
wave-function oracle.

Vectorization is column-stacking throughout: ``vec(A X B) = (B^T kron A) vec(X)``.
"""

from __future__ import annotations

import hashlib
import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla

from .errors import (
    DimensionError,
    NonUniqueSteadyStateError,
    SemiUnitarityError,
    StepSizeError,
    SymmetryError,
    UnsupportedError,
    ValidationError,
)

log = logging.getLogger(__name__)

WARN_TOL = 1e-10
HARD_TOL = 1e-6
RANK_TOL = 1e-8


def dag(a: np.ndarray) -> np.ndarray:
    return np.conj(np.swapaxes(a, -1, -2))


def vec(a: np.ndarray) -> np.ndarray:
    return np.asarray(a).reshape(-1, order="F")


def unvec(v: np.ndarray, d: int) -> np.ndarray:
    return np.asarray(v).reshape((d, d), order="F")


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=complex)
    a.setflags(write=False)
    return a


def _clean(name: str, value: np.ndarray, target: np.ndarray) -> np.ndarray:
    dev = float(np.max(np.abs(value - target))) if value.size else 0.0
    if dev > HARD_TOL:
        raise ValidationError(f"{name} violates its structural constraint by {dev:.3g}",
                              field=name, deviation=dev)
    if dev > WARN_TOL:
        warnings.warn(f"{name}: deviation {dev:.3g} removed at construction", stacklevel=4)
    return target


@dataclass(frozen=True, eq=False)
class Lindbladian:
    """A Hamiltonian plus ``L`` traceless jump operators on a ``D``-level system."""

    H: np.ndarray
    cs: tuple
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        H = np.array(self.H, dtype=complex)
        if H.ndim != 2 or H.shape[0] != H.shape[1]:
            raise DimensionError("H must be square", shape=list(H.shape))
        D = H.shape[0]
        if D < 2:
            raise DimensionError("need D >= 2", D=D)
        if not np.all(np.isfinite(H)):
            raise ValidationError("H has non-finite entries")
        H = _clean("H", H, 0.5 * (H + H.conj().T))
        cs = [np.array(c, dtype=complex) for c in self.cs]
        if not cs:
            raise ValidationError("need at least one jump operator")
        cleaned = []
        for i, c in enumerate(cs):
            if c.shape != (D, D):
                raise DimensionError(f"jump operator {i} has shape {c.shape}, expected {(D, D)}",
                                     index=i)
            if not np.all(np.isfinite(c)):
                raise ValidationError(f"jump operator {i} has non-finite entries", index=i)
            cleaned.append(_frozen(_clean(f"c[{i}]", c, c - np.trace(c) / D * np.eye(D))))
        object.__setattr__(self, "H", _frozen(H))
        object.__setattr__(self, "cs", tuple(cleaned))
        meta = {"class": "custom", "seed": None, "a": None}
        meta.update(self.metadata or {})
        object.__setattr__(self, "metadata", meta)

    @property
    def D(self) -> int:
        return self.H.shape[0]

    @property
    def L(self) -> int:
        return len(self.cs)

    @property
    def H_eff(self) -> np.ndarray:
        return self.H - 0.5j * sum(dag(c) @ c for c in self.cs)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for a in (self.H, *self.cs):
            h.update(np.ascontiguousarray(a + 0.0).tobytes())   # + 0.0 folds -0.0 into 0.0
        return h.hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class DensityMatrix:
    rho: np.ndarray

    def __post_init__(self):
        rho = np.array(self.rho, dtype=complex)
        if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
            raise DimensionError("density matrix must be square")
        if np.max(np.abs(rho - rho.conj().T)) > 1e-10:
            raise ValidationError("density matrix not Hermitian")
        if abs(np.trace(rho) - 1) > 1e-10:
            raise ValidationError("density matrix trace != 1", trace=complex(np.trace(rho)).real)
        if np.linalg.eigvalsh(rho).min() < -1e-10:
            raise ValidationError("density matrix not positive")
        object.__setattr__(self, "rho", _frozen(rho))

    @property
    def D(self) -> int:
        return self.rho.shape[0]


@dataclass(frozen=True)
class SymmetryDescriptor:
    """Which reductions to apply when building a constraint system.

    ``wigner_permutation`` is a 0-based array ``p`` with member ``k`` mapped to
    ``p[k]``.
    """

    real_invariant_subspace: bool = False
    wigner_unitary: Optional[np.ndarray] = None
    wigner_permutation: Optional[tuple] = None

    def __post_init__(self):
        if (self.wigner_unitary is None) != (self.wigner_permutation is None):
            raise ValidationError("Wigner reduction needs both a unitary and a permutation")
        if self.wigner_unitary is not None:
            U = np.array(self.wigner_unitary, dtype=complex)
            if np.max(np.abs(U.conj().T @ U - np.eye(U.shape[0]))) > 1e-10:
                raise SymmetryError("Wigner unitary is not unitary")
            object.__setattr__(self, "wigner_unitary", _frozen(U))
            p = tuple(int(i) for i in self.wigner_permutation)
            if sorted(p) != list(range(len(p))):
                raise ValidationError("permutation is not a bijection", permutation=list(p))
            object.__setattr__(self, "wigner_permutation", p)

    @property
    def wigner(self) -> bool:
        return self.wigner_unitary is not None


def _as_matrix(rho) -> np.ndarray:
    if isinstance(rho, DensityMatrix):
        return rho.rho
    return np.asarray(rho, dtype=complex)


def apply_liouvillian(me: Lindbladian, rho) -> np.ndarray:
    """Evaluate the generator on ``rho`` (any square matrix, not only states)."""
    r = _as_matrix(rho)
    if r.shape != (me.D, me.D):
        raise DimensionError(f"rho has shape {r.shape}, ME has D={me.D}",
                             expected=me.D, got=list(r.shape))
    He = me.H_eff
    out = -1j * (He @ r - r @ dag(He))
    for c in me.cs:
        out = out + c @ r @ dag(c)
    return out


def liouvillian_matrix(me: Lindbladian) -> np.ndarray:
    D = me.D
    I = np.eye(D)
    He = me.H_eff
    Lm = -1j * (np.kron(I, He) - np.kron(He.conj(), I))
    for c in me.cs:
        Lm = Lm + np.kron(c.conj(), c)
    return Lm


@dataclass(frozen=True, eq=False)
class SteadyState:
    state: DensityMatrix
    nullity: int
    rank: int
    residual: float

    @property
    def rho(self) -> np.ndarray:
        return self.state.rho


def steady_state(me: Lindbladian, null_tol: float = 1e-10) -> SteadyState:
    """Dense nullspace solve; raises if the stationary state is not unique."""
    Lm = liouvillian_matrix(me)
    D = me.D
    _, s, vh = np.linalg.svd(Lm)
    scale = max(s[0], 1.0)
    nullity = int(np.sum(s <= null_tol * scale))
    if nullity != 1:
        raise NonUniqueSteadyStateError(
            f"Liouvillian nullspace has dimension {nullity}; steady state not unique",
            nullity=nullity)
    rho = unvec(vh[-1].conj(), D)
    rho = rho / np.trace(rho)
    rho = 0.5 * (rho + dag(rho))
    # one step of inverse-iteration style polishing against the pinned trace
    A = np.vstack([Lm, vec(np.eye(D)).conj()[None, :]])
    b = np.zeros(D * D + 1, dtype=complex)
    b[-1] = 1.0
    v, *_ = np.linalg.lstsq(A, b, rcond=None)
    rho2 = unvec(v, D)
    rho2 = 0.5 * (rho2 + dag(rho2))
    rho2 = rho2 / np.trace(rho2).real
    if np.linalg.norm(apply_liouvillian(me, rho2)) < np.linalg.norm(apply_liouvillian(me, rho)):
        rho = rho2
    ev = np.linalg.eigvalsh(rho)
    rank = int(np.sum(ev > RANK_TOL))
    if ev.min() < 0:
        # clip roundoff-level negativity so the result is a valid state
        if ev.min() < -1e-9:
            raise NonUniqueSteadyStateError("steady state is not positive", min_eig=float(ev.min()))
    resid = float(np.linalg.norm(apply_liouvillian(me, rho)))
    return SteadyState(DensityMatrix(rho), nullity, rank, resid)


def evolve(me: Lindbladian, rho0, t: float) -> np.ndarray:
    """Exact evolution by the matrix exponential of the superoperator."""
    D = me.D
    return unvec(sla.expm(liouvillian_matrix(me) * t) @ vec(_as_matrix(rho0)), D)


# ---------------------------------------------------------------- generators

def hamiltonian_from_alpha(alpha: Sequence[complex]) -> np.ndarray:
    a = np.asarray(alpha, dtype=complex)
    if a.shape != (6,):
        raise DimensionError("alpha must have 6 entries", got=len(a))
    M = np.array([
        [0.5 * (a[0] - a[0].conj()), a[1], a[2]],
        [-a[1].conj(), 0.5 * (a[3] - a[3].conj()), a[4]],
        [-a[2].conj(), -a[4].conj(), 0.5 * (a[5] - a[5].conj())],
    ])
    return 1j * M


def jump_from_gamma(gamma: Sequence[complex]) -> np.ndarray:
    g = np.asarray(gamma, dtype=complex)
    if g.shape != (8,):
        raise DimensionError("gamma must have 8 entries", got=len(g))
    return np.array([[g[0], g[1], g[2]],
                     [g[3], g[4], g[5]],
                     [g[6], g[7], -g[0] - g[4]]])


def me_from_params(alpha, gammas, metadata: Optional[dict] = None) -> Lindbladian:
    """Qutrit ME from the six Hamiltonian and eight-per-channel jump parameters."""
    return Lindbladian(hamiltonian_from_alpha(alpha),
                       tuple(jump_from_gamma(g) for g in gammas), metadata or {})


def _uniform(rng: np.random.Generator, n: int, a: float, real_only: bool) -> np.ndarray:
    re = rng.uniform(-a, a, n)
    if real_only:
        return re.astype(complex)
    return re + 1j * rng.uniform(-a, a, n)


def random_me(D: int, L: int, seed: int, a: float = 3.0, real_only: bool = False) -> Lindbladian:
    """Random qutrit ME with uniformly drawn parameters in ``[-a-ia, a+ia]``.

    ``real_only`` draws from ``[-a, a]``, giving a purely imaginary Hamiltonian
    and real jump operators (class III).
    """
    if D != 3:
        raise UnsupportedError("random_me supports D=3 only; load other MEs from file", D=D)
    if a <= 0:
        raise ValidationError("range a must be positive", a=a)
    if L < 1:
        raise ValidationError("need L >= 1", L=L)
    rng = np.random.default_rng(seed)
    alpha = _uniform(rng, 6, a, real_only)
    gammas = [_uniform(rng, 8, a, real_only) for _ in range(L)]
    cls = "III" if real_only else ("II" if L == 1 else "I")
    return me_from_params(alpha, gammas, {"class": cls, "seed": seed, "a": a})


def random_qubit_me(seed: int, L: int = 1, a: float = 3.0) -> Lindbladian:
    """Qubit analogue of :func:`random_me` (Hermitian H, traceless jumps)."""
    rng = np.random.default_rng(seed)
    al = _uniform(rng, 3, a, False)
    H = 1j * np.array([[0.5 * (al[0] - al[0].conj()), al[1]],
                       [-al[1].conj(), 0.5 * (al[2] - al[2].conj())]])
    cs = []
    for _ in range(L):
        g = _uniform(rng, 3, a, False)
        cs.append(np.array([[g[0], g[1]], [g[2], -g[0]]]))
    return Lindbladian(H, tuple(cs), {"class": "qubit", "seed": seed, "a": a})


def class_iv_me(alpha: float, gamma1: float, gamma2: float, gamma3: float = 0.0) -> Lindbladian:
    """Qutrit ME with a real invariant subspace and the Z2 symmetry ``1 - 2|2><2|``.

    A zero ``gamma3`` drops the third channel, leaving ``L = 2``.
    """
    e = np.eye(3)

    def ket_bra(i, j):
        return np.outer(e[i], e[j])

    H = 1j * alpha * (ket_bra(0, 2) - ket_bra(2, 0))
    cs = [gamma1 * (ket_bra(0, 1) + ket_bra(1, 2)), gamma2 * ket_bra(2, 0)]
    if gamma3 != 0:
        cs.append(gamma3 * ket_bra(1, 2))
    return Lindbladian(H, tuple(cs), {"class": "IV", "seed": None, "a": None})


CLASS_IV_SYMMETRY = np.diag([1.0, -1.0, 1.0]).astype(complex)


# ---------------------------------------------------------------- symmetries

def check_real_invariant_subspace(me: Lindbladian, tol: float = 1e-10) -> bool:
    """True when real density matrices stay real: real jumps and ``H = iA``, A real antisymmetric."""
    if any(np.max(np.abs(c.imag)) > tol for c in me.cs):
        return False
    A = -1j * me.H
    return bool(np.max(np.abs(A.imag)) <= tol and np.max(np.abs(A.real + A.real.T)) <= tol)


def wigner_residual(me: Lindbladian, U) -> float:
    U = np.asarray(U, dtype=complex)
    if U.shape != (me.D, me.D):
        raise DimensionError("U has wrong shape", got=list(U.shape))
    if np.max(np.abs(dag(U) @ U - np.eye(me.D))) > 1e-10:
        raise SymmetryError("U is not unitary")
    T = np.kron(U.conj(), U)
    Lm = liouvillian_matrix(me)
    return float(np.linalg.norm(dag(T) @ Lm @ T - Lm))


def check_wigner_symmetry(me: Lindbladian, U, tol: float = 1e-9) -> tuple[bool, float]:
    r = wigner_residual(me, U)
    return r <= tol, r


# ---------------------------------------------------------------- unravelings

def check_semi_unitary(S: np.ndarray, tol: float) -> None:
    S = np.asarray(S, dtype=complex)
    M, L = S.shape
    if M < L:
        raise SemiUnitarityError(f"S is {M}x{L}; need M >= L", M=M, L=L)
    G = dag(S) @ S
    dev = np.abs(G - np.eye(L))
    if dev.max() > tol:
        i, j = np.unravel_index(np.argmax(dev), dev.shape)
        raise SemiUnitarityError(
            f"S columns ({int(i) + 1}, {int(j) + 1}) violate orthonormality by {dev.max():.3g}",
            columns=[int(i) + 1, int(j) + 1], deviation=float(dev.max()))


def unravel(me: Lindbladian, S, beta) -> tuple[list, np.ndarray]:
    """Jump operators ``sum_l S[m,l] c_l + beta_m`` and the compensating Hamiltonian."""
    S = np.asarray(S, dtype=complex)
    beta = np.asarray(beta, dtype=complex).reshape(-1)
    if S.shape[1] != me.L or S.shape[0] != beta.size:
        raise DimensionError("S must be M x L and beta of length M",
                             S=list(S.shape), beta=int(beta.size), L=me.L)
    I = np.eye(me.D)
    cp = [sum(S[m, l] * me.cs[l] for l in range(me.L)) + beta[m] * I for m in range(S.shape[0])]
    Hp = me.H - 0.5j * sum(np.conj(beta[m]) * cp[m] - beta[m] * dag(cp[m]) for m in range(len(cp)))
    return cp, Hp


def transform_unraveling(me: Lindbladian, S, beta, tol: float = 1e-9,
                         check: bool = True) -> tuple[list, np.ndarray]:
    """Apply a semi-unitary mixing plus displacement; the generator is unchanged."""
    check_semi_unitary(S, tol)
    cp, Hp = unravel(me, S, beta)
    if check:
        # displaced operators carry a trace, so compare raw superoperators
        r = _raw_liouvillian_residual(me, Hp, cp)
        if r > tol * max(1.0, np.linalg.norm(liouvillian_matrix(me))):
            raise SemiUnitarityError("transformed unraveling changes the generator", residual=r)
    return cp, Hp


def raw_liouvillian(H: np.ndarray, cs: Sequence[np.ndarray]) -> np.ndarray:
    """Superoperator of (H, cs) without the traceless normalisation."""
    D = H.shape[0]
    I = np.eye(D)
    He = H - 0.5j * sum(dag(c) @ c for c in cs)
    Lm = -1j * (np.kron(I, He) - np.kron(He.conj(), I))
    for c in cs:
        Lm = Lm + np.kron(np.conj(c), c)
    return Lm


def _raw_liouvillian_residual(me: Lindbladian, Hp, cp) -> float:
    return float(np.linalg.norm(raw_liouvillian(Hp, cp) - liouvillian_matrix(me)))


# ---------------------------------------------------------------- MCWF oracle

@dataclass(frozen=True, eq=False)
class MCWFResult:
    times: np.ndarray
    rho: np.ndarray          # (n_samples, D, D)
    n_traj: int
    n_jumps: int


def _traj_uniforms(seed: int, index: int, n: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, index])).random(n)


def mcwf_simulate(me: Lindbladian, psi0, T: float, dt: float, n_traj: int, seed: int,
                  n_samples: int = 11, chunk: int = 2048) -> MCWFResult:
    """First-order jump/no-jump Monte Carlo with norm-threshold jump decisions.

    Trajectory ``i`` consumes its own stream seeded from ``(seed, i)`` so the
    average does not depend on how trajectories are batched.
    """
    He = me.H_eff
    hnorm = float(np.linalg.norm(He, 2))
    if hnorm * dt > 0.05:
        raise StepSizeError(f"dt={dt} too large: need ||H_eff|| dt <= 0.05",
                            suggested_dt=0.05 / hnorm)
    psi0 = np.asarray(psi0, dtype=complex)
    if abs(np.linalg.norm(psi0) - 1) > 1e-10:
        raise ValidationError("psi0 must be normalised")
    D = me.D
    n_steps = int(round(T / dt))
    sample_steps = np.unique(np.linspace(0, n_steps, n_samples).round().astype(int))
    times = sample_steps * dt
    prop = np.eye(D) - 1j * dt * He
    cs = np.array(me.cs)
    acc = np.zeros((len(sample_steps), D, D), dtype=complex)
    total_jumps = 0
    n_draw = 2 * n_steps + 2
    for start in range(0, n_traj, chunk):
        idx = np.arange(start, min(start + chunk, n_traj))
        B = idx.size
        u = np.stack([_traj_uniforms(seed, int(i), n_draw) for i in idx])
        ptr = np.zeros(B, dtype=int)
        psi = np.tile(psi0, (B, 1))
        thresh = u[:, 0].copy()
        ptr += 1
        si = 0
        for step in range(n_steps + 1):
            if si < len(sample_steps) and step == sample_steps[si]:
                nrm = np.sum(np.abs(psi) ** 2, axis=1)
                phi = psi / np.sqrt(nrm)[:, None]
                acc[si] += np.einsum("bi,bj->ij", phi, phi.conj())
                si += 1
            if step == n_steps:
                break
            psi = psi @ prop.T
            nrm = np.sum(np.abs(psi) ** 2, axis=1)
            jump = nrm < thresh
            if np.any(jump):
                jb = np.nonzero(jump)[0]
                total_jumps += jb.size
                pj = psi[jb]
                cand = np.einsum("lij,bj->bli", cs, pj)
                w = np.sum(np.abs(cand) ** 2, axis=2)
                cw = np.cumsum(w, axis=1)
                r = u[jb, ptr[jb]] * cw[:, -1]
                ch = np.minimum((cw < r[:, None]).sum(axis=1), cs.shape[0] - 1)
                new = cand[np.arange(jb.size), ch]
                psi[jb] = new / np.linalg.norm(new, axis=1)[:, None]
                thresh[jb] = u[jb, ptr[jb] + 1]
                ptr[jb] += 2
    return MCWFResult(times, acc / n_traj, n_traj, total_jumps)


def trace_distance(a: np.ndarray, b: np.ndarray) -> float:
    ev = np.linalg.eigvalsh(0.5 * ((a - b) + dag(a - b)))
    return 0.5 * float(np.sum(np.abs(ev)))
