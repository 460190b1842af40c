"""Adaptive measurement schemes realising a PRE.

For every member k the scheme fixes an unraveling (S_k, beta_k). Detector m
then maps phi_k to phi_{f_k(m)} at rate lambda_k(m), and the no-jump
evolution leaves phi_k unchanged up to normalisation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import least_squares

from .errors import NoSchemeError, SymmetryError, UnverifiedSchemeError, ValidationError
from .lindblad import Lindbladian, _raw_liouvillian_residual, check_semi_unitary, dag, unravel
from .verify import PRE


@dataclass
class MeasurementScheme:
    """Per-member settings. ``f`` holds 0-based destination members."""
    S: list
    beta: list
    f: list
    lam: list

    def __post_init__(self):
        self.S = [np.atleast_2d(np.asarray(s, dtype=complex)) for s in self.S]
        self.beta = [np.asarray(b, dtype=complex).reshape(-1) for b in self.beta]
        self.f = [np.asarray(v, dtype=int).reshape(-1) for v in self.f]
        self.lam = [np.asarray(v, dtype=float).reshape(-1) for v in self.lam]

    @property
    def K(self) -> int:
        return len(self.S)

    @property
    def M(self) -> int:
        return self.S[0].shape[0]

    @property
    def L(self) -> int:
        return self.S[0].shape[1]

    def kappa(self) -> np.ndarray:
        """Rates implied by (f, lambda): kappa[j, k] = sum of lambda_k(m) over m with f_k(m) = j."""
        kap = np.zeros((self.K, self.K))
        for k in range(self.K):
            for j, lam in zip(self.f[k], self.lam[k]):
                if j != k:
                    kap[j, k] += lam
        return kap


def effective_operators(me: Lindbladian, S, beta, tol: float = 1e-8):
    """Jump operators and no-jump generator of the transformed unraveling."""
    check_semi_unitary(S, tol)
    cp, Hp = unravel(me, S, beta)
    Heff = Hp - 0.5j * sum(dag(c) @ c for c in cp)
    return cp, Heff


@dataclass
class SchemeReport:
    tol: float
    lambda_error: float
    proportionality_error: float
    eigenstate_error: float
    semi_unitarity_error: float
    kappa_error: float
    liouvillian_error: float
    per_member: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return max(self.lambda_error, self.proportionality_error, self.eigenstate_error,
                   self.semi_unitarity_error, self.kappa_error) <= self.tol

    def __bool__(self):
        return self.passed

    def to_dict(self) -> dict:
        return {"pass": self.passed, "tol": self.tol, "lambda_error": self.lambda_error,
                "proportionality_error": self.proportionality_error,
                "eigenstate_error": self.eigenstate_error,
                "semi_unitarity_error": self.semi_unitarity_error,
                "kappa_error": self.kappa_error, "liouvillian_error": self.liouvillian_error,
                "per_member": self.per_member}


def _member_errors(me: Lindbladian, phis, k, S, beta, f, lam):
    S = np.asarray(S, dtype=complex)
    su = float(np.max(np.abs(dag(S) @ S - np.eye(S.shape[1]))))
    cp, Hp = unravel(me, S, beta)
    Heff = Hp - 0.5j * sum(dag(c) @ c for c in cp)
    phi = phis[k]
    lam_err = prop_err = 0.0
    for m, c in enumerate(cp):
        v = c @ phi
        nv = np.linalg.norm(v)
        lam_err = max(lam_err, abs(nv ** 2 - lam[m]))
        prop_err = max(prop_err, abs(abs(np.vdot(phis[f[m]], v)) - nv))
    w = Heff @ phi
    eig = float(np.linalg.norm(w - np.vdot(phi, w) * phi))
    liou = _raw_liouvillian_residual(me, Hp, cp)
    return {"lambda": float(lam_err), "proportionality": float(prop_err), "eigenstate": eig,
            "semi_unitarity": su, "liouvillian": liou}


def verify_scheme(me: Lindbladian, pre: PRE, scheme: MeasurementScheme, tol: float = 1e-8) -> SchemeReport:
    phis = pre.states
    per = [_member_errors(me, phis, k, scheme.S[k], scheme.beta[k], scheme.f[k], scheme.lam[k])
           for k in range(pre.K)]
    kap_err = float(np.max(np.abs(scheme.kappa() - pre.kappa)))

    def worst(key):
        return max(p[key] for p in per)

    return SchemeReport(tol, worst("lambda"), worst("proportionality"), worst("eigenstate"),
                        worst("semi_unitarity"), kap_err, worst("liouvillian"), per)


# ------------------------------------------------------------------ derivation

def _assignment(pre: PRE, k: int, M: int):
    """One detector per destination: positive-rate targets first, then zero-rate ones."""
    K = pre.K
    pos = [j for j in range(K) if j != k and pre.kappa[j, k] > 0]
    zero = [j for j in range(K) if j != k and pre.kappa[j, k] <= 0]
    if M < len(pos):
        raise ValidationError(f"member {k + 1} has {len(pos)} destinations but only M={M} detectors",
                              member=k + 1, M=M)
    f = (pos + zero)[:M]
    while len(f) < M:
        f.append(zero[0] if zero else pos[0])
    lam = [pre.kappa[j, k] if j not in f[:m] else 0.0 for m, j in enumerate(f)]
    return f, lam


def _pack(S, beta, real):
    if real:
        return np.concatenate([S.real.ravel(), beta.real])
    return np.concatenate([S.real.ravel(), S.imag.ravel(), beta.real, beta.imag])


def _unpack(z, M, L, real):
    if real:
        return z[: M * L].reshape(M, L).astype(complex), z[M * L:].astype(complex)
    n = M * L
    S = (z[:n] + 1j * z[n: 2 * n]).reshape(M, L)
    beta = z[2 * n: 2 * n + M] + 1j * z[2 * n + M:]
    return S, beta


def _polar(S):
    U, _, Vh = np.linalg.svd(S, full_matrices=False)
    return U @ Vh


def _member_problem(me: Lindbladian, phis, k, f, lam, real, penalty=10.0):
    phi = phis[k]
    A = np.array([c @ phi for c in me.cs])           # (L, D)
    cdc = [[dag(a) @ b for b in me.cs] for a in me.cs]
    M, L = len(f), me.L
    sq = np.sqrt(np.maximum(lam, 0.0))
    proj_k = np.eye(me.D) - np.outer(phi, phi.conj())
    iu = np.triu_indices(L)

    def split(v):
        return v.real if real else np.concatenate([v.real, v.imag])

    def fun(z):
        S, beta = _unpack(z, M, L, real)
        V = S @ A + beta[:, None] * phi[None, :]      # rows: c'_m phi
        out = []
        for m in range(M):
            v = V[m]
            if lam[m] > 0:
                t = phis[f[m]]
                ov = np.vdot(t, v)
                out.append(split(v - ov * t))
                out.append([abs(ov) - sq[m]])
            else:
                out.append(split(v))
        # H_eff' phi, built from S and beta without forming every operator
        G = dag(S) @ S
        cd = sum(G[a, b] * cdc[a][b] for a in range(L) for b in range(L))
        bs = S.T @ beta.conj()                           # sum_m S_ml conj(beta_m)
        # H' - i/2 sum c'^dag c' = H - i/2 sum G_ab c_a^dag c_b - i sum_l bs_l c_l + const
        Heff = me.H - 0.5j * cd - 1j * sum(bs[l] * me.cs[l] for l in range(L))
        w = Heff @ phi
        out.append(split(proj_k @ w))
        dev = G - np.eye(L)
        out.append(penalty * (dev[iu].real if real else np.concatenate([dev[iu].real, dev[iu].imag])))
        return np.concatenate([np.ravel(o) for o in out])

    return fun


def _solve_member(me, phis, k, f, lam, real, rng, restarts, tol):
    M, L = len(f), me.L
    fun = _member_problem(me, phis, k, f, lam, real)
    scale = np.sqrt(max(max(lam), 1e-12))
    best = None
    for _ in range(restarts):
        if real:
            S0 = _polar(rng.standard_normal((M, L))).astype(complex)
            b0 = scale * rng.standard_normal(M) + 0j
        else:
            S0 = _polar(rng.standard_normal((M, L)) + 1j * rng.standard_normal((M, L)))
            b0 = scale * (rng.standard_normal(M) + 1j * rng.standard_normal(M)) / np.sqrt(2)
        sol = least_squares(fun, _pack(S0, b0, real), method="lm", xtol=1e-15, ftol=1e-15,
                            gtol=1e-15, max_nfev=4000)
        S, beta = _unpack(sol.x, M, L, real)
        S = _polar(S)
        # re-solve beta with S fixed on the semi-unitary manifold
        fb = _member_problem(me, phis, k, f, lam, real, penalty=0.0)
        nb = M if real else 2 * M

        def fun_b(zb, S=S):
            return fb(np.concatenate([_pack(S, np.zeros(M), real)[:-nb], zb]))

        zb = least_squares(fun_b, _pack(S, beta, real)[-nb:], method="lm", xtol=1e-15,
                           ftol=1e-15, gtol=1e-15).x
        beta = _unpack(np.concatenate([_pack(S, np.zeros(M), real)[:-nb], zb]), M, L, real)[1]
        err = _member_errors(me, phis, k, S, beta, f, lam)
        worst = max(err["lambda"], err["proportionality"], err["eigenstate"], err["semi_unitarity"])
        if best is None or worst < best[0]:
            best = (worst, S, beta)
        if worst <= tol:
            break
    return best


def _channel_map(me: Lindbladian, U) -> np.ndarray:
    """u with U c_l U^dag = sum_l' u[l, l'] c_l'."""
    U = np.asarray(U, dtype=complex)
    C = np.array([c.ravel() for c in me.cs]).T             # (D^2, L)
    T = np.array([(U @ c @ dag(U)).ravel() for c in me.cs]).T
    u = np.linalg.lstsq(C, T, rcond=None)[0].T
    if np.max(np.abs(C @ u.T - T)) > 1e-9:
        raise SymmetryError("U does not map the jump operators onto their span")
    return u


def map_scheme_member(me: Lindbladian, S, beta, f, U, P):
    """Settings for member P(k) from those of k under the Wigner unitary U."""
    u = _channel_map(me, U)
    return np.asarray(S) @ u, np.asarray(beta), [P[j] for j in f]


def derive_scheme(me: Lindbladian, pre: PRE, M: Optional[int] = None, seed: int = 0,
                  tol: float = 1e-8, restarts: int = 20, real: Optional[bool] = None,
                  wigner: Optional[tuple] = None) -> MeasurementScheme:
    """Least-squares search for (S_k, beta_k) given one detector per destination.

    ``wigner=(U, P)`` solves orbit representatives only and maps the result
    to the other members.
    """
    K = pre.K
    M = K - 1 if M is None else M
    if M < me.L:
        raise ValidationError(f"M={M} < L={me.L}: no semi-unitary S exists", M=M, L=me.L)
    if real is None:
        real = (np.max(np.abs(pre.states.imag)) < 1e-12 and np.max(np.abs(me.H.real)) < 1e-12
                and all(np.max(np.abs(c.imag)) < 1e-12 for c in me.cs))
    phis = pre.states
    Ss, betas, fs, lams = [None] * K, [None] * K, [None] * K, [None] * K
    todo = list(range(K))
    if wigner is not None:
        from .heuristic import wigner_orbit_partition
        U, P = wigner
        orbits = wigner_orbit_partition(K, P)
        todo = [o[0] for o in orbits]
    for k in todo:
        f, lam = _assignment(pre, k, M)
        rng = np.random.default_rng(np.random.SeedSequence([seed, k]))
        worst, S, beta = _solve_member(me, phis, k, f, lam, real, rng, restarts, tol)
        if worst > tol:
            raise NoSchemeError(
                f"no scheme for member {k + 1} at tol {tol:g} (best {worst:.3e}); "
                f"the ensemble may not be a PRE, or try more detectors (M > {M})",
                member=k + 1, best=worst, M=M)
        Ss[k], betas[k], fs[k], lams[k] = S, beta, f, lam
    if wigner is not None:
        for orb in orbits:
            for a, b in zip(orb, orb[1:]):
                Ss[b], betas[b], fs[b] = map_scheme_member(me, Ss[a], betas[a], fs[a], U, P)
                lams[b] = lams[a]
    scheme = MeasurementScheme(Ss, betas, fs, lams)
    return scheme


def require_verified(me: Lindbladian, pre: PRE, scheme: MeasurementScheme, tol: float = 1e-8):
    rep = verify_scheme(me, pre, scheme, tol)
    if not rep.passed:
        raise UnverifiedSchemeError("scheme does not realise the ensemble", **rep.to_dict())
    return rep
