"""Direct checks of candidate ensembles: constraint residual, rates, graph,
rank, occupation probabilities and the ensemble average."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import networkx as nx
import numpy as np

from .errors import DimensionError, ReducibleChainError
from .lindblad import (Lindbladian, apply_liouvillian, dag, liouvillian_matrix, steady_state,
                       trace_distance)

RANK_TOL = 1e-8


@dataclass
class PRE:
    """Normalised states (K, D), rates ``kappa[dest, source]`` and occupations."""
    states: np.ndarray
    kappa: np.ndarray
    occupations: np.ndarray = None
    me_hash: str = ""
    residual_norm: float = float("nan")

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=complex)
        self.kappa = np.array(self.kappa, dtype=float)
        if self.kappa.shape != (self.K, self.K):
            raise DimensionError("kappa must be K x K", K=self.K, shape=list(self.kappa.shape))
        np.fill_diagonal(self.kappa, 0.0)
        n = np.linalg.norm(self.states, axis=1)
        if np.any(n == 0):
            raise DimensionError("zero state vector")
        # rows already at unit norm are kept bit-for-bit so file round trips are exact
        n = np.where(np.abs(n - 1) <= 1e-14, 1.0, n)
        self.states = self.states / n[:, None]
        if self.occupations is None:
            try:
                self.occupations = occupations(self.kappa)
            except ReducibleChainError:
                self.occupations = None

    @property
    def K(self) -> int:
        return self.states.shape[0]

    @property
    def D(self) -> int:
        return self.states.shape[1]

    @property
    def projectors(self) -> np.ndarray:
        return np.einsum("ka,kb->kab", self.states, self.states.conj())

    def edges(self, floor: float = 0.0) -> list:
        """(source, dest) pairs with positive rate."""
        return [(k, j) for j in range(self.K) for k in range(self.K)
                if j != k and self.kappa[j, k] > floor]


@dataclass
class VerificationReport:
    eq_residual: float
    min_rate: float
    graph_ok: bool
    rank: int
    rank_ok: bool
    rho_ss_distance: float
    tol: float
    residual_ok: bool = False
    rates_ok: bool = False
    distance_ok: bool = False
    trapped: list = field(default_factory=list)
    per_member: list = field(default_factory=list)
    symmetric: Optional[bool] = None

    @property
    def passed(self) -> bool:
        ok = self.residual_ok and self.rates_ok and self.graph_ok and self.rank_ok and self.distance_ok
        return ok and self.symmetric is not False

    def __bool__(self):
        return self.passed

    def to_dict(self) -> dict:
        return {"pass": self.passed, "eq_residual": self.eq_residual, "min_rate": self.min_rate,
                "graph_ok": self.graph_ok, "rank": self.rank, "rank_ok": self.rank_ok,
                "rho_ss_distance": self.rho_ss_distance, "tol": self.tol,
                "residual_ok": self.residual_ok, "rates_ok": self.rates_ok,
                "distance_ok": self.distance_ok,
                "trapped": [[i + 1 for i in c] for c in self.trapped],
                "per_member": self.per_member, "symmetric": self.symmetric}


def ctmc_generator(kappa) -> np.ndarray:
    Q = np.array(kappa, dtype=float)
    np.fill_diagonal(Q, 0.0)
    Q -= np.diag(Q.sum(axis=0))
    return Q


def _closed_classes(kappa, floor=0.0):
    K = kappa.shape[0]
    G = nx.DiGraph()
    G.add_nodes_from(range(K))
    G.add_edges_from((k, j) for j in range(K) for k in range(K) if j != k and kappa[j, k] > floor)
    if nx.is_strongly_connected(G):
        return []
    C = nx.condensation(G)
    return [sorted(C.nodes[c]["members"]) for c in C.nodes if C.out_degree(c) == 0]


def occupations(kappa) -> np.ndarray:
    """Stationary distribution of the CTMC with generator Q = kappa - diag(outflow)."""
    kappa = np.asarray(kappa, dtype=float)
    K = kappa.shape[0]
    closed = _closed_classes(kappa)
    if closed:
        raise ReducibleChainError("rate graph is not strongly connected",
                                  trapped=[[i + 1 for i in c] for c in closed])
    Q = ctmc_generator(kappa)
    A = np.vstack([Q, np.ones(K)])
    b = np.zeros(K + 1)
    b[-1] = 1.0
    p = np.linalg.lstsq(A, b, rcond=None)[0]
    return np.clip(p, 0.0, None) / np.clip(p, 0.0, None).sum()


def ensemble_average(states, weights) -> np.ndarray:
    states = np.asarray(states, dtype=complex)
    states = states / np.linalg.norm(states, axis=1)[:, None]
    return np.einsum("k,ka,kb->ab", np.asarray(weights, dtype=float), states, states.conj())


def member_residuals(me: Lindbladian, states, kappa) -> np.ndarray:
    """Full D x D residual matrix for each member (no component reduction)."""
    states = np.asarray(states, dtype=complex)
    states = states / np.linalg.norm(states, axis=1)[:, None]
    P = np.einsum("ka,kb->kab", states, states.conj())
    K = len(P)
    out = np.empty_like(P)
    for k in range(K):
        jump = sum(kappa[j, k] * (P[j] - P[k]) for j in range(K) if j != k)
        out[k] = apply_liouvillian(me, P[k]) - jump
    return out


def projector_rank(states) -> int:
    """Rank of the Gram-like sum of member projectors (the dimension the ensemble spans)."""
    states = np.asarray(states, dtype=complex)
    states = states / np.linalg.norm(states, axis=1)[:, None]
    w = np.linalg.eigvalsh(np.einsum("ka,kb->ab", states, states.conj()) / len(states))
    return int(np.sum(w > RANK_TOL))


def verify_pre(me: Lindbladian, states, kappa, tol: float = 1e-9,
               rate_floor: float = -1e-10) -> VerificationReport:
    states = np.asarray(states, dtype=complex)
    kappa = np.asarray(kappa, dtype=float)
    K, D = states.shape
    if D != me.D or kappa.shape != (K, K):
        raise DimensionError("states/kappa do not match the ME", D=me.D, states=list(states.shape),
                             kappa=list(kappa.shape))
    R = member_residuals(me, states, kappa)
    per = [float(np.max(np.abs(r))) for r in R]
    res = max(per)
    off = kappa[~np.eye(K, dtype=bool)]
    min_rate = float(off.min()) if off.size else 0.0
    trapped = _closed_classes(kappa, floor=0.0)
    graph_ok = not trapped
    rank = projector_rank(states)
    dist = float("inf")
    if graph_ok:
        p = occupations(np.clip(kappa, 0.0, None))
        rho = ensemble_average(states, p)
        dist = trace_distance(rho, steady_state(me).rho)
    rep = VerificationReport(res, min_rate, graph_ok, rank, rank == D, dist, tol,
                             trapped=trapped, per_member=per)
    rep.residual_ok = res <= tol
    rep.rates_ok = min_rate >= rate_floor
    # the weighted sum of the member equations gives L(rho) = 0, so the
    # distance is controlled by the residual through the Liouvillian gap
    rep.distance_ok = dist <= max(tol, 1e-8) * _distance_factor(me)
    return rep


def _distance_factor(me: Lindbladian) -> float:
    """Bound on ||rho - rho_ss|| per unit of ||L(rho)||: inverse smallest nonzero singular value."""
    s = np.linalg.svd(liouvillian_matrix(me), compute_uv=False)
    return float(max(1.0, me.D / s[-2]))


def check_pre_symmetry(pre: PRE, U, P, tol: float = 1e-9):
    """Check U|phi_k><phi_k|U^dag = |phi_P(k)><phi_P(k)| and kappa[P j, P k] = kappa[j, k].

    Returns (ok, details) with the worst state/rate mismatches and flagged pairs.
    ``P`` is a 0-based permutation.
    """
    U = np.asarray(U, dtype=complex)
    Pr = pre.projectors
    K = pre.K
    st = [float(np.max(np.abs(U @ Pr[k] @ dag(U) - Pr[P[k]]))) for k in range(K)]
    flagged = []
    worst = 0.0
    for j in range(K):
        for k in range(K):
            if j == k:
                continue
            d = abs(pre.kappa[P[j], P[k]] - pre.kappa[j, k])
            worst = max(worst, d)
            if d > tol and (k, j) < (P[k], P[j]):
                flagged.append({"edge": [k + 1, j + 1], "image": [P[k] + 1, P[j] + 1],
                                "kappa": float(pre.kappa[j, k]),
                                "kappa_image": float(pre.kappa[P[j], P[k]])})
    ok = max(st) <= tol and not flagged
    return ok, {"state_residuals": st, "max_state_residual": max(st), "max_rate_residual": worst,
                "flagged": flagged}


def symmetrize_pre(pre: PRE, U, P) -> PRE:
    """Average rates over orbits and regenerate images of orbit representatives."""
    from .heuristic import wigner_orbit_partition
    U = np.asarray(U, dtype=complex)
    K = pre.K
    states = pre.states.copy()
    for orb in wigner_orbit_partition(K, P):
        phi = states[orb[0]]
        for m in orb[1:]:
            phi = U @ phi
            states[m] = phi
    kap = np.zeros_like(pre.kappa)
    seen = set()
    for j in range(K):
        for k in range(K):
            if j == k or (k, j) in seen:
                continue
            orb = []
            e = (k, j)
            while e not in orb:
                orb.append(e)
                e = (P[e[0]], P[e[1]])
            v = np.mean([pre.kappa[b, a] for a, b in orb])
            for a, b in orb:
                kap[b, a] = v
                seen.add((a, b))
    return PRE(states, kap, me_hash=pre.me_hash)
