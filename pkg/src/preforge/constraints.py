"""Polynomial residual system for physically realisable ensembles.

For every represented member k the residual is the Hermitian matrix

    R_k = L(|phi_k><phi_k|) - sum_j kappa[j, k] (|phi_j><phi_j| - |phi_k><phi_k|)

reduced to its independent real components, followed by ``||phi_k||^2 - 1``.
Component order per member: strict upper triangle row-major, each entry as
(real, imaginary) -- imaginary omitted in real mode -- then the D-1 diagonal
gaps ``R_aa - R_(a+1)(a+1)``. The trace is identically zero and dropped.

Parameters are packed as states (by represented member) then rates (one per
edge orbit, edges sorted lexicographically as ``(source, destination)``).
A complex state stores ``Re phi_0..Re phi_{D-1}, Im phi_1..Im phi_{D-1}``;
the imaginary part of the first component is gauged to zero. A real state
stores its D components.

Evaluation never conjugates parameters, so the same code evaluates the
complexified polynomial system used by homotopy continuation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DimensionError, SymmetryError, ValidationError
from .heuristic import RateGraph, wigner_orbit_partition
from .lindblad import (
    Lindbladian,
    SymmetryDescriptor,
    check_real_invariant_subspace,
    check_wigner_symmetry,
    liouvillian_matrix,
    steady_state,
)


def component_matrix(D: int, real: bool) -> np.ndarray:
    """Rows map column-stacked vec(R) to the independent real components."""
    def idx(a, b):
        return a + D * b

    rows = []
    for a in range(D):
        for b in range(a + 1, D):
            r = np.zeros(D * D, dtype=complex)
            r[idx(a, b)] += 0.5
            r[idx(b, a)] += 0.5
            rows.append(r)
            if not real:
                r = np.zeros(D * D, dtype=complex)
                r[idx(a, b)] += -0.5j
                r[idx(b, a)] += 0.5j
                rows.append(r)
    for a in range(D - 1):
        r = np.zeros(D * D, dtype=complex)
        r[idx(a, a)] = 1.0
        r[idx(a + 1, a + 1)] = -1.0
        rows.append(r)
    return np.array(rows)


def check_gate(me: Lindbladian):
    """Steady state must be unique and of full rank before any search."""
    ss = steady_state(me)
    if ss.rank < me.D:
        raise ValidationError(f"steady state has rank {ss.rank} < D={me.D}",
                              rank=ss.rank, D=me.D, stage="gate")
    return ss


@dataclass(eq=False)
class ResidualSystem:
    me: Lindbladian
    K: int
    graph: RateGraph
    opts: SymmetryDescriptor = field(default_factory=SymmetryDescriptor)
    rate_mode: str = "raw"

    def __post_init__(self):
        me, K = self.me, self.K
        D = me.D
        if self.rate_mode not in ("raw", "squared"):
            raise ValidationError("rate_mode must be 'raw' or 'squared'", rate_mode=self.rate_mode)
        if self.graph.K != K:
            raise DimensionError("graph size differs from K", K=K, graph_K=self.graph.K)
        self.D = D
        self.real = bool(self.opts.real_invariant_subspace)

        if self.opts.wigner:
            P = list(self.opts.wigner_permutation)
            if len(P) != K:
                raise DimensionError("permutation size differs from K", K=K, P=P)
            U = np.asarray(self.opts.wigner_unitary)
            if self.real and np.max(np.abs(U.imag)) > 1e-12:
                raise SymmetryError("real-subspace mode needs a real Wigner unitary")
            orbits = wigner_orbit_partition(K, P)
        else:
            P = list(range(K))
            U = np.eye(D, dtype=complex)
            orbits = [[k] for k in range(K)]
        self.permutation = tuple(P)
        self.orbits = orbits
        self.reps = [o[0] for o in orbits]
        self.rep_of = np.zeros(K, dtype=int)
        W = np.zeros((K, D, D), dtype=complex)
        for r_i, orb in enumerate(orbits):
            M = np.eye(D, dtype=complex)
            for m in orb:
                self.rep_of[m] = r_i
                W[m] = M
                M = U @ M
        self.W = W
        if self.real:
            self.W = W.real.astype(complex)

        # rate parameters: one per orbit of edges under (k, j) -> (P k, P j)
        edges = self.graph.sorted_edges
        edge_set = set(edges)
        seen = {}
        self.edge_orbits = []
        for e in edges:
            if e in seen:
                continue
            orb = []
            f = e
            while f not in orb:
                if f not in edge_set:
                    raise SymmetryError("graph is not invariant under the permutation", edge=list(f))
                orb.append(f)
                f = (P[f[0]], P[f[1]])
            for f in orb:
                seen[f] = len(self.edge_orbits)
            self.edge_orbits.append(orb)
        self.edges = edges
        self.edge_param = np.array([seen[e] for e in edges], dtype=int)

        self.n_state = D if self.real else 2 * D - 1
        self.n_rate = len(self.edge_orbits)
        self.n_rep = len(self.reps)
        self.n_params = self.n_rep * self.n_state + self.n_rate
        self.E = component_matrix(D, self.real)
        self.n_comp = self.E.shape[0]
        self.Lmat = liouvillian_matrix(me)
        self.G = self.E @ self.Lmat
        self.E3 = self.E.reshape(self.n_comp, D, D)   # [i, c, a] for entry (a, c)
        self.G3 = self.G.reshape(self.n_comp, D, D)
        self.n_residuals = self.n_rep * (self.n_comp + 1)
        # residual count of the unreduced system split by orbit layer: layer p
        # holds the p-th image of every representative, and each layer is an
        # equivalent copy of the reduced system (same count when orbits match)
        depth = max(len(o) for o in self.orbits)
        self.blocks = [sum(len(o) > p for o in self.orbits) * (self.n_comp + 1) for p in range(depth)]
        # constant derivative directions of each state parameter
        self._dirs_u = np.zeros((self.n_state, D), dtype=complex)
        self._dirs_v = np.zeros((self.n_state, D), dtype=complex)
        for p in range(D):
            self._dirs_u[p, p] = 1.0
        for q in range(1, D) if not self.real else ():
            self._dirs_v[D + q - 1, q] = 1.0

    # ------------------------------------------------------------ layout
    @property
    def square(self) -> bool:
        return self.n_params == self.n_residuals

    @property
    def degrees(self) -> list:
        return ([3] * self.n_comp + [2]) * self.n_rep

    def state_slice(self, r_i: int) -> slice:
        return slice(r_i * self.n_state, (r_i + 1) * self.n_state)

    @property
    def rate_slice(self) -> slice:
        return slice(self.n_rep * self.n_state, self.n_params)

    def _uv(self, X):
        B = X.shape[0]
        D = self.D
        S = X[:, : self.n_rep * self.n_state].reshape(B, self.n_rep, self.n_state)
        u = S[:, :, :D]
        if self.real:
            v = np.zeros_like(u)
        else:
            v = np.concatenate([np.zeros_like(u[:, :, :1]), S[:, :, D:]], axis=2)
        return u, v

    def _kappa(self, X):
        s = X[:, self.rate_slice]
        vals = s * s if self.rate_mode == "squared" else s
        B = X.shape[0]
        kap = np.zeros((B, self.K, self.K), dtype=X.dtype)
        for e, (k, j) in enumerate(self.edges):
            kap[:, j, k] = vals[:, self.edge_param[e]]
        return kap

    def _members(self, u, v):
        phi_r = u + 1j * v
        phib_r = u - 1j * v
        phi = np.einsum("mac,bmc->bma", self.W, phi_r[:, self.rep_of])
        phib = np.einsum("mac,bmc->bma", self.W.conj(), phib_r[:, self.rep_of])
        return phi, phib

    # ------------------------------------------------------------ evaluation
    def _check(self, X):
        X = np.asarray(X)
        if X.shape[-1] != self.n_params:
            raise DimensionError(f"parameter vector has length {X.shape[-1]}, expected {self.n_params}",
                                 expected=self.n_params, got=int(X.shape[-1]))
        return X

    def residual_batch(self, X) -> np.ndarray:
        X = self._check(X)
        is_real = not np.iscomplexobj(X)
        u, v = self._uv(X)
        phi, phib = self._members(u, v)
        y = np.einsum("ica,bma,bmc->bmi", self.E3, phi, phib)
        z = np.einsum("ica,bma,bmc->bmi", self.G3, phi, phib)
        kap = self._kappa(X)
        out = kap.sum(axis=1)                              # (B, K) total rate out of k
        reps = self.reps
        R = (z[:, reps] - np.einsum("bjk,bji->bki", kap[:, :, reps], y)
             + out[:, reps, None] * y[:, reps])
        nrm = np.sum(u * u + v * v, axis=2) - 1.0           # (B, n_rep)
        res = np.concatenate([R, nrm[:, :, None]], axis=2).reshape(X.shape[0], -1)
        return res.real if is_real else res

    def residual(self, x) -> np.ndarray:
        return self.residual_batch(np.asarray(x)[None, :])[0]

    def linear_split_batch(self, X):
        """Split the raw-mode residual as ``r0 + A @ rates``.

        Only the state part of X is read. Returns r0 (B, n_residuals) and
        A (B, n_residuals, n_rate); the residual is affine in the rates.
        """
        X = np.asarray(X)
        B = X.shape[0]
        n_s = self.rate_slice.start
        Xs = np.concatenate([X[:, :n_s], np.zeros((B, self.n_rate), dtype=X.dtype)], axis=1)
        u, v = self._uv(Xs)
        phi, phib = self._members(u, v)
        y = np.einsum("ica,bma,bmc->bmi", self.E3, phi, phib)
        z = np.einsum("ica,bma,bmc->bmi", self.G3, phi, phib)
        nrm = np.sum(u * u + v * v, axis=2) - 1.0
        r0 = np.concatenate([z[:, self.reps], nrm[:, :, None]], axis=2).reshape(B, -1)
        A = np.zeros((B, self.n_rep, self.n_comp + 1, self.n_rate), dtype=complex)
        rep_pos = {k: i for i, k in enumerate(self.reps)}
        for e, (k, j) in enumerate(self.edges):
            if k in rep_pos:
                A[:, rep_pos[k], :-1, self.edge_param[e]] -= y[:, j] - y[:, k]
        A = A.reshape(B, self.n_residuals, self.n_rate)
        if not np.iscomplexobj(X):
            return r0.real, A.real
        return r0, A

    def jacobian_batch(self, X) -> np.ndarray:
        X = self._check(X)
        is_real = not np.iscomplexobj(X)
        B = X.shape[0]
        u, v = self._uv(X)
        phi, phib = self._members(u, v)
        y = np.einsum("ica,bma,bmc->bmi", self.E3, phi, phib)
        kap = self._kappa(X)
        out = kap.sum(axis=1)
        nc1 = self.n_comp + 1
        J = np.zeros((B, self.n_rep, nc1, self.n_params), dtype=complex)
        rep_pos = {k: i for i, k in enumerate(self.reps)}
        du = self._dirs_u
        dv = self._dirs_v
        for m in range(self.K):
            r_i = self.rep_of[m]
            Wm = self.W[m]
            # d phi_m / d theta_p  and  d phibar_m / d theta_p  (constant)
            c = (du + 1j * dv) @ Wm.T                      # (n_state, D)
            cb = (du - 1j * dv) @ Wm.conj().T
            dy = (np.einsum("ica,pa,bc->bpi", self.E3, c, phib[:, m])
                  + np.einsum("ica,ba,pc->bpi", self.E3, phi[:, m], cb))
            sl = self.state_slice(r_i)
            if m in rep_pos:
                dz = (np.einsum("ica,pa,bc->bpi", self.G3, c, phib[:, m])
                      + np.einsum("ica,ba,pc->bpi", self.G3, phi[:, m], cb))
                k_i = rep_pos[m]
                J[:, k_i, :-1, sl] += np.swapaxes(dz + out[:, m, None, None] * dy, 1, 2)
            for k_i, k in enumerate(self.reps):
                if k == m:
                    continue
                J[:, k_i, :-1, sl] -= np.swapaxes(kap[:, m, k, None, None] * dy, 1, 2)
        # normalisation rows
        for r_i in range(self.n_rep):
            sl = self.state_slice(r_i)
            D = self.D
            J[:, r_i, -1, sl.start: sl.start + D] = 2 * u[:, r_i]
            if not self.real:
                J[:, r_i, -1, sl.start + D: sl.stop] = 2 * v[:, r_i, 1:]
        # rate columns
        s = X[:, self.rate_slice]
        gprime = 2 * s if self.rate_mode == "squared" else np.ones_like(s)
        off = self.rate_slice.start
        for e, (k, j) in enumerate(self.edges):
            if k not in rep_pos:
                continue
            q = self.edge_param[e]
            J[:, rep_pos[k], :-1, off + q] -= (y[:, j] - y[:, k]) * gprime[:, q, None]
        J = J.reshape(B, self.n_residuals, self.n_params)
        return J.real if is_real else J

    def jacobian(self, x) -> np.ndarray:
        return self.jacobian_batch(np.asarray(x)[None, :])[0]

    def residual_norm(self, x) -> float:
        return float(np.max(np.abs(self.residual(x))))

    # ------------------------------------------------------------ packing
    def unpack(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Member states (K, D) and rate matrix ``kappa[dest, source]``."""
        X = self._check(np.asarray(x))[None, :]
        u, v = self._uv(X)
        phi, _ = self._members(u, v)
        return phi[0], self._kappa(X)[0]

    def pack(self, states, kappa) -> np.ndarray:
        states = np.asarray(states, dtype=complex)
        kappa = np.asarray(kappa, dtype=float)
        D = self.D
        x = np.zeros(self.n_params)
        for r_i, k in enumerate(self.reps):
            phi = states[k]
            sl = self.state_slice(r_i)
            if self.real:
                if np.max(np.abs(phi.imag)) > 1e-9 and np.max(np.abs(phi.real)) > 0:
                    # strip a global phase before insisting on reality
                    j = int(np.argmax(np.abs(phi)))
                    phi = phi * np.exp(-1j * np.angle(phi[j]))
                if np.max(np.abs(phi.imag)) > 1e-9:
                    raise ValidationError("state is not real up to a phase", member=k)
                x[sl] = phi.real
            else:
                if phi[0].imag != 0:
                    phi = phi * np.exp(-1j * np.angle(phi[0]))
                x[sl.start: sl.start + D] = phi.real
                x[sl.start + D: sl.stop] = phi.imag[1:]
        off = self.rate_slice.start
        for q, orb in enumerate(self.edge_orbits):
            k, j = orb[0]
            val = kappa[j, k]
            x[off + q] = np.sqrt(max(val, 0.0)) if self.rate_mode == "squared" else val
        return x

    def rates(self, x) -> np.ndarray:
        return self._kappa(np.asarray(x)[None, :])[0][[j for (k, j) in self.edges],
                                                      [k for (k, j) in self.edges]]

    def canonical(self, x) -> np.ndarray:
        """Gauge- and permutation-free fingerprint used to de-duplicate solutions."""
        states, kap = self.unpack(x)
        fixed = []
        for phi in states:
            n = np.linalg.norm(phi)
            phi = phi / n if n > 0 else phi
            big = np.nonzero(np.abs(phi) > 1e-6)[0]
            if big.size:
                phi = phi * np.exp(-1j * np.angle(phi[big[0]]))
            fixed.append(phi)
        fixed = np.array(fixed)
        keys = [tuple(np.round(np.concatenate([f.real, f.imag]), 6)) for f in fixed]
        order = sorted(range(self.K), key=lambda i: keys[i])
        kp = kap[np.ix_(order, order)]
        return np.concatenate([fixed[order].real.ravel(), fixed[order].imag.ravel(), kp.ravel()])

    def with_rate_mode(self, mode: str) -> "ResidualSystem":
        return ResidualSystem(self.me, self.K, self.graph, self.opts, mode)

    def convert(self, x, target: "ResidualSystem") -> np.ndarray:
        return target.pack(*self.unpack(x))

    def describe(self) -> dict:
        layout = []
        for r_i, k in enumerate(self.reps):
            sl = self.state_slice(r_i)
            names = [f"re phi{k + 1}[{a}]" for a in range(self.D)]
            if not self.real:
                names += [f"im phi{k + 1}[{a}]" for a in range(1, self.D)]
            layout += [{"index": sl.start + i, "name": n} for i, n in enumerate(names)]
        off = self.rate_slice.start
        for q, orb in enumerate(self.edge_orbits):
            k, j = orb[0]
            layout.append({"index": off + q, "name": f"kappa[{j + 1}][{k + 1}]",
                           "edges": [[a + 1, b + 1] for a, b in orb]})
        return {
            "D": self.D, "K": self.K, "L": self.me.L, "me_hash": self.me.content_hash(),
            "n_params": self.n_params, "n_residuals": self.n_residuals,
            "rate_mode": self.rate_mode,
            "real_invariant_subspace": self.real,
            "wigner_permutation": [p + 1 for p in self.permutation] if self.opts.wigner else None,
            "representatives": [k + 1 for k in self.reps],
            "graph_edges": [[k + 1, j + 1] for k, j in self.edges],
            "degrees": self.degrees,
            "layout": layout,
        }


def build_system(me: Lindbladian, K: int, graph: Optional[RateGraph] = None,
                 opts: Optional[SymmetryDescriptor] = None, rate_mode: str = "raw",
                 gate: bool = True) -> ResidualSystem:
    """Validate prerequisites and assemble the residual system."""
    opts = opts or SymmetryDescriptor()
    if K < me.D:
        raise DimensionError("K < D: the ensemble cannot span a full-rank state", K=K, D=me.D)
    if graph is None:
        graph = RateGraph.full(K)
    if gate:
        check_gate(me)
    if opts.real_invariant_subspace and not check_real_invariant_subspace(me):
        raise SymmetryError("ME does not preserve real density matrices")
    if opts.wigner:
        ok, r = check_wigner_symmetry(me, opts.wigner_unitary)
        if not ok:
            raise SymmetryError("ME is not invariant under the Wigner unitary", residual=r)
    return ResidualSystem(me, K, graph, opts, rate_mode)
