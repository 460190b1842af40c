"""Solvers for the PRE residual system.

* ``multistart_search``: seeded restarts of a batched Levenberg-Marquardt
  iteration with nonnegative rates, polished by Gauss-Newton.
* ``newton_refine``: Gauss-Newton with backtracking to machine accuracy.
* ``homotopy_solve``: total-degree linear homotopy, all paths tracked in one batch.
* ``cheater_continue``: follow a known solution while the ME is deformed.
* ``infeasibility_evidence``: best residual over many restarts (not a proof).
"""

from __future__ import annotations

import itertools
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import nnls

from .constraints import ResidualSystem
from .errors import ContinuationError, DivergenceError, ValidationError

log = logging.getLogger(__name__)

ACCEPT_TOL = 1e-9
RATE_FLOOR = -1e-10
DEDUP_TOL = 1e-6
CHUNK = 256


@dataclass
class Candidate:
    x: np.ndarray
    residual_norm: float
    rates_min: float
    seed_index: int = -1
    iterations: int = 0
    quadratic: bool = False

    def to_dict(self) -> dict:
        return {"x": [float(v) for v in self.x], "residual_norm": self.residual_norm,
                "rates_min": self.rates_min, "seed_index": self.seed_index,
                "iterations": self.iterations, "quadratic": self.quadratic}


@dataclass
class HomotopyConfig:
    gamma: complex = None
    seed: int = 0
    step_init: float = 0.05
    step_min: float = 1e-7
    corrector_tol: float = 1e-10
    max_steps: int = 5000
    endgame_t: float = 0.999
    divergence: float = 1e7

    def __post_init__(self):
        if self.gamma is None:
            th = np.random.default_rng(np.random.SeedSequence([self.seed, 0x9A])).uniform(0, 2 * np.pi)
            self.gamma = complex(np.exp(1j * th))
        if not (0 < self.step_min <= self.step_init < 1):
            raise ValidationError("need 0 < step_min <= step_init < 1",
                                  step_min=self.step_min, step_init=self.step_init)
        if self.corrector_tol > 1e-8:
            raise ValidationError("corrector_tol must be <= 1e-8", corrector_tol=self.corrector_tol)


def _inf(r) -> np.ndarray:
    return np.max(np.abs(r), axis=-1)


def _raw_system(sys: ResidualSystem) -> ResidualSystem:
    return sys if sys.rate_mode == "raw" else sys.with_rate_mode("raw")


def _lstsq_batch(J, r):
    """Minimum-norm least-squares steps for a stack of systems."""
    U, s, Vh = np.linalg.svd(J, full_matrices=False)
    cut = s[:, :1] * 1e-12 * max(J.shape[1:])
    inv = np.where(s > cut, 1.0 / np.where(s > cut, s, 1.0), 0.0)
    c = np.einsum("bij,bi->bj", U.conj(), r) * inv
    return np.einsum("bji,bj->bi", Vh.conj(), c)


# ------------------------------------------------------------------ restarts

def _initial_states(sys: ResidualSystem, rng: np.random.Generator) -> np.ndarray:
    """Uniform unit-sphere states, gauge-packed."""
    D = sys.D
    parts = []
    for _ in range(sys.n_rep):
        if sys.real:
            phi = rng.standard_normal(D)
            parts.append(phi / np.linalg.norm(phi))
        else:
            phi = rng.standard_normal(D) + 1j * rng.standard_normal(D)
            phi = phi / np.linalg.norm(phi)
            phi = phi * np.exp(-1j * np.angle(phi[0]))
            parts.append(np.concatenate([phi.real, phi.imag[1:]]))
    return np.concatenate(parts)


def _nnls_rates(raw: ResidualSystem, X) -> np.ndarray:
    """Best nonnegative rates for the states in each row (the residual is affine in them)."""
    r0, A = raw.linear_split_batch(X)
    for i in range(X.shape[0]):
        X[i, raw.rate_slice] = nnls(A[i], -r0[i])[0]
    return X


def bounded_lm(raw: ResidualSystem, Xs, max_iter: int = 300, tol: float = 1e-12, window: int = 15):
    """Batched Levenberg-Marquardt over all parameters with the rates kept >= 0.

    Rates start at their nonnegative least-squares values. Steps are clipped
    at zero, and a rate sitting at zero whose gradient pushes it negative is
    frozen for that step. Rows whose cost falls by less than 1% over
    ``window`` iterations are retired. Returns (X, residual inf-norms, iterations).
    """
    rs = raw.rate_slice
    X = _nnls_rates(raw, np.array(Xs, dtype=float))
    B, n = X.shape
    r = raw.residual_batch(X)
    cost = np.sum(r * r, axis=1)
    lam = np.full(B, 1e-3)
    iters = np.zeros(B, dtype=int)
    hist = [cost.copy()]
    active = _inf(r) > tol
    eye = np.eye(n)
    for _ in range(max_iter):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        iters[idx] += 1
        J = raw.jacobian_batch(X[idx])
        g = np.einsum("bki,bk->bi", J, r[idx])
        free = np.ones((idx.size, n), dtype=bool)
        free[:, rs] = ~((X[idx, rs] <= 0.0) & (g[:, rs] > 0.0))
        J = J * free[:, None, :]
        g = g * free
        H = np.swapaxes(J, 1, 2) @ J
        d = np.einsum("bii->bi", H)
        Hd = H + lam[idx, None, None] * eye * (d[:, :, None] + 1e-12) + eye * ~free[:, :, None]
        try:
            step = np.linalg.solve(Hd, -g[..., None])[..., 0]
        except np.linalg.LinAlgError:
            step = _lstsq_batch(Hd, -g)
        Xn = X[idx] + step
        Xn[:, rs] = np.maximum(Xn[:, rs], 0.0)
        rn = raw.residual_batch(Xn)
        cn = np.sum(rn * rn, axis=1)
        ok = np.isfinite(cn) & (cn < cost[idx])
        acc = idx[ok]
        X[acc], r[acc], cost[acc] = Xn[ok], rn[ok], cn[ok]
        lam[acc] = np.maximum(lam[acc] / 3.0, 1e-12)
        lam[idx[~ok]] *= 4.0
        hist.append(cost.copy())
        active = (_inf(r) > tol) & (lam < 1e10)
        if len(hist) > window:
            active &= cost < 0.99 * hist[-window - 1]
    return X, _inf(r), iters


def _finish(raw: ResidualSystem, x, seed_index, iterations, accept_tol) -> Optional[Candidate]:
    try:
        c = newton_refine(raw, x, tol=1e-12, fail_tol=accept_tol)
    except DivergenceError:
        return None
    x = c.x.copy()
    rs = x[raw.rate_slice]
    if rs.size and rs.min() < RATE_FLOOR:
        return None
    x[raw.rate_slice] = np.maximum(rs, 0.0)
    res = raw.residual_norm(x)
    if res > accept_tol:
        return None
    return Candidate(x, res, float(x[raw.rate_slice].min()) if raw.n_rate else 0.0,
                     seed_index, iterations + c.iterations, c.quadratic)


def _run_chunk(raw: ResidualSystem, seed: int, indices, max_iter: int):
    X0 = np.array([np.concatenate([_initial_states(raw, np.random.default_rng(np.random.SeedSequence([seed, int(i)]))),
                                   np.zeros(raw.n_rate)]) for i in indices])
    return bounded_lm(raw, X0, max_iter=max_iter)


def _chunks(budget: int, chunk: int = CHUNK):
    return [np.arange(s, min(s + chunk, budget)) for s in range(0, budget, chunk)]


def _map_chunks(fn, chunks, threads):
    if threads and threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, chunks))
    return [fn(c) for c in chunks]


def dedupe(sys: ResidualSystem, cands: list, tol: float = DEDUP_TOL) -> list:
    """Drop candidates equal up to state sign/phase and member order (first seen wins)."""
    cands = sorted(cands, key=lambda c: (c.seed_index, c.residual_norm))
    kept, keys = [], []
    for c in cands:
        k = sys.canonical(c.x)
        if any(np.max(np.abs(k - q)) <= tol for q in keys):
            continue
        kept.append(c)
        keys.append(k)
    return kept


def search_pass(sys: ResidualSystem, budget: int, seed: int = 0, accept_tol: float = ACCEPT_TOL,
                threads: Optional[int] = None, max_iter: int = 200,
                progress: Optional[Callable[[str], None]] = None):
    """One sweep of seeded restarts.

    Returns (accepted candidates, evidence dict). Restart i draws its states
    from ``SeedSequence([seed, i])``, so results do not depend on chunking
    or thread count.
    """
    if budget < 1:
        raise ValidationError("budget must be >= 1", budget=budget)
    t0 = time.time()
    raw = _raw_system(sys)

    def work(idx):
        X, res, iters = _run_chunk(raw, seed, idx, max_iter)
        b = int(np.argmin(res))
        best = (float(res[b]), int(idx[b]), X[b])
        out = []
        for j in np.nonzero(res <= 1e-4)[0]:
            f = _finish(raw, X[j], int(idx[j]), int(iters[j]), accept_tol)
            if f is not None:
                out.append(f)
                best = min(best, (f.residual_norm, f.seed_index, f.x), key=lambda t: (t[0], t[1]))
        if progress:
            progress(f"restarts {idx[0]}-{idx[-1]}: {len(out)} accepted, best residual {best[0]:.3e}")
        return out, best

    parts = _map_chunks(work, _chunks(budget), threads)
    found = dedupe(raw, [c for p, _ in parts for c in p])
    if sys.rate_mode == "squared":
        for c in found:
            c.x = raw.convert(c.x, sys)
    best = min((p[1] for p in parts), key=lambda t: (t[0], t[1]))
    evidence = {
        "label": "evidence, not certificate",
        "min_residual": best[0],
        "best_restart": best[1],
        "best_x": [float(v) for v in best[2]],
        "restarts": int(budget),
        "seed": int(seed),
        "wall_time": time.time() - t0,
    }
    return found, evidence


def multistart_search(sys: ResidualSystem, budget: int, seed: int = 0,
                      accept_tol: float = ACCEPT_TOL, threads: Optional[int] = None,
                      max_iter: int = 200, progress: Optional[Callable[[str], None]] = None) -> list:
    """Seeded restarts; de-duplicated candidates in the layout of ``sys``."""
    return search_pass(sys, budget, seed, accept_tol, threads, max_iter, progress)[0]


def infeasibility_evidence(sys: ResidualSystem, restarts: int, seed: int = 0,
                           threads: Optional[int] = None, max_iter: int = 200,
                           progress: Optional[Callable[[str], None]] = None) -> dict:
    """Smallest residual reached over many restarts.

    Every restart keeps its rates nonnegative, so the value refers to genuine
    ensembles (letting rates go negative admits runs that drift off to huge
    rates of mixed sign with small residual and no PRE nearby). A large
    minimum is numerical evidence that no PRE exists; it is not a proof.
    """
    return search_pass(sys, restarts, seed, 0.0, threads, max_iter, progress)[1]


# ------------------------------------------------------------------ refinement

def newton_refine(sys: ResidualSystem, x0, tol: float = 1e-12, max_iter: int = 60,
                  fail_tol: float = ACCEPT_TOL, start_tol: float = 1e-1) -> Candidate:
    """Gauss-Newton with backtracking line search.

    Iterates until the residual inf-norm reaches ``tol`` or stops decreasing;
    the result is accepted when it is at most ``fail_tol``.
    """
    x = np.array(x0, dtype=float)
    r = sys.residual(x)
    res = float(np.max(np.abs(r)))
    if not np.isfinite(res) or res > start_tol:
        raise DivergenceError(f"starting residual {res:.3e} exceeds {start_tol}", last_iterate=x,
                              residual=res)
    history = [res]
    it = 0
    while res > tol and it < max_iter:
        it += 1
        J = sys.jacobian(x)
        step = np.linalg.lstsq(J, -r, rcond=None)[0]
        c0 = float(r @ r)
        a = 1.0
        while a > 1e-6:
            xn = x + a * step
            rn = sys.residual(xn)
            if np.all(np.isfinite(rn)) and float(rn @ rn) < c0:
                break
            a *= 0.5
        else:
            break
        x, r = xn, rn
        res = float(np.max(np.abs(r)))
        history.append(res)
    if res > fail_tol:
        raise DivergenceError(f"refinement stalled at residual {res:.3e}", last_iterate=x,
                              residual=res, iterations=it)
    quad = _quadratic(history)
    rs = x[sys.rate_slice]
    if sys.rate_mode == "squared":
        rs = rs ** 2
    return Candidate(x, res, float(rs.min()) if rs.size else 0.0, -1, it, quad)


def _quadratic(history) -> bool:
    """True when some late step roughly squared the (relative) error."""
    h = [v for v in history if v > 0]
    for a, b in zip(h, h[1:]):
        if a < 1e-2 and b < 1e-14 + 10 * a * a:
            return True
    return False


# ------------------------------------------------------------------ homotopy

@dataclass
class PolynomialSystem:
    """Minimal interface accepted by :func:`homotopy_solve`.

    ``residual_batch``/``jacobian_batch`` map (B, n) complex arrays to (B, n)
    and (B, n, n). ResidualSystem satisfies the same protocol.
    """
    n_params: int
    degrees: list
    residual_batch: Callable
    jacobian_batch: Callable

    @property
    def n_residuals(self) -> int:
        return len(self.degrees)


@dataclass
class HomotopyResult:
    solutions: list
    real_solutions: list
    n_paths: int
    n_converged: int
    n_diverged: int
    n_failed: int
    endpoints: np.ndarray = field(repr=False, default=None)

    def stats(self) -> dict:
        return {"paths": self.n_paths, "converged": self.n_converged, "diverged": self.n_diverged,
                "failed": self.n_failed, "finite_distinct": len(self.solutions),
                "real_nonnegative": len(self.real_solutions)}


def _start_points(degrees):
    roots = [np.exp(2j * np.pi * np.arange(d) / d) for d in degrees]
    return np.array(list(itertools.product(*roots)), dtype=complex)


def homotopy_solve(sys, config: Optional[HomotopyConfig] = None) -> HomotopyResult:
    """Track every path of H = gamma(1-t) Q + t P from the total-degree start system."""
    config = config or HomotopyConfig()
    n = sys.n_params
    deg = np.asarray(sys.degrees)
    if sys.n_residuals != n:
        raise ValidationError("homotopy needs a square system", n_params=n, n_residuals=sys.n_residuals)
    if getattr(sys, "rate_mode", "raw") != "raw":
        raise ValidationError("homotopy needs raw rate mode")
    n_paths = int(np.prod(deg))
    if n_paths > 100_000:
        raise ValidationError("total degree too large for desk-scale tracking", paths=n_paths)
    g = config.gamma
    X = _start_points(deg)
    B = X.shape[0]

    def Hx(X, t):
        Q = X ** deg - 1.0
        JQ = deg * X ** (deg - 1)
        P = sys.residual_batch(X)
        JP = sys.jacobian_batch(X)
        T = t[:, None]
        H = g * (1 - T) * Q + T * P
        J = T[..., None] * JP
        J[:, np.arange(n), np.arange(n)] += g * (1 - T) * JQ
        return H, J, P - g * Q

    t = np.zeros(B)
    dt = np.full(B, config.step_init)
    status = np.zeros(B, dtype=int)     # 0 active, 1 reached endgame, 2 diverged, 3 failed
    streak = np.zeros(B, dtype=int)
    tend = config.endgame_t
    for _ in range(config.max_steps):
        idx = np.nonzero(status == 0)[0]
        if idx.size == 0:
            break
        x, tt, h = X[idx], t[idx], np.minimum(dt[idx], tend - t[idx])
        _, J, Ht = Hx(x, tt)
        try:
            v = np.linalg.solve(J, -Ht[..., None])[..., 0]
        except np.linalg.LinAlgError:
            v = _lstsq_batch(J, -Ht)
        xp = x + h[:, None] * v
        t1 = tt + h
        ok = np.ones(idx.size, dtype=bool)
        for _k in range(3):
            H, J, _ = Hx(xp, t1)
            try:
                d = np.linalg.solve(J, -H[..., None])[..., 0]
            except np.linalg.LinAlgError:
                d = _lstsq_batch(J, -H)
            xp = xp + d
            dn = np.max(np.abs(d), axis=1)
        scale = 1 + np.max(np.abs(xp), axis=1)
        ok = np.isfinite(dn) & (dn <= 1e-8 * scale)
        # accepted steps
        a = idx[ok]
        X[a], t[a] = xp[ok], t1[ok]
        streak[a] += 1
        grow = a[streak[a] >= 3]
        dt[grow] = np.minimum(dt[grow] * 2, config.step_init)
        streak[grow] = 0
        r = idx[~ok]
        dt[r] /= 2
        streak[r] = 0
        status[r[dt[r] < config.step_min]] = 3
        status[a[t[a] >= tend - 1e-15]] = 1
        status[a[np.max(np.abs(X[a]), axis=1) > config.divergence]] = 2
    status[status == 0] = 3

    # endgame: Newton directly on the target system
    idx = np.nonzero(status == 1)[0]
    x = X[idx]
    for _ in range(30):
        P = sys.residual_batch(x)
        J = sys.jacobian_batch(x)
        try:
            d = np.linalg.solve(J, -P[..., None])[..., 0]
        except np.linalg.LinAlgError:
            d = _lstsq_batch(J, -P)
        d = np.where(np.isfinite(d), d, 0)
        x = x + d
        if np.all(np.max(np.abs(d), axis=1) < 1e-14 * (1 + np.max(np.abs(x), axis=1))):
            break
    X[idx] = x
    res = np.full(B, np.inf)
    if idx.size:
        res[idx] = _inf(sys.residual_batch(x))
    conv = (status == 1) & (res <= config.corrector_tol) & (np.max(np.abs(X), axis=1) < config.divergence)
    status[(status == 1) & ~conv] = 2

    sols = []
    for b in np.nonzero(conv)[0]:
        if not any(np.max(np.abs(X[b] - s)) <= 1e-6 * (1 + np.max(np.abs(s))) for s in sols):
            sols.append(X[b])
    real = []
    for s in sols:
        if np.linalg.norm(s.imag) > 1e-8:
            continue
        xr = s.real.copy()
        if isinstance(sys, ResidualSystem):
            rs = xr[sys.rate_slice]
            if rs.size and rs.min() < RATE_FLOOR:
                continue
            xr[sys.rate_slice] = np.maximum(rs, 0.0)
            rr = sys.residual_norm(xr)
            real.append(Candidate(xr, rr, float(xr[sys.rate_slice].min()) if rs.size else 0.0))
        else:
            real.append(Candidate(xr, float(_inf(sys.residual_batch(xr[None].astype(complex)))[0]), 0.0))
    return HomotopyResult(sols, real, n_paths, int(conv.sum()), int((status == 2).sum()),
                          int((status == 3).sum()), X)


# ------------------------------------------------------------------ cheater's homotopy

def cheater_continue(template: ResidualSystem, me_family: Callable[[float], object], x_known,
                     n_steps: int = 10, tol: float = ACCEPT_TOL) -> Candidate:
    """Track ``x_known`` (a solution at t=0) to t=1 through the family of MEs.

    Each step rebuilds the system with ``template``'s ensemble size, graph,
    symmetry options and rate mode, then Gauss-Newton refines the previous point.
    Loss of convergence raises ContinuationError carrying the failed step.
    """
    x = np.array(x_known, dtype=float)
    sys0 = ResidualSystem(me_family(0.0), template.K, template.graph, template.opts, template.rate_mode)
    r0 = sys0.residual_norm(x)
    if r0 > tol:
        raise ValidationError(f"x_known does not solve the t=0 system (residual {r0:.3e})", residual=r0)
    cand = None
    for s in range(1, n_steps + 1):
        sys_t = ResidualSystem(me_family(s / n_steps), template.K, template.graph,
                               template.opts, template.rate_mode)
        try:
            cand = newton_refine(sys_t, x, tol=1e-12, fail_tol=tol, start_tol=np.inf)
        except DivergenceError as e:
            raise ContinuationError(f"lost the solution at step {s}/{n_steps}", step=s,
                                    last_iterate=e.last_iterate,
                                    residual=e.details.get("residual")) from None
        x = cand.x
    if cand is None:
        cand = Candidate(x, r0, float(x[template.rate_slice].min()) if template.n_rate else 0.0)
    return cand
