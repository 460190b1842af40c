"""Exact jump-process simulation of a PRE realised by a measurement scheme.

Between clicks the conditioned state is an eigenvector of the no-jump
generator, so nothing moves and the record is a continuous-time Markov chain
on the ensemble members. Sampling is exact: exponential waiting times,
detectors chosen in proportion to their rates.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import expm

from .lindblad import Lindbladian, steady_state, trace_distance
from .scheme import MeasurementScheme, effective_operators, require_verified
from .verify import PRE, ctmc_generator, ensemble_average, occupations

Z_FLAG = 4.0


@dataclass
class TrajectoryRecord:
    times: np.ndarray        # click times
    src: np.ndarray          # member before the click (0-based)
    dst: np.ndarray          # member after the click
    detector: np.ndarray     # detector index m (0-based)
    dwell_totals: np.ndarray
    seed: int
    total_time: float

    @property
    def n_jumps(self) -> int:
        return int(self.src.size)

    @property
    def K(self) -> int:
        return int(self.dwell_totals.size)

    def counts(self) -> np.ndarray:
        """counts[j, k]: number of jumps k -> j."""
        c = np.zeros((self.K, self.K), dtype=np.int64)
        np.add.at(c, (self.dst, self.src), 1)
        return c

    def summary(self) -> dict:
        return {"n_jumps": self.n_jumps, "seed": self.seed, "total_time": self.total_time,
                "dwell_totals": self.dwell_totals.tolist(),
                "dwell_fractions": (self.dwell_totals / self.total_time).tolist(),
                "counts": self.counts().tolist()}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time", "from", "to", "detector"])
            for t, a, b, m in zip(self.times, self.src, self.dst, self.detector):
                w.writerow([repr(float(t)), int(a) + 1, int(b) + 1, int(m) + 1])


def simulate_ctmc(f_table, lam_table, n_jumps: int, seed: int, start: int = 0) -> TrajectoryRecord:
    """Sample ``n_jumps`` clicks; detector m of member k fires at rate lam_table[k][m]
    and moves the state to f_table[k][m]."""
    K = len(f_table)
    lam = [np.asarray(v, dtype=float) for v in lam_table]
    total = np.array([v.sum() for v in lam])
    if np.any(total <= 0):
        raise ValueError("every member needs a positive total click rate")
    cum = [np.cumsum(v) / v.sum() for v in lam]
    f = [np.asarray(v, dtype=int) for v in f_table]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7A]))
    waits = rng.standard_exponential(n_jumps)
    picks = rng.random(n_jumps)
    src = np.empty(n_jumps, dtype=np.int64)
    dst = np.empty(n_jumps, dtype=np.int64)
    det = np.empty(n_jumps, dtype=np.int64)
    dwell_each = np.empty(n_jumps)
    k = start
    for i in range(n_jumps):
        m = int(np.searchsorted(cum[k], picks[i], side="right"))
        m = min(m, len(cum[k]) - 1)
        src[i] = k
        det[i] = m
        dwell_each[i] = waits[i] / total[k]
        k = int(f[k][m])
        dst[i] = k
    times = np.cumsum(dwell_each)
    dwell = np.bincount(src, weights=dwell_each, minlength=K)
    return TrajectoryRecord(times, src, dst, det, dwell, seed, float(times[-1]) if n_jumps else 0.0)


def kappa_tables(kappa):
    """One detector per positive-rate destination."""
    kappa = np.asarray(kappa, dtype=float)
    K = kappa.shape[0]
    f = [[j for j in range(K) if j != k and kappa[j, k] > 0] for k in range(K)]
    lam = [[kappa[j, k] for j in f[k]] for k in range(K)]
    return f, lam


def simulate_pre(me: Lindbladian, pre: PRE, scheme: MeasurementScheme, n_jumps: int, seed: int,
                 start: int = 0, tol: float = 1e-8, cross_check: bool = False) -> TrajectoryRecord:
    require_verified(me, pre, scheme, tol)
    if cross_check:
        drift = no_jump_drift(me, pre, scheme)
        if drift > 1e-8:
            raise AssertionError(f"no-jump evolution moves the state by {drift:.3e}")
    return simulate_ctmc(scheme.f, scheme.lam, n_jumps, seed, start)


def no_jump_drift(me: Lindbladian, pre: PRE, scheme: MeasurementScheme, T: float = 1.0,
                  steps: int = 10) -> float:
    """Largest infidelity-like distance 1 - |<phi|psi(t)>| under the no-jump evolution."""
    worst = 0.0
    for k in range(pre.K):
        _, Heff = effective_operators(me, scheme.S[k], scheme.beta[k])
        phi = pre.states[k]
        # rescale by the decay rate so the propagated vector stays O(1)
        mu = np.vdot(phi, Heff @ phi)
        G = expm(-1j * (Heff - mu * np.eye(me.D)) * (T / steps))
        psi = phi.copy()
        for _ in range(steps):
            psi = G @ psi
            psi = psi / np.linalg.norm(psi)
            worst = max(worst, 1.0 - abs(np.vdot(phi, psi)))
    return worst


def merge_records(records) -> TrajectoryRecord:
    offset = 0.0
    times = []
    for r in records:
        times.append(r.times + offset)
        offset += r.total_time
    return TrajectoryRecord(np.concatenate(times), np.concatenate([r.src for r in records]),
                            np.concatenate([r.dst for r in records]),
                            np.concatenate([r.detector for r in records]),
                            np.sum([r.dwell_totals for r in records], axis=0),
                            records[0].seed, offset)


def simulate_replicas(me, pre, scheme, n_jumps: int, seed: int, replicas: int = 1,
                      threads: Optional[int] = None, tol: float = 1e-8) -> TrajectoryRecord:
    require_verified(me, pre, scheme, tol)
    subseeds = [int(np.random.SeedSequence([seed, r]).generate_state(1)[0]) for r in range(replicas)]

    def one(s):
        return simulate_ctmc(scheme.f, scheme.lam, n_jumps, s)

    if threads and threads > 1 and replicas > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            recs = list(ex.map(one, subseeds))
    else:
        recs = [one(s) for s in subseeds]
    out = merge_records(recs)
    out.seed = seed
    return out


# ------------------------------------------------------------------ statistics

def dwell_variance(kappa, p=None) -> np.ndarray:
    """Asymptotic variance (times T) of each member's time-averaged dwell fraction.

    For a stationary CTMC, T * Var(fraction_k) -> 2 p_k Z_kk with Z the
    deviation matrix of the chain.
    """
    kappa = np.asarray(kappa, dtype=float)
    p = occupations(kappa) if p is None else np.asarray(p)
    K = kappa.shape[0]
    G = ctmc_generator(kappa).T              # row convention: G[i, j] = rate i -> j
    Pi = np.outer(np.ones(K), p)
    Z = np.linalg.inv(Pi - G) - Pi
    return 2.0 * p * np.diag(Z)


@dataclass
class StatisticsReport:
    dwell_fractions: np.ndarray
    occupations: np.ndarray
    dwell_z: np.ndarray
    rate_z: dict
    empirical_kappa: np.ndarray
    trace_distance: Optional[float] = None
    flagged: list = field(default_factory=list)

    @property
    def max_abs_z(self) -> float:
        zs = list(np.abs(self.dwell_z)) + [abs(v) for v in self.rate_z.values()]
        return float(max(zs)) if zs else 0.0

    @property
    def consistent(self) -> bool:
        return not self.flagged

    def to_dict(self) -> dict:
        return {"dwell_fractions": self.dwell_fractions.tolist(),
                "occupations": self.occupations.tolist(),
                "dwell_z": self.dwell_z.tolist(),
                "rate_z": {f"{k + 1}->{j + 1}": z for (k, j), z in self.rate_z.items()},
                "empirical_kappa": self.empirical_kappa.tolist(),
                "trace_distance": self.trace_distance, "max_abs_z": self.max_abs_z,
                "flagged": self.flagged, "consistent": self.consistent}


def compare_statistics(record: TrajectoryRecord, pre: PRE, me: Optional[Lindbladian] = None,
                       z_flag: float = Z_FLAG) -> StatisticsReport:
    """z-scores of dwell fractions (CTMC variance) and per-edge rates (Poisson counts)."""
    T = record.total_time
    frac = record.dwell_totals / T
    p = occupations(pre.kappa)
    sd = np.sqrt(dwell_variance(pre.kappa, p) / T)
    dz = (frac - p) / np.where(sd > 0, sd, 1.0)
    counts = record.counts()
    emp = np.zeros_like(pre.kappa)
    rate_z = {}
    flagged = []
    for k in range(pre.K):
        Tk = record.dwell_totals[k]
        for j in range(pre.K):
            if j == k:
                continue
            kap = pre.kappa[j, k]
            emp[j, k] = counts[j, k] / Tk if Tk > 0 else np.nan
            if kap > 0 and Tk > 0:
                z = (emp[j, k] - kap) / np.sqrt(kap / Tk)
            elif counts[j, k] > 0:
                z = np.inf                       # jump along an edge the ensemble forbids
            else:
                continue
            rate_z[(k, j)] = float(z)
            if abs(z) > z_flag:
                flagged.append(f"edge {k + 1}->{j + 1}: z={z:.2f}")
    for k, z in enumerate(dz):
        if abs(z) > z_flag:
            flagged.append(f"dwell {k + 1}: z={z:.2f}")
    td = None
    if me is not None:
        td = trace_distance(ensemble_average(pre.states, frac), steady_state(me).rho)
    return StatisticsReport(frac, p, dz, rate_z, emp, td, flagged)
