"""Parameter/constraint counting, minimal ensemble sizes and rate-packing graphs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import networkx as nx

from .errors import InfeasibleGraphError, ValidationError


def max_transitions(K: int, D: int, L: int) -> int:
    """Largest number of rates a K-member ensemble can carry for a rank-D state."""
    if D < 2 or L < 1:
        raise ValidationError("need D >= 2 and L >= 1", D=D, L=L)
    if K < D:
        raise InfeasibleGraphError("K < D: the ensemble cannot span a rank-D state", K=K, D=D)
    if L >= D - 1:
        return K * (K - 1)
    return min((K - D + L) ** 2 + L * (D - L), K * (K - 1))


def _generic_ok(K: int, D: int, L: int) -> bool:
    rates = max_transitions(K, D, L)
    return rates + 2 * K * (D - 1) >= K * (D * D - 1)


def kmin_generic(D: int, L: int) -> int:
    if D < 2 or L < 1:
        raise ValidationError("need D >= 2 and L >= 1", D=D, L=L)
    return (D - 1) ** 2 + 1 + (2 * D - 2 * L - 1 if L < D - 1 else 0)


def kmin_generic_search(D: int, L: int) -> int:
    """Smallest K >= D for which rates plus state parameters cover the constraints."""
    K = D
    while not _generic_ok(K, D, L):
        K += 1
    return K


def kmin_real(D: int, L: int) -> int:
    """Minimal size for ensembles confined to real state vectors (integer search)."""
    if D < 2 or L < 1:
        raise ValidationError("need D >= 2 and L >= 1", D=D, L=L)
    K = D
    # both sides scaled by 2 to stay in integers
    while 2 * (max_transitions(K, D, L) + K * (D - 1)) < K * (D * D + D - 2):
        K += 1
    return K


@dataclass(frozen=True)
class CountingReport:
    D: int
    L: int
    K: int
    real_subspace: bool
    params_rates: int
    params_states: int
    constraints: int
    constraints_without_normalization: int

    @property
    def params(self) -> int:
        return self.params_rates + self.params_states

    @property
    def square(self) -> bool:
        return self.params == self.constraints

    @property
    def feasible(self) -> bool:
        return self.params >= self.constraints

    def to_dict(self) -> dict:
        return {
            "D": self.D, "L": self.L, "K": self.K, "real_subspace": self.real_subspace,
            "params_rates": self.params_rates, "params_states": self.params_states,
            "params": self.params, "constraints": self.constraints,
            "constraints_without_normalization": self.constraints_without_normalization,
            "square": self.square, "feasible": self.feasible,
        }


def counting_report(D: int, L: int, K: int, real_subspace: bool = False) -> CountingReport:
    if K < D:
        raise InfeasibleGraphError("K < D", K=K, D=D)
    rates = min(max_transitions(K, D, L), K * (K - 1))
    if real_subspace:
        states = K * D
        per = (D * D + D) // 2
    else:
        states = K * (2 * D - 1)
        per = D * D
    return CountingReport(D, L, K, real_subspace, rates, states, K * per, K * (per - 1))


# ------------------------------------------------------------------ graphs

@dataclass(frozen=True)
class RateGraph:
    """Allowed transitions on K members; an edge ``(k, j)`` is a jump from k to j.

    Nodes are 0-based. ``upper_nodes``/``sym_node``/``lower_chain`` record the
    packing layout when the graph came from :func:`build_rate_graph`.
    """

    K: int
    edges: frozenset
    upper_nodes: tuple = ()
    sym_node: int | None = None
    lower_chain: tuple = ()

    def __post_init__(self):
        edges = frozenset((int(k), int(j)) for k, j in self.edges)
        for k, j in edges:
            if k == j:
                raise ValidationError("self-loops are not transitions", node=k)
            if not (0 <= k < self.K and 0 <= j < self.K):
                raise ValidationError("edge out of range", edge=[k, j], K=self.K)
        object.__setattr__(self, "edges", edges)

    @classmethod
    def full(cls, K: int) -> "RateGraph":
        return cls(K, frozenset((k, j) for k in range(K) for j in range(K) if k != j),
                   upper_nodes=tuple(range(K)))

    @property
    def sorted_edges(self) -> list:
        return sorted(self.edges)

    def out_neighbors(self, k: int) -> list:
        return sorted(j for (s, j) in self.edges if s == k)

    def to_networkx(self) -> nx.DiGraph:
        g = nx.DiGraph()
        g.add_nodes_from(range(self.K))
        g.add_edges_from(self.edges)
        return g

    def to_dict(self) -> dict:
        return {"K": self.K, "edges": [list(e) for e in self.sorted_edges],
                "upper_nodes": list(self.upper_nodes), "sym_node": self.sym_node,
                "lower_chain": list(self.lower_chain)}

    @classmethod
    def from_dict(cls, d: dict) -> "RateGraph":
        return cls(int(d["K"]), frozenset(tuple(e) for e in d["edges"]),
                   tuple(d.get("upper_nodes", ())), d.get("sym_node"),
                   tuple(d.get("lower_chain", ())))


def build_rate_graph(K: int, D: int, L: int) -> RateGraph:
    """Maximal rate packing: a densely connected upper group spanning L+1
    dimensions plus a sparse chain lifting the ensemble to dimension D."""
    if K < D:
        raise InfeasibleGraphError("K < D", K=K, D=D)
    if L >= D - 1:
        return RateGraph.full(K)
    n_low = D - L - 1
    if n_low >= K:
        raise InfeasibleGraphError("lower chain does not fit", K=K, D=D, L=L)
    n_up = K - n_low
    upper = list(range(n_up))
    sym = n_up - 1
    lower = list(range(n_up, K))
    edges = set()
    for k in upper[:-1]:
        edges.update((k, j) for j in upper if j != k)
    # sym node: one breakout into the chain, remaining L-1 edges stay in the upper group
    edges.add((sym, lower[0]))
    for j in upper[: L - 1]:
        edges.add((sym, j))
    chain = [sym] + lower
    for i, k in enumerate(lower):
        targets = [lower[i + 1] if i + 1 < len(lower) else upper[0]]
        targets += [chain[p] for p in range(i, -1, -1)]   # predecessors, nearest first
        targets += upper
        out = []
        for j in targets:
            if j != k and j not in out:
                out.append(j)
            if len(out) == L:
                break
        edges.update((k, j) for j in out)
    return RateGraph(K, frozenset(edges), tuple(upper), sym, tuple(lower))


@dataclass
class GraphReport:
    valid: bool
    violations: list = field(default_factory=list)

    def __bool__(self) -> bool:
        return self.valid


def trapped_components(g: RateGraph) -> list:
    """Closed communicating classes of a graph that is not strongly connected."""
    G = g.to_networkx()
    if nx.is_strongly_connected(G):
        return []
    C = nx.condensation(G)
    return [sorted(C.nodes[c]["members"]) for c in C.nodes if C.out_degree(c) == 0]


def dimension_bound(g: RateGraph, L: int) -> int:
    """Upper bound on the dimension spanned by an ensemble on this graph.

    Each node and its jump targets lie in a subspace of dimension at most L+1.
    Groups sharing L+1 members (generic position) share that subspace, so
    they are merged; the ensemble then spans at most ``L+1 + |outside|``.
    """
    cap = L + 1
    groups = []
    for k in range(g.K):
        grp = {k, *g.out_neighbors(k)}
        if len(grp) > cap:
            groups.append(grp)
    merged = True
    while merged:
        merged = False
        for a in range(len(groups)):
            for b in range(a + 1, len(groups)):
                if len(groups[a] & groups[b]) >= cap:
                    groups[a] |= groups.pop(b)
                    merged = True
                    break
            if merged:
                break
    best = g.K
    for grp in groups:
        best = min(best, cap + g.K - len(grp))
    return best


def validate_graph(g: RateGraph, D: int, L: int) -> GraphReport:
    violations = []
    for comp in trapped_components(g):
        if len(comp) < g.K:
            violations.append("trapped in {" + ",".join(str(i + 1) for i in comp) + "}")
    if g.K < D:
        violations.append(f"K={g.K} < D={D}")
    else:
        bound = dimension_bound(g, L)
        if bound < D:
            violations.append(f"dimension bound {bound} < D={D} (post-jump subspaces of size L+1={L + 1})")
    return GraphReport(not violations, violations)


def wigner_orbit_partition(K: int, P: Sequence[int]) -> list:
    """Cycles of a 0-based permutation, each starting from its smallest member."""
    P = [int(i) for i in P]
    if sorted(P) != list(range(K)):
        raise ValidationError("P is not a permutation of the members", P=P)
    seen = set()
    orbits = []
    for k in range(K):
        if k in seen:
            continue
        orb = [k]
        seen.add(k)
        j = P[k]
        while j != k:
            orb.append(j)
            seen.add(j)
            j = P[j]
        orbits.append(orb)
    return orbits


def permutation_from_cycles(cycles: Iterable[Sequence[int]], K: int) -> tuple:
    """1-based cycle notation, e.g. ``[(1, 4), (2, 3)]`` -> 0-based map."""
    P = list(range(K))
    for cyc in cycles:
        c = [int(i) - 1 for i in cyc]
        for a, b in zip(c, c[1:] + c[:1]):
            P[a] = b
    if sorted(P) != list(range(K)):
        raise ValidationError("cycles overlap", cycles=[list(c) for c in cycles])
    return tuple(P)


def table(real: bool, dims=(2, 3, 4, 5), lindblads=(1, 2, 3, 4, 5)) -> list:
    f = kmin_real if real else kmin_generic
    return [[f(D, L) for L in lindblads] for D in dims]


def format_tables() -> str:
    lines = []
    for title, real in (("Generic MEs", False), ("Real invariant subspace", True)):
        lines.append(title)
        lines.append("Dim. | L=1 L=2 L=3 L=4 L=5")
        for D, row in zip((2, 3, 4, 5), table(real)):
            lines.append(f"{D:>4} | " + " ".join(f"{v:>3}" for v in row))
        lines.append("")
    return "\n".join(lines)
