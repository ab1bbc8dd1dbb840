"""Candidate bipartite graph and minimum-cost VNF-to-VM matching.

For the service being admitted, every needed VNF gets an edge to every
unused VM and to every VM already running that VNF, provided the VM's
maximum capability can absorb the combined request load.  Edge costs
charge the activation cost (only if the VM is idle) plus the proportional
cost of the extra capability the new load requires.  The matching is
solved exactly with the Hungarian algorithm (potentials form, cubic).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import DeploymentState, Scenario

# tie-break nudge added to the proportional edge-cost term; must stay far
# below any meaningful cost difference
EDGE_COST_EPSILON = 1e-9


class NoCandidateError(RuntimeError):
    """Some VNF of the incoming service has no viable VM at all."""

    def __init__(self, service: str, vnf: str):
        super().__init__(f"service {service}: no candidate VM for VNF {vnf}")
        self.service = service
        self.vnf = vnf


class MatchingInfeasibleError(RuntimeError):
    """No perfect matching covers every VNF of the incoming service."""


@dataclass
class CandidateGraph:
    service: str
    vnf_nodes: tuple[str, ...]
    vm_nodes: tuple[str, ...]
    edges: dict[tuple[str, str], float]  # (vnf, vm) -> cost
    pruned: set[tuple[str, str]] = field(default_factory=set)

    def edge_count(self) -> int:
        return len(self.edges)

    def prune(self, vnf: str, vm: str) -> None:
        key = (vnf, vm)
        if key not in self.edges:
            raise KeyError(f"edge {key} not in graph")
        del self.edges[key]
        self.pruned.add(key)

    def candidates(self, vnf: str) -> tuple[str, ...]:
        return tuple(m for (v, m) in sorted(self.edges) if v == vnf)


@dataclass(frozen=True)
class Assignment:
    pairs: dict[str, str]  # vnf -> vm
    total_cost: float


def stable_after_join(
    v: str, m: str, sbar: str, state: DeploymentState, scenario: Scenario
) -> bool:
    """True when VM ``m`` can host VNF ``v`` for every current user plus the
    incoming service without its maximum capability being saturated."""
    l = scenario.vnf(v).load_coefficient
    load = l * scenario.rate(sbar, v)
    for s, v2, m2 in state.usage:
        if v2 == v and m2 == m:
            load += l * scenario.rate(s, v)
    return load < scenario.vm(m).max_capability


def edge_cost(v: str, m: str, sbar: str, state: DeploymentState, scenario: Scenario) -> float:
    vm = scenario.vm(m)
    activation = 0.0 if m in state.placement else vm.fixed_cost
    extra = scenario.vnf(v).load_coefficient * scenario.rate(sbar, v) + EDGE_COST_EPSILON
    return activation + vm.proportional_cost * extra


def build_graph(sbar: str, state: DeploymentState, scenario: Scenario) -> CandidateGraph:
    """Candidate graph for admitting ``sbar`` against the current state."""
    if sbar in state.admitted_services():
        raise ValueError(f"service {sbar} is already admitted")
    vnf_nodes = scenario.service(sbar).used_vnfs()
    vm_nodes = tuple(sorted(scenario.vms))
    edges: dict[tuple[str, str], float] = {}
    for v in vnf_nodes:
        found = False
        for m in vm_nodes:
            hosted = state.placement.get(m)
            if hosted is not None and hosted != v:
                continue  # one VNF per VM
            if not stable_after_join(v, m, sbar, state, scenario):
                continue
            edges[(v, m)] = edge_cost(v, m, sbar, state, scenario)
            found = True
        if not found:
            raise NoCandidateError(sbar, v)
    return CandidateGraph(service=sbar, vnf_nodes=vnf_nodes, vm_nodes=vm_nodes, edges=edges)


def min_cost_assignment(cost: np.ndarray) -> tuple[np.ndarray, float]:
    """Exact minimum-cost assignment of rows to distinct columns.

    ``cost`` is an (n, m) matrix with n <= m; unusable pairs are np.inf.
    Returns (column index per row, total cost).  Raises
    :class:`MatchingInfeasibleError` when no all-finite assignment exists.
    Deterministic: ties are resolved by the fixed row/column scan order.
    """
    cost = np.asarray(cost, dtype=float)
    n, m = cost.shape
    if n > m:
        raise ValueError("more rows than columns")
    finite = cost[np.isfinite(cost)]
    big = (float(finite.max()) if finite.size else 1.0) * (m + 1) + 1.0
    # pad with zero-cost dummy rows so the matrix is square; dummies absorb
    # the spare columns and never reach the caller
    a = np.full((m, m), 0.0)
    a[:n, :] = np.where(np.isfinite(cost), cost, big)

    u = np.zeros(m + 1)
    v = np.zeros(m + 1)
    matched_row = np.full(m + 1, -1, dtype=np.int64)  # column -> row, virtual col = m
    way = np.zeros(m, dtype=np.int64)
    for i in range(m):
        matched_row[m] = i
        j0 = m
        minv = np.full(m, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = matched_row[j0]
            free = ~used[:m]
            cur = a[i0, free] - u[i0] - v[:m][free]
            idxs = np.nonzero(free)[0]
            improve = cur < minv[idxs]
            minv[idxs[improve]] = cur[improve]
            way[idxs[improve]] = j0
            j1 = idxs[int(np.argmin(minv[idxs]))]
            delta = minv[j1]
            u[matched_row[used]] += delta
            v[used] -= delta
            minv[~used[:m]] -= delta
            j0 = j1
            if matched_row[j0] == -1:
                break
        while j0 != m:
            j1 = way[j0]
            matched_row[j0] = matched_row[j1]
            j0 = j1

    cols = np.full(n, -1, dtype=np.int64)
    for j in range(m):
        r = matched_row[j]
        if 0 <= r < n:
            cols[r] = j
    total = float(cost[np.arange(n), cols].sum()) if n else 0.0
    if not np.isfinite(total):
        raise MatchingInfeasibleError("no feasible assignment covers every row")
    return cols, total


def hungarian(graph: CandidateGraph) -> Assignment:
    """Minimum-cost matching of the graph's VNFs to distinct VMs."""
    rows = graph.vnf_nodes
    cols = tuple(sorted({m for (_, m) in graph.edges}))
    if not rows:
        return Assignment(pairs={}, total_cost=0.0)
    if len(cols) < len(rows):
        raise MatchingInfeasibleError(
            f"{len(rows)} VNFs but only {len(cols)} candidate VMs"
        )
    col_ix = {m: j for j, m in enumerate(cols)}
    cost = np.full((len(rows), len(cols)), np.inf)
    for (v, m), c in graph.edges.items():
        cost[rows.index(v), col_ix[m]] = c
    assigned, total = min_cost_assignment(cost)
    pairs = {v: cols[assigned[i]] for i, v in enumerate(rows)}
    return Assignment(pairs=pairs, total_cost=total)


def apply_assignment(a: Assignment, sbar: str, state: DeploymentState) -> DeploymentState:
    """New state with the assignment's placements and usages added;
    capabilities are left to the scaling step."""
    out = state.copy()
    for v, m in a.pairs.items():
        hosted = out.placement.get(m)
        if hosted is not None and hosted != v:
            raise ValueError(f"VM {m} already runs {hosted}")
        out.placement[m] = v
        out.usage.add((sbar, v, m))
    return out


def to_dot(graph: CandidateGraph) -> str:
    """Graphviz text dump of the candidate graph, for inspection."""
    lines = [f'graph "{graph.service}" {{', "  rankdir=LR;"]
    for v in graph.vnf_nodes:
        lines.append(f'  "{v}" [shape=box];')
    for (v, m), c in sorted(graph.edges.items()):
        lines.append(f'  "{v}" -- "{m}" [label="{c:.6g}"];')
    for v, m in sorted(graph.pruned):
        lines.append(f'  "{v}" -- "{m}" [style=dotted, label="pruned"];')
    lines.append("}")
    return "\n".join(lines)
