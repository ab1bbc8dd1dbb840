"""Exhaustive baselines for validating the admission pipeline at small
scale: optimal deterministic priorities by enumeration, and exhaustive
search over VNF-to-VM assignments."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

from . import convex
from .assignment import Assignment, NoCandidateError, apply_assignment, build_graph
from .model import DeploymentState, PrioritySpec, Scenario, total_cost
from .pruning import AdmissionResult, admit_on_graph

# full weak-ordering enumeration is bounded; above this many services per
# instance only strict orders plus the all-equal level are tried
FULL_WEAK_ORDER_LIMIT = 3


class EnumerationLimitError(RuntimeError):
    """The instance exceeds the configured enumeration caps."""


@dataclass(frozen=True)
class BruteForceResult:
    feasible: bool
    priorities: PrioritySpec | None
    mu: dict[str, float] | None
    cost: float
    enumerated: int


def weak_orderings(items: tuple[str, ...]) -> list[tuple[tuple[str, ...], ...]]:
    """All orderings of ``items`` into ranked groups (ties allowed), most
    preferred group first.  Beyond FULL_WEAK_ORDER_LIMIT items, only the
    strict orders plus the single all-equal grouping are produced."""
    items = tuple(items)
    k = len(items)
    if k == 0:
        return [()]
    if k > FULL_WEAK_ORDER_LIMIT:
        out = [tuple((x,) for x in perm) for perm in itertools.permutations(items)]
        out.append((items,))
        return out

    def ordered_partitions(rest: tuple[str, ...]):
        if not rest:
            yield ()
            return
        first, tail = rest[0], rest[1:]
        for sub in ordered_partitions(tail):
            for i, block in enumerate(sub):
                yield sub[:i] + (tuple(sorted(block + (first,))),) + sub[i + 1:]
            for i in range(len(sub) + 1):
                yield sub[:i] + ((first,),) + sub[i:]

    return sorted(ordered_partitions(items))


def expected_ordering_count(k: int) -> int:
    """Number of configurations enumerated per instance with k services."""
    if k > FULL_WEAK_ORDER_LIMIT:
        return math.factorial(k) + 1
    fubini = {0: 1, 1: 1, 2: 3, 3: 13}
    return fubini[k]


def _priorities_from_ordering(ordering: tuple[tuple[str, ...], ...]) -> dict[str, float]:
    levels: dict[str, float] = {}
    for rank, block in enumerate(ordering):
        for s in block:
            levels[s] = -float(rank)
    return levels


def brute_force_priorities(
    state: DeploymentState,
    scenario: Scenario,
    scope: str = "per-vnf",
    max_services_per_instance: int = 4,
    max_shared_instances: int = 8,
) -> BruteForceResult:
    """Cheapest deterministic priority configuration by enumeration.

    ``scope='per-vnf'`` ranks services independently at every shared
    instance; ``scope='per-service'`` ranks them once, globally.  Every
    configuration is priced by re-solving the capability scaling with the
    implied outranking rates fixed; the cheapest feasible one wins (ties
    go to the first configuration in enumeration order).
    """
    if scope not in ("per-vnf", "per-service"):
        raise ValueError(f"unknown scope {scope!r}")
    instances = state.instances()
    shared = {key: ss for key, ss in instances.items() if len(ss) > 1}
    if len(shared) > max_shared_instances:
        raise EnumerationLimitError(f"{len(shared)} shared instances exceed the cap")
    for key, ss in shared.items():
        if len(ss) > max_services_per_instance:
            raise EnumerationLimitError(f"instance {key} shared by {len(ss)} services")

    scheme = "per-vnf" if scope == "per-vnf" else "per-service"

    def spec_from_levels(levels_by_instance: dict[tuple[str, str], dict[str, float]]) -> PrioritySpec:
        det: dict[tuple[str, str], float] = {}
        for (v, m), services in instances.items():
            levels = levels_by_instance.get((v, m), {})
            for s in services:
                det[(s, v)] = levels.get(s, 0.0)
        return PrioritySpec(scheme=scheme, deterministic=det)

    combos: list[dict[tuple[str, str], dict[str, float]]] = []
    if scope == "per-vnf":
        keys = sorted(shared)
        options = [weak_orderings(shared[key]) for key in keys]
        for pick in itertools.product(*options):
            combos.append(
                {key: _priorities_from_ordering(o) for key, o in zip(keys, pick)}
            )
    else:
        services = state.admitted_services()
        for ordering in weak_orderings(services):
            levels = _priorities_from_ordering(ordering)
            combos.append({key: levels for key in shared})

    best: BruteForceResult | None = None
    for combo in combos:
        spec = spec_from_levels(combo)
        problem = convex.build_mu_problem(state, scenario, spec)
        sol = convex.solve(problem)
        if sol.status != "optimal":
            continue
        if best is None or sol.objective_value < best.cost - 1e-12:
            best = BruteForceResult(
                feasible=True, priorities=spec, mu=dict(sol.mu),
                cost=sol.objective_value, enumerated=len(combos),
            )
    if best is None:
        return BruteForceResult(
            feasible=False, priorities=None, mu=None, cost=float("inf"),
            enumerated=len(combos),
        )
    return best


def brute_force_assignment(
    sbar: str,
    state: DeploymentState,
    scenario: Scenario,
    max_vnfs: int = 8,
    max_vms: int = 10,
) -> tuple[Assignment | None, DeploymentState | None, float, int]:
    """Cheapest admission of ``sbar`` over every injective VNF-to-VM map
    the candidate graph allows, each priced by the full scaling step.

    Returns (assignment, committed state, cost, maps enumerated); the
    assignment is None when no map can be admitted.
    """
    from .pruning import scale_and_commit

    try:
        graph = build_graph(sbar, state, scenario)
    except NoCandidateError:
        return None, None, float("inf"), 0
    rows = graph.vnf_nodes
    vms_with_edges = sorted({m for (_, m) in graph.edges})
    if len(rows) > max_vnfs:
        raise EnumerationLimitError(f"{len(rows)} VNFs exceed the cap")
    if len(vms_with_edges) > max_vms:
        raise EnumerationLimitError(f"{len(vms_with_edges)} candidate VMs exceed the cap")

    options = [graph.candidates(v) for v in rows]
    best_cost = float("inf")
    best_pair: tuple[Assignment, DeploymentState] | None = None
    enumerated = 0

    def backtrack(i: int, used: set[str], chosen: dict[str, str]):
        nonlocal enumerated, best_cost, best_pair
        if i == len(rows):
            enumerated += 1
            pairs = dict(chosen)
            edge_total = sum(graph.edges[(v, m)] for v, m in pairs.items())
            assignment = Assignment(pairs=pairs, total_cost=edge_total)
            tentative = apply_assignment(assignment, sbar, state)
            committed, _, _ = scale_and_commit(tentative, scenario)
            if committed is not None:
                cost = total_cost(committed, scenario)
                if cost < best_cost - 1e-12:
                    best_cost = cost
                    best_pair = (assignment, committed)
            return
        v = rows[i]
        for m in options[i]:
            if m in used:
                continue
            used.add(m)
            chosen[v] = m
            backtrack(i + 1, used, chosen)
            used.discard(m)
            del chosen[v]

    backtrack(0, set(), {})
    if best_pair is None:
        return None, None, float("inf"), enumerated
    return best_pair[0], best_pair[1], best_cost, enumerated


def admit_brute(sbar: str, state: DeploymentState, scenario: Scenario) -> AdmissionResult:
    """Benchmark admission: the usual candidate graph and matching, but
    with priorities chosen by per-instance enumeration instead of the
    relaxation."""

    def brute_scaler(tentative: DeploymentState, scn: Scenario):
        bf = brute_force_priorities(tentative, scn, scope="per-vnf")
        if not bf.feasible:
            return None, None, None
        committed = tentative.copy()
        committed.capabilities = dict(bf.mu or {})
        committed.priorities = bf.priorities
        assert bf.priorities is not None
        report = convex.verify_realization(bf.priorities, committed, scn)
        return committed, report, None

    rejected = AdmissionResult(
        service=sbar, status="rejected", state=state, iterations=0,
        pruned_edges=[], cost_delta=0.0, delay_report=None,
    )
    try:
        graph = build_graph(sbar, state, scenario)
    except NoCandidateError:
        return rejected
    return admit_on_graph(sbar, state, scenario, graph, brute_scaler)
