"""Admission loop: candidate graph, matching, scaling, prune, retry.

A service is admitted by building its candidate graph once, then looping:
match VNFs to VMs at minimum cost, tentatively apply, solve the scaling
subproblem, and either commit (after realizing priorities and re-checking
the delays they actually produce) or prune the graph edge whose VM the
infeasibility analysis blames and retry the matching.  The loop removes
one edge per iteration, so it runs at most as many times as the graph has
edges.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

from . import convex
from .assignment import (
    Assignment,
    CandidateGraph,
    MatchingInfeasibleError,
    NoCandidateError,
    apply_assignment,
    build_graph,
    hungarian,
)
from .convex import ConstraintId, DelayReport, ScalingSolution
from .model import DeploymentState, PrioritySpec, Scenario, total_cost

log = logging.getLogger("flexshare.admission")


class DeadEndError(RuntimeError):
    """No prunable edge can be blamed for the infeasibility."""


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    assignment_cost: float
    solve_status: str
    pruned_edge: tuple[str, str] | None

    def to_json(self) -> str:
        return json.dumps(
            {
                "iteration": self.iteration,
                "assignment_cost": self.assignment_cost,
                "solve_status": self.solve_status,
                "pruned_edge": list(self.pruned_edge) if self.pruned_edge else None,
            }
        )


@dataclass
class AdmissionResult:
    service: str
    status: str  # "admitted" | "rejected"
    state: DeploymentState
    iterations: int
    pruned_edges: list[tuple[str, str]]
    cost_delta: float
    delay_report: DelayReport | None
    trace: list[TraceRecord] = field(default_factory=list)

    @property
    def admitted(self) -> bool:
        return self.status == "admitted"


def instance_slack(v: str, m: str, state: DeploymentState, scenario: Scenario) -> float:
    """Headroom of VM ``m`` under the offered load of its instance of
    ``v``: max capability minus load; smaller means closer to saturation."""
    l = scenario.vnf(v).load_coefficient
    load = sum(
        l * scenario.rate(s, v) for s, v2, m2 in state.usage if v2 == v and m2 == m
    )
    return scenario.vm(m).max_capability - load


def select_prune_edge(
    iis: tuple[ConstraintId, ...] | None,
    sbar: str,
    state: DeploymentState,
    scenario: Scenario,
) -> tuple[str, str]:
    """Pick the edge to prune for the incoming service ``sbar``.

    Prefer capability-capped VMs named by the IIS that ``sbar`` uses,
    taking the one closest to saturation.  When the IIS names none of
    ``sbar``'s VMs (or no IIS is available), fall back to the tightest VM
    ``sbar`` uses, so the loop keeps making progress.
    """
    used = state.vms_used_by(sbar)
    if not used:
        raise DeadEndError(f"service {sbar} uses no VM")
    candidates = used
    if iis:
        capped = {c[1] for c in iis if c[0] == "capacity"}
        named = tuple(m for m in used if m in capped)
        if named:
            candidates = named
    best = min(
        candidates,
        key=lambda m: (instance_slack(state.placement[m], m, state, scenario), m),
    )
    return state.placement[best], best


def _commit_with_priorities(
    tentative: DeploymentState,
    scenario: Scenario,
    priorities,
    mu: dict[str, float] | None,
    sol: ScalingSolution,
):
    """Check realized delays at ``mu`` (re-scaling capabilities against the
    realized priorities if they disagree) and return the committed state,
    or ``(None, None, solution-with-IIS)``."""
    committed = tentative.copy()
    committed.capabilities = dict(mu or {})
    committed.priorities = priorities
    report = convex.verify_realization(priorities, committed, scenario)
    if not report.feasible:
        repair = convex.build_mu_problem(committed, scenario, priorities)
        rsol = convex.solve(repair)
        if rsol.status != "optimal":
            return None, None, rsol
        committed.capabilities = dict(rsol.mu)
        sol = rsol
        report = convex.verify_realization(priorities, committed, scenario)
        if not report.feasible:
            return None, None, rsol
    return committed, report, sol


def _ranked_fallback_priorities(tentative: DeploymentState, scenario: Scenario):
    """The delay-target ranking expressed in the configured scheme: a
    always-available deterministic configuration (strictly separated
    windows for the per-request scheme)."""
    ranked = convex.per_service_priorities(tentative, scenario)
    if scenario.priority_scheme != "per-request":
        return PrioritySpec(scheme=scenario.priority_scheme,
                            deterministic=ranked.deterministic)
    j = scenario.jitter or 1.0
    targets = sorted({scenario.service(s).max_delay for s in tentative.admitted_services()})
    rank_of = {d: i for i, d in enumerate(targets)}
    centers = {
        (s, v): -3.0 * j * rank_of[scenario.service(s).max_delay]
        for s, v, _ in tentative.usage
        if scenario.rate(s, v) > 0
    }
    return PrioritySpec(scheme="per-request", centers=centers, jitter=j)


def scale_and_commit(
    tentative: DeploymentState, scenario: Scenario
) -> tuple[DeploymentState, DelayReport, ScalingSolution] | tuple[None, None, ScalingSolution]:
    """Scaling step on a tentatively-assigned state.

    Solves the relaxation appropriate for the configured scheme, realizes
    priorities, re-checks realized delays, and re-solves the capabilities
    against the realized priorities when the re-check disagrees.  Because
    snapping the relaxation to concrete priorities can lose quality, the
    plain delay-target ranking is priced as well and the cheaper feasible
    configuration is committed.  Returns the committed state or ``(None,
    None, solution)`` when infeasible (the solution carries the IIS to
    prune on).
    """
    if scenario.priority_scheme == "per-service":
        priorities = convex.per_service_priorities(tentative, scenario)
        problem = convex.build_mu_problem(tentative, scenario, priorities)
        sol = convex.solve(problem)
        if sol.status != "optimal":
            return None, None, sol
        return _commit_with_priorities(tentative, scenario, priorities, sol.mu, sol)

    problem = convex.build_problem(tentative, scenario)
    sol = convex.solve(problem)
    if sol.status != "optimal":
        return None, None, sol
    priorities = convex.realize_priorities(sol, tentative, scenario)
    primary = _commit_with_priorities(tentative, scenario, priorities, sol.mu, sol)

    fallback_spec = _ranked_fallback_priorities(tentative, scenario)
    fb_problem = convex.build_mu_problem(tentative, scenario, fallback_spec)
    try:
        fb_sol = convex.solve(fb_problem)
    except convex.SolverFailure:
        fb_sol = None
    fallback = None
    if fb_sol is not None and fb_sol.status == "optimal":
        fallback = _commit_with_priorities(
            tentative, scenario, fallback_spec, fb_sol.mu, fb_sol
        )
        if fallback[0] is None:
            fallback = None

    if primary[0] is None:
        return fallback if fallback is not None else primary
    if fallback is not None and (
        total_cost(fallback[0], scenario) < total_cost(primary[0], scenario) - 1e-9
    ):
        return fallback
    return primary


def admit(sbar: str, state: DeploymentState, scenario: Scenario) -> AdmissionResult:
    """Admit one service against the current deployment, or reject it
    leaving the deployment untouched."""
    rejected = AdmissionResult(
        service=sbar, status="rejected", state=state, iterations=0,
        pruned_edges=[], cost_delta=0.0, delay_report=None,
    )
    try:
        graph = build_graph(sbar, state, scenario)
    except NoCandidateError as exc:
        log.info("admit %s: %s", sbar, exc)
        return rejected
    return admit_on_graph(sbar, state, scenario, graph, scale_and_commit)


def admit_on_graph(
    sbar: str,
    state: DeploymentState,
    scenario: Scenario,
    graph: CandidateGraph,
    scaler,
) -> AdmissionResult:
    """Admission loop over an already-built candidate graph; ``scaler``
    runs the scaling step on each tentative state (swappable so the
    brute-force benchmark can reuse the loop)."""
    cost_before = total_cost(state, scenario)
    max_iterations = graph.edge_count()
    pruned: list[tuple[str, str]] = []
    trace: list[TraceRecord] = []
    iteration = 0
    while iteration < max_iterations:
        iteration += 1
        try:
            assignment = hungarian(graph)
        except MatchingInfeasibleError:
            trace.append(TraceRecord(iteration, float("inf"), "no-matching", None))
            break
        tentative = apply_assignment(assignment, sbar, state)
        committed, report, sol = scaler(tentative, scenario)
        if committed is not None:
            trace.append(TraceRecord(iteration, assignment.total_cost, "optimal", None))
            log.info("admit %s: admitted after %d iteration(s)", sbar, iteration)
            return AdmissionResult(
                service=sbar, status="admitted", state=committed,
                iterations=iteration, pruned_edges=pruned,
                cost_delta=total_cost(committed, scenario) - cost_before,
                delay_report=report, trace=trace,
            )
        try:
            edge = select_prune_edge(sol.iis if sol else None, sbar, tentative, scenario)
        except DeadEndError:
            trace.append(TraceRecord(iteration, assignment.total_cost, "dead-end", None))
            break
        graph.prune(*edge)
        pruned.append(edge)
        trace.append(TraceRecord(iteration, assignment.total_cost, "infeasible", edge))
        log.debug("admit %s: pruned edge %s", sbar, edge)
    log.info("admit %s: rejected after %d iteration(s)", sbar, iteration)
    return AdmissionResult(
        service=sbar, status="rejected", state=state, iterations=iteration,
        pruned_edges=pruned, cost_delta=0.0, delay_report=None, trace=trace,
    )


def deploy_sequence(
    services: list[str],
    scenario: Scenario,
    admit_fn=admit,
) -> tuple[DeploymentState, list[AdmissionResult]]:
    """Admit services one at a time in the given order.  Earlier services
    keep their placements, but capabilities and priorities are re-decided
    at every admission."""
    state = DeploymentState()
    results = []
    for s in services:
        result = admit_fn(s, state, scenario)
        results.append(result)
        if result.admitted:
            state = result.state
    return state, results
