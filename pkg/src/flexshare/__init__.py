"""Decision engine for sharing VNF instances, assigning service priorities
per queue, and scaling VM capabilities within one point of presence."""

from .assignment import Assignment, CandidateGraph, build_graph, hungarian
from .convex import ScalingSolution, build_problem, realize_priorities, solve, verify_realization
from .generators import generate_realistic, generate_synthetic
from .model import (
    DeploymentState,
    PrioritySpec,
    Scenario,
    Service,
    Vm,
    Vnf,
    load_scenario,
    save_scenario,
    total_cost,
)
from .pruning import AdmissionResult, admit, deploy_sequence
from .queueing import QueueLoad, service_delay, sojourn_time
from .sim import SimConfig, SimReport, compare_to_analytic, simulate

__all__ = [
    "Assignment",
    "CandidateGraph",
    "build_graph",
    "hungarian",
    "ScalingSolution",
    "build_problem",
    "realize_priorities",
    "solve",
    "verify_realization",
    "generate_realistic",
    "generate_synthetic",
    "DeploymentState",
    "PrioritySpec",
    "Scenario",
    "Service",
    "Vm",
    "Vnf",
    "load_scenario",
    "save_scenario",
    "total_cost",
    "AdmissionResult",
    "admit",
    "deploy_sequence",
    "QueueLoad",
    "service_delay",
    "sojourn_time",
    "SimConfig",
    "SimReport",
    "compare_to_analytic",
    "simulate",
]

__version__ = "0.1.0"
