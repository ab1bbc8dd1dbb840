"""Analytic model of preemptive-resume priority M/M/1 queues in a chain.

A VNF instance on a VM with capability ``mu`` and load coefficient ``l``
serves requests at rate ``mu / l``.  A tagged class that sees competing
traffic ``big_lam`` outranking it, and brings its own rate ``lam``, has
mean sojourn

    S = (l / mu) * 1 / (1 - l*big_lam/mu) * 1 / (1 - l*(big_lam + lam)/mu)

which is the classic preemptive-resume result with all classes sharing the
same exponential service rate.  Ties between deterministic priorities are
evaluated exactly: services with equal priority at a queue form one
first-come-first-served class, so their tagged sojourn uses the combined
rate of the tie group as its own rate.  (The smoothed half-weight tie rule
in :func:`higher_priority_rate_per_vnf` is retained for rate accounting,
but plugging it into the sojourn formula would misprice exact ties.)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

from .model import DeploymentState, PrioritySpec, Scenario

# queues must keep load strictly below capability by this relative margin
STABILITY_MARGIN = 1e-6


class InstabilityError(RuntimeError):
    """The offered load reaches the service capability at some queue."""

    def __init__(self, message: str, vm: str | None = None):
        super().__init__(message)
        self.vm = vm


@dataclass(frozen=True)
class QueueLoad:
    """Operands of the sojourn formula for one tagged class at one queue."""

    vnf_load: float  # l, capability-seconds per request
    capability: float  # mu of the hosting VM
    own_rate: float  # requests/s of the tagged class (incl. exact ties)
    higher_rate: float  # requests/s strictly outranking the tagged class

    def utilization(self) -> float:
        return self.vnf_load * (self.higher_rate + self.own_rate) / self.capability


def sojourn_time(q: QueueLoad, vm: str | None = None) -> float:
    """Mean sojourn (wait + service) of the tagged class, in seconds."""
    if not q.capability > 0:
        raise InstabilityError("capability must be positive", vm=vm)
    load = q.vnf_load * (q.higher_rate + q.own_rate)
    if load > (1.0 - STABILITY_MARGIN) * q.capability:
        raise InstabilityError(
            f"unstable queue: load {load:.6g} vs capability {q.capability:.6g}",
            vm=vm,
        )
    rho_hi = q.vnf_load * q.higher_rate / q.capability
    rho_all = load / q.capability
    return (q.vnf_load / q.capability) / ((1.0 - rho_hi) * (1.0 - rho_all))


def _heaviside(x: float) -> float:
    if x > 0:
        return 1.0
    if x < 0:
        return 0.0
    return 0.5


def higher_priority_rate_per_vnf(
    s: str,
    v: str,
    priorities: PrioritySpec,
    rates: Mapping[str, float],
) -> float:
    """Rate of competing traffic outranking service ``s`` at VNF ``v``
    under deterministic priorities, counting exact ties at half weight.
    The tagged service itself never competes with its own requests."""
    p_s = priorities.priority(s, v)
    total = 0.0
    for t, lam_t in rates.items():
        if t == s:
            continue
        total += _heaviside(priorities.priority(t, v) - p_s) * lam_t
    return total


def overtake_probability(r_s: float, r_t: float, j: float) -> float:
    """Probability that a request with uniform priority window centered at
    ``r_t`` outranks one centered at ``r_s``, both windows half-width ``j``."""
    if not j > 0:
        raise ValueError("jitter must be > 0")
    d = r_t - r_s
    if d > 2.0 * j:
        return 1.0
    if d < -2.0 * j:
        return 0.0
    return 0.5 + d / (4.0 * j)


def higher_priority_rate_per_request(
    s: str,
    v: str,
    priorities: PrioritySpec,
    rates: Mapping[str, float],
) -> float:
    """Expected rate of competing traffic outranking service ``s`` at VNF
    ``v`` when every request draws its priority from its service's window."""
    r_s = priorities.center(s, v)
    j = priorities.jitter
    assert j is not None
    total = 0.0
    for t, lam_t in rates.items():
        if t == s:
            continue
        total += overtake_probability(r_s, priorities.center(t, v), j) * lam_t
    return total


def _instance_rates(
    v: str, m: str, state: DeploymentState, scenario: Scenario
) -> dict[str, float]:
    return {
        s2: scenario.rate(s2, v)
        for s2, v2, m2 in state.usage
        if v2 == v and m2 == m and scenario.rate(s2, v) > 0
    }


def effective_rates(
    s: str,
    v: str,
    m: str,
    state: DeploymentState,
    scenario: Scenario,
    priorities: PrioritySpec,
) -> tuple[float, float]:
    """(own_rate, higher_rate) of service ``s`` at its instance of ``v`` on
    ``m`` under the given priorities.

    Deterministic schemes split competitors into strictly-higher traffic
    and exact ties; ties join the tagged service's own class so equal
    priorities reproduce plain FIFO behaviour exactly.  The per-request
    scheme uses the expected overtaking rate.
    """
    rates = _instance_rates(v, m, state, scenario)
    lam_own = rates[s]
    if priorities.scheme == "per-request":
        return lam_own, higher_priority_rate_per_request(s, v, priorities, rates)
    p_s = priorities.priority(s, v)
    higher = 0.0
    tied = 0.0
    for t, lam_t in rates.items():
        if t == s:
            continue
        p_t = priorities.priority(t, v)
        if p_t > p_s:
            higher += lam_t
        elif p_t == p_s:
            tied += lam_t
    return lam_own + tied, higher


def queue_operands(
    s: str,
    v: str,
    m: str,
    state: DeploymentState,
    scenario: Scenario,
    priorities: PrioritySpec | None = None,
) -> QueueLoad:
    """Sojourn-formula operands for service ``s`` at its instance of ``v``
    on ``m``, under the configured priority scheme."""
    spec = priorities or state.priorities
    if spec is None:
        raise ValueError("no priorities available")
    own, higher = effective_rates(s, v, m, state, scenario, spec)
    return QueueLoad(
        vnf_load=scenario.vnf(v).load_coefficient,
        capability=state.capabilities[m],
        own_rate=own,
        higher_rate=higher,
    )


def service_delay_breakdown(
    s: str,
    state: DeploymentState,
    scenario: Scenario,
    priorities: PrioritySpec | None = None,
) -> dict[tuple[str, str], float]:
    """Per-(vnf, vm) mean sojourn of service ``s``, seconds."""
    out: dict[tuple[str, str], float] = {}
    for v in scenario.service(s).used_vnfs():
        m = state.instance_of(s, v)
        q = queue_operands(s, v, m, state, scenario, priorities)
        out[(v, m)] = sojourn_time(q, vm=m)
    return out


def service_delay(
    s: str,
    state: DeploymentState,
    scenario: Scenario,
    priorities: PrioritySpec | None = None,
) -> float:
    """End-to-end mean delay of service ``s``: the sum of its per-VNF
    sojourns (VNFs the service does not use contribute nothing)."""
    return sum(service_delay_breakdown(s, state, scenario, priorities).values())
