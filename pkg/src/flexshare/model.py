"""Domain model: problem scenarios, deployment state, and their JSON formats.

All quantities are kept in SI units internally: request rates in requests
per second, delays in seconds, VNF load coefficients in capability-units x
seconds per request, VM capabilities in capability units.  Scenario files
may declare other units (see ``UNIT_FACTORS``); they are converted once at
load time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterator, Mapping

PRIORITY_SCHEMES = ("per-service", "per-vnf", "per-request")
AVERAGING_MODES = ("self-excluded", "paper-literal")

# multiplier that converts a value in the declared unit into the SI value
UNIT_FACTORS = {
    "rate": {"per_second": 1.0, "per_millisecond": 1e3},
    "delay": {"seconds": 1.0, "milliseconds": 1e-3},
    "load": {"capability_seconds": 1.0, "capability_milliseconds": 1e-3},
}
SI_UNITS = {"rate": "per_second", "delay": "seconds", "load": "capability_seconds"}


class ScenarioError(ValueError):
    """A scenario file failed to parse or violates a model invariant."""


@dataclass(frozen=True)
class Vm:
    """A virtual machine that can host at most one VNF instance."""

    id: str
    max_capability: float
    fixed_cost: float
    proportional_cost: float

    def validate(self) -> None:
        if not self.max_capability > 0:
            raise ScenarioError(f"vm {self.id}: max_capability must be > 0")
        if self.fixed_cost < 0:
            raise ScenarioError(f"vm {self.id}: fixed_cost must be >= 0")
        if self.proportional_cost < 0:
            raise ScenarioError(f"vm {self.id}: proportional_cost must be >= 0")


@dataclass(frozen=True)
class Vnf:
    """A network function type; ``load_coefficient`` is the capability-time
    consumed per request, so a VM running at capability mu serves requests
    at rate mu / load_coefficient."""

    id: str
    load_coefficient: float

    def validate(self) -> None:
        if not self.load_coefficient > 0:
            raise ScenarioError(f"vnf {self.id}: load_coefficient must be > 0")


@dataclass(frozen=True)
class Service:
    """A service: per-VNF request arrival rates and a mean-delay target."""

    id: str
    arrival_rates: Mapping[str, float]
    max_delay: float

    def rate(self, vnf_id: str) -> float:
        return self.arrival_rates.get(vnf_id, 0.0)

    def used_vnfs(self) -> tuple[str, ...]:
        return tuple(v for v, r in sorted(self.arrival_rates.items()) if r > 0)

    def validate(self) -> None:
        if not self.max_delay > 0:
            raise ScenarioError(f"service {self.id}: max_delay must be > 0")
        for v, r in self.arrival_rates.items():
            if r < 0:
                raise ScenarioError(f"service {self.id}: rate at {v} must be >= 0")
        if not any(r > 0 for r in self.arrival_rates.values()):
            raise ScenarioError(f"service {self.id}: needs at least one positive rate")


@dataclass(frozen=True)
class Scenario:
    """Immutable problem input: VMs, VNFs, services, and the priority scheme."""

    vms: Mapping[str, Vm]
    vnfs: Mapping[str, Vnf]
    services: Mapping[str, Service]
    priority_scheme: str = "per-vnf"
    jitter: float | None = None
    averaging_factor_mode: str = "self-excluded"
    seed: int | None = None

    def vm(self, m: str) -> Vm:
        return self.vms[m]

    def vnf(self, v: str) -> Vnf:
        return self.vnfs[v]

    def service(self, s: str) -> Service:
        return self.services[s]

    def rate(self, s: str, v: str) -> float:
        return self.services[s].rate(v)

    def with_scheme(self, scheme: str, jitter: float | None = None) -> "Scenario":
        if scheme == "per-request":
            jitter = 1.0 if jitter is None else jitter
        else:
            jitter = None
        return replace(self, priority_scheme=scheme, jitter=jitter)

    def validate(self) -> None:
        if not self.vms:
            raise ScenarioError("scenario has no VMs")
        if not self.services:
            raise ScenarioError("scenario has no services")
        if self.priority_scheme not in PRIORITY_SCHEMES:
            raise ScenarioError(f"unknown priority_scheme {self.priority_scheme!r}")
        if self.averaging_factor_mode not in AVERAGING_MODES:
            raise ScenarioError(
                f"unknown averaging_factor_mode {self.averaging_factor_mode!r}"
            )
        if self.priority_scheme == "per-request":
            if self.jitter is None or not self.jitter > 0:
                raise ScenarioError("per-request scheme requires jitter > 0")
        elif self.jitter is not None:
            raise ScenarioError("jitter is only meaningful for the per-request scheme")
        for vm in self.vms.values():
            vm.validate()
        for vnf in self.vnfs.values():
            vnf.validate()
        for svc in self.services.values():
            svc.validate()
            for v in svc.arrival_rates:
                if v not in self.vnfs:
                    raise ScenarioError(
                        f"service {svc.id} references unknown VNF {v!r}"
                    )


@dataclass(frozen=True)
class PrioritySpec:
    """Realized priorities.

    ``deterministic`` maps (service, vnf) to a real priority value; larger
    wins, equal values share the queue in arrival order.  Used by the
    per-service and per-vnf schemes (per-service is the special case where
    the value does not depend on the VNF).  ``centers`` maps (service, vnf)
    to the center of a uniform priority window of half-width ``jitter``;
    each request draws its own priority from that window.
    """

    scheme: str
    deterministic: Mapping[tuple[str, str], float] | None = None
    centers: Mapping[tuple[str, str], float] | None = None
    jitter: float | None = None

    def priority(self, s: str, v: str) -> float:
        assert self.deterministic is not None
        return self.deterministic[(s, v)]

    def center(self, s: str, v: str) -> float:
        assert self.centers is not None
        return self.centers[(s, v)]

    def validate(self) -> None:
        if self.scheme not in PRIORITY_SCHEMES:
            raise ScenarioError(f"unknown priority scheme {self.scheme!r}")
        if self.scheme == "per-request":
            if self.centers is None or self.deterministic is not None:
                raise ScenarioError("per-request spec must carry centers only")
            if self.jitter is None or not self.jitter > 0:
                raise ScenarioError("per-request spec requires jitter > 0")
        else:
            if self.deterministic is None or self.centers is not None:
                raise ScenarioError(
                    f"{self.scheme} spec must carry deterministic priorities only"
                )


@dataclass
class DeploymentState:
    """Which VM runs which VNF, who uses which instance, and the solved
    capabilities/priorities.  Mutated only by the admission loop."""

    placement: dict[str, str] = field(default_factory=dict)  # vm -> vnf
    usage: set[tuple[str, str, str]] = field(default_factory=set)  # (s, v, m)
    capabilities: dict[str, float] = field(default_factory=dict)  # vm -> mu
    priorities: PrioritySpec | None = None

    def copy(self) -> "DeploymentState":
        return DeploymentState(
            placement=dict(self.placement),
            usage=set(self.usage),
            capabilities=dict(self.capabilities),
            priorities=self.priorities,
        )

    def admitted_services(self) -> tuple[str, ...]:
        return tuple(sorted({s for s, _, _ in self.usage}))

    def instances(self) -> dict[tuple[str, str], tuple[str, ...]]:
        """Map (vnf, vm) -> sorted services sharing that instance."""
        groups: dict[tuple[str, str], set[str]] = {}
        for s, v, m in self.usage:
            groups.setdefault((v, m), set()).add(s)
        return {key: tuple(sorted(ss)) for key, ss in sorted(groups.items())}

    def instance_of(self, s: str, v: str) -> str:
        """VM hosting the instance of ``v`` used by ``s``."""
        for s2, v2, m in self.usage:
            if s2 == s and v2 == v:
                return m
        raise KeyError((s, v))

    def vms_used_by(self, s: str) -> tuple[str, ...]:
        return tuple(sorted({m for s2, _, m in self.usage if s2 == s}))

    def validate(self, scenario: Scenario) -> None:
        for m, v in self.placement.items():
            if m not in scenario.vms:
                raise ScenarioError(f"placement references unknown VM {m!r}")
            if v not in scenario.vnfs:
                raise ScenarioError(f"placement references unknown VNF {v!r}")
        for s, v, m in self.usage:
            if self.placement.get(m) != v:
                raise ScenarioError(f"usage ({s},{v},{m}) has no matching placement")
        for m, mu in self.capabilities.items():
            if m not in self.placement:
                raise ScenarioError(f"capability set for unplaced VM {m!r}")
            if not 0 <= mu <= scenario.vm(m).max_capability * (1 + 1e-12):
                raise ScenarioError(f"vm {m}: capability {mu} outside [0, C]")
        seen: dict[tuple[str, str], str] = {}
        for s, v, m in self.usage:
            if (s, v) in seen:
                raise ScenarioError(f"service {s} uses two instances of {v}")
            seen[(s, v)] = m
        for s in self.admitted_services():
            for v in scenario.service(s).used_vnfs():
                if (s, v) not in seen:
                    raise ScenarioError(f"admitted service {s} missing VNF {v}")


def total_cost(state: DeploymentState, scenario: Scenario) -> float:
    """Operator cost: per active VM, its activation cost plus the
    proportional cost of the capability in use."""
    cost = 0.0
    for m in state.placement:
        vm = scenario.vm(m)
        cost += vm.fixed_cost + vm.proportional_cost * state.capabilities.get(m, 0.0)
    return cost


# ---------------------------------------------------------------------------
# JSON formats


def _unit_factor(kind: str, units: Mapping[str, str]) -> float:
    name = units.get(kind, SI_UNITS[kind])
    try:
        return UNIT_FACTORS[kind][name]
    except KeyError:
        raise ScenarioError(f"unknown {kind} unit {name!r}") from None


def scenario_from_dict(doc: Mapping) -> Scenario:
    try:
        units = doc.get("units", {})
        rate_f = _unit_factor("rate", units)
        delay_f = _unit_factor("delay", units)
        load_f = _unit_factor("load", units)
        vms = {
            d["id"]: Vm(
                id=d["id"],
                max_capability=float(d["max_capability"]),
                fixed_cost=float(d["fixed_cost"]),
                proportional_cost=float(d["proportional_cost"]),
            )
            for d in doc["vms"]
        }
        vnfs = {
            d["id"]: Vnf(id=d["id"], load_coefficient=float(d["load_coefficient"]) * load_f)
            for d in doc["vnfs"]
        }
        services = {
            d["id"]: Service(
                id=d["id"],
                arrival_rates={v: float(r) * rate_f for v, r in d["arrival_rates"].items()},
                max_delay=float(d["max_delay"]) * delay_f,
            )
            for d in doc["services"]
        }
        scenario = Scenario(
            vms=vms,
            vnfs=vnfs,
            services=services,
            priority_scheme=doc.get("priority_scheme", "per-vnf"),
            jitter=doc.get("jitter"),
            averaging_factor_mode=doc.get("averaging_factor_mode", "self-excluded"),
            seed=doc.get("seed"),
        )
    except ScenarioError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"malformed scenario document: {exc!r}") from exc
    scenario.validate()
    return scenario


def scenario_to_dict(scenario: Scenario) -> dict:
    doc: dict = {
        "units": dict(SI_UNITS),
        "vms": [
            {
                "id": vm.id,
                "max_capability": vm.max_capability,
                "fixed_cost": vm.fixed_cost,
                "proportional_cost": vm.proportional_cost,
            }
            for vm in sorted(scenario.vms.values(), key=lambda x: x.id)
        ],
        "vnfs": [
            {"id": vnf.id, "load_coefficient": vnf.load_coefficient}
            for vnf in sorted(scenario.vnfs.values(), key=lambda x: x.id)
        ],
        "services": [
            {
                "id": svc.id,
                "arrival_rates": dict(sorted(svc.arrival_rates.items())),
                "max_delay": svc.max_delay,
            }
            for svc in sorted(scenario.services.values(), key=lambda x: x.id)
        ],
        "priority_scheme": scenario.priority_scheme,
    }
    if scenario.jitter is not None:
        doc["jitter"] = scenario.jitter
    if scenario.averaging_factor_mode != "self-excluded":
        doc["averaging_factor_mode"] = scenario.averaging_factor_mode
    if scenario.seed is not None:
        doc["seed"] = scenario.seed
    return doc


def load_scenario(path: str) -> Scenario:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: parse error at line {exc.lineno}: {exc.msg}") from exc
    except OSError as exc:
        raise ScenarioError(f"{path}: {exc.strerror}") from exc
    return scenario_from_dict(doc)


def save_scenario(scenario: Scenario, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(scenario_to_dict(scenario), fh, indent=2, sort_keys=True)
        fh.write("\n")


def priorities_to_dict(spec: PrioritySpec | None) -> dict | None:
    if spec is None:
        return None
    doc: dict = {"scheme": spec.scheme}
    if spec.deterministic is not None:
        det: dict[str, dict[str, float]] = {}
        for (s, v), p in sorted(spec.deterministic.items()):
            det.setdefault(s, {})[v] = p
        doc["deterministic"] = det
    if spec.centers is not None:
        cen: dict[str, dict[str, float]] = {}
        for (s, v), r in sorted(spec.centers.items()):
            cen.setdefault(s, {})[v] = r
        doc["centers"] = cen
        doc["jitter"] = spec.jitter
    return doc


def priorities_from_dict(doc: Mapping | None) -> PrioritySpec | None:
    if doc is None:
        return None
    deterministic = None
    centers = None
    if "deterministic" in doc:
        deterministic = {
            (s, v): float(p)
            for s, by_vnf in doc["deterministic"].items()
            for v, p in by_vnf.items()
        }
    if "centers" in doc:
        centers = {
            (s, v): float(r)
            for s, by_vnf in doc["centers"].items()
            for v, r in by_vnf.items()
        }
    spec = PrioritySpec(
        scheme=doc["scheme"],
        deterministic=deterministic,
        centers=centers,
        jitter=doc.get("jitter"),
    )
    spec.validate()
    return spec


def state_to_dict(state: DeploymentState, scenario: Scenario) -> dict:
    return {
        "placement": dict(sorted(state.placement.items())),
        "usage": sorted(list(t) for t in state.usage),
        "capabilities": dict(sorted(state.capabilities.items())),
        "priorities": priorities_to_dict(state.priorities),
        "cost": total_cost(state, scenario),
    }


def state_from_dict(doc: Mapping) -> DeploymentState:
    return DeploymentState(
        placement=dict(doc["placement"]),
        usage={tuple(t) for t in doc["usage"]},
        capabilities={m: float(x) for m, x in doc["capabilities"].items()},
        priorities=priorities_from_dict(doc.get("priorities")),
    )


def save_state(state: DeploymentState, scenario: Scenario, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(state_to_dict(state, scenario), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_state(path: str) -> DeploymentState:
    with open(path) as fh:
        return state_from_dict(json.load(fh))
