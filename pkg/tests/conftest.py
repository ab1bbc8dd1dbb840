import pytest

from flexshare.model import DeploymentState, PrioritySpec, Scenario, Service, Vm, Vnf

# Video-surveillance pair used across the suite: transcoding and motion
# detection shared by both services (service rate 5 req/ms at capability 5
# and load 1e-3), face recognition exclusive to s1 at rate 9.15 req/ms.
# Both delay targets are 1.1 ms, which no constant-per-service priority
# assignment can meet while opposite per-queue priorities can.
VIDEO_MAX_DELAY = 1.1e-3
VIDEO_MU = {"m1": 5.0, "m2": 5.0, "m3": 9.15}


def make_video_scenario(
    scheme: str = "per-vnf",
    caps: dict | None = None,
    extra_vms: dict | None = None,
    jitter: float | None = None,
) -> Scenario:
    caps = dict(caps or VIDEO_MU)
    if extra_vms:
        caps.update(extra_vms)
    vms = {
        m: Vm(id=m, max_capability=c, fixed_cost=8.0, proportional_cost=0.5)
        for m, c in caps.items()
    }
    vnfs = {v: Vnf(id=v, load_coefficient=1e-3) for v in ("tc", "md", "fr")}
    services = {
        "s1": Service(
            id="s1",
            arrival_rates={"tc": 2000.0, "md": 2000.0, "fr": 2000.0},
            max_delay=VIDEO_MAX_DELAY,
        ),
        "s2": Service(
            id="s2",
            arrival_rates={"tc": 1000.0, "md": 1000.0},
            max_delay=VIDEO_MAX_DELAY,
        ),
    }
    scenario = Scenario(
        vms=vms,
        vnfs=vnfs,
        services=services,
        priority_scheme=scheme,
        jitter=jitter if scheme == "per-request" else None,
    )
    scenario.validate()
    return scenario


def make_video_state() -> DeploymentState:
    return DeploymentState(
        placement={"m1": "tc", "m2": "md", "m3": "fr"},
        usage={
            ("s1", "tc", "m1"),
            ("s1", "md", "m2"),
            ("s1", "fr", "m3"),
            ("s2", "tc", "m1"),
            ("s2", "md", "m2"),
        },
        capabilities=dict(VIDEO_MU),
    )


def video_priorities(kind: str) -> PrioritySpec:
    """kind: 's1-first' | 's2-first' | 'equal' | 'flexible'"""
    pairs = [("s1", "tc"), ("s1", "md"), ("s1", "fr"), ("s2", "tc"), ("s2", "md")]
    if kind == "s1-first":
        det = {(s, v): (1.0 if s == "s1" else 0.0) for s, v in pairs}
        return PrioritySpec(scheme="per-service", deterministic=det)
    if kind == "s2-first":
        det = {(s, v): (0.0 if s == "s1" else 1.0) for s, v in pairs}
        return PrioritySpec(scheme="per-service", deterministic=det)
    if kind == "equal":
        det = {(s, v): 0.0 for s, v in pairs}
        return PrioritySpec(scheme="per-service", deterministic=det)
    if kind == "flexible":
        det = {
            ("s1", "tc"): 1.0,
            ("s2", "tc"): 0.0,
            ("s1", "md"): 0.0,
            ("s2", "md"): 1.0,
            ("s1", "fr"): 0.0,
        }
        return PrioritySpec(scheme="per-vnf", deterministic=det)
    raise ValueError(kind)


@pytest.fixture
def video_scenario() -> Scenario:
    return make_video_scenario()


@pytest.fixture
def video_state() -> DeploymentState:
    return make_video_state()
