import json
import math
import os

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flexshare.generators import generate_realistic, generate_synthetic
from flexshare.model import (
    DeploymentState,
    Scenario,
    ScenarioError,
    Service,
    Vm,
    Vnf,
    load_scenario,
    save_scenario,
    scenario_from_dict,
    scenario_to_dict,
    state_from_dict,
    state_to_dict,
    total_cost,
)

DATA = os.path.join(os.path.dirname(__file__), "data")


def small_scenario() -> Scenario:
    return Scenario(
        vms={"m1": Vm(id="m1", max_capability=10.0, fixed_cost=8.0, proportional_cost=0.5)},
        vnfs={"v1": Vnf(id="v1", load_coefficient=1e-3)},
        services={"s1": Service(id="s1", arrival_rates={"v1": 100.0}, max_delay=0.01)},
    )


class TestScenarioValidation:
    def test_valid_scenario_passes(self):
        small_scenario().validate()

    def test_negative_max_delay_rejected(self):
        doc = scenario_to_dict(small_scenario())
        doc["services"][0]["max_delay"] = -1.0
        with pytest.raises(ScenarioError, match="max_delay"):
            scenario_from_dict(doc)

    def test_empty_services_rejected(self):
        doc = scenario_to_dict(small_scenario())
        doc["services"] = []
        with pytest.raises(ScenarioError, match="no services"):
            scenario_from_dict(doc)

    def test_unknown_vnf_reference_rejected(self):
        doc = scenario_to_dict(small_scenario())
        doc["services"][0]["arrival_rates"] = {"nope": 10.0}
        with pytest.raises(ScenarioError, match="unknown VNF"):
            scenario_from_dict(doc)

    def test_jitter_requires_per_request(self):
        doc = scenario_to_dict(small_scenario())
        doc["jitter"] = 1.0
        with pytest.raises(ScenarioError, match="jitter"):
            scenario_from_dict(doc)

    def test_per_request_requires_jitter(self):
        doc = scenario_to_dict(small_scenario())
        doc["priority_scheme"] = "per-request"
        with pytest.raises(ScenarioError, match="jitter"):
            scenario_from_dict(doc)

    def test_parse_error_carries_line(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text('{"vms": [,]}')
        with pytest.raises(ScenarioError, match="line 1"):
            load_scenario(str(path))

    def test_zero_rate_service_rejected(self):
        doc = scenario_to_dict(small_scenario())
        doc["services"][0]["arrival_rates"] = {"v1": 0.0}
        with pytest.raises(ScenarioError, match="positive rate"):
            scenario_from_dict(doc)


class TestScenarioIO:
    def test_roundtrip_is_field_identical(self, tmp_path):
        sc = generate_synthetic(1.3, seed=11)
        path = tmp_path / "sc.json"
        save_scenario(sc, str(path))
        sc2 = load_scenario(str(path))
        assert scenario_to_dict(sc) == scenario_to_dict(sc2)

    def test_millisecond_units_convert(self, tmp_path):
        doc = scenario_to_dict(small_scenario())
        doc["units"] = {
            "rate": "per_millisecond",
            "delay": "milliseconds",
            "load": "capability_milliseconds",
        }
        doc["services"][0]["arrival_rates"] = {"v1": 2.0}
        doc["services"][0]["max_delay"] = 1.1
        doc["vnfs"][0]["load_coefficient"] = 1.0
        sc = scenario_from_dict(doc)
        assert sc.rate("s1", "v1") == pytest.approx(2000.0)
        assert sc.service("s1").max_delay == pytest.approx(1.1e-3)
        assert sc.vnf("v1").load_coefficient == pytest.approx(1e-3)

    def test_scenario_format_is_frozen(self):
        with open(os.path.join(DATA, "scenario_golden.json")) as fh:
            golden = fh.read()
        sc = scenario_from_dict(json.loads(golden))
        assert json.dumps(scenario_to_dict(sc), indent=2, sort_keys=True) + "\n" == golden

    def test_state_format_is_frozen(self):
        with open(os.path.join(DATA, "state_golden.json")) as fh:
            golden = fh.read()
        state = state_from_dict(json.loads(golden))
        sc = load_scenario(os.path.join(DATA, "scenario_golden.json"))
        assert json.dumps(state_to_dict(state, sc), indent=2, sort_keys=True) + "\n" == golden


class TestGenerators:
    def test_synthetic_costs_and_targets(self):
        sc = generate_synthetic(1.0, seed=3)
        for vm in sc.vms.values():
            assert vm.fixed_cost == 8.0
            assert vm.proportional_cost == 0.5
            assert 5.0 <= vm.max_capability <= 10.0
        assert sc.service("s1").max_delay == pytest.approx(20e-3)
        assert sc.service("s3").max_delay == pytest.approx(5e-3)
        for vnf in sc.vnfs.values():
            assert vnf.load_coefficient == pytest.approx(1e-3)

    def test_synthetic_multiplier_scales_rates_exactly(self):
        sc1 = generate_synthetic(1.0, seed=5)
        sc2 = generate_synthetic(2.0, seed=5)
        for s in sc1.services:
            for v, r in sc1.services[s].arrival_rates.items():
                assert sc2.rate(s, v) == pytest.approx(2.0 * r, rel=0, abs=0)
        # same seed, same capabilities
        for m in sc1.vms:
            assert sc1.vm(m).max_capability == sc2.vm(m).max_capability

    def test_synthetic_requires_seed(self):
        with pytest.raises(TypeError):
            generate_synthetic(1.0)  # type: ignore[call-arg]

    def test_realistic_table_values(self):
        sc = generate_realistic(1.0)
        assert sc.rate("ica", "enb") == pytest.approx(117.69)
        assert sc.vnf("enb").load_coefficient == pytest.approx(1e-4)
        assert sc.rate("ct", "ct_server") == pytest.approx(179.82)
        assert sc.vnf("ct_server").load_coefficient == pytest.approx(5e-3)
        for vm in sc.vms.values():
            assert vm.max_capability == 1000.0
            assert vm.fixed_cost == 1000.0
            assert vm.proportional_cost == 1.0

    def test_realistic_sharing_structure(self):
        sc = generate_realistic(1.0)
        core = {"enb", "epc_pgw", "epc_sgw", "epc_hss", "epc_mme"}
        for s in ("ica", "ct", "iot"):
            assert core <= set(sc.service(s).used_vnfs())
        assert "cim" in sc.service("ica").arrival_rates
        assert "cim" in sc.service("ct").arrival_rates
        assert "cim" not in sc.service("iot").arrival_rates

    @settings(max_examples=25, deadline=None)
    @given(n=st.floats(min_value=1e-3, max_value=10.0, allow_nan=False))
    def test_generators_validate_for_all_multipliers(self, n):
        generate_synthetic(n, seed=1).validate()
        generate_realistic(n).validate()


class TestTotalCost:
    def test_empty_deployment_costs_nothing(self):
        assert total_cost(DeploymentState(), small_scenario()) == 0.0

    def test_single_active_vm(self):
        sc = small_scenario()
        state = DeploymentState(
            placement={"m1": "v1"}, usage={("s1", "v1", "m1")}, capabilities={"m1": 4.0}
        )
        assert total_cost(state, sc) == pytest.approx(10.0)

    def test_two_active_vms(self):
        sc = Scenario(
            vms={
                m: Vm(id=m, max_capability=10.0, fixed_cost=8.0, proportional_cost=0.5)
                for m in ("m1", "m2")
            },
            vnfs={"v1": Vnf(id="v1", load_coefficient=1e-3),
                  "v2": Vnf(id="v2", load_coefficient=1e-3)},
            services={
                "s1": Service(id="s1", arrival_rates={"v1": 10.0, "v2": 10.0}, max_delay=0.1)
            },
        )
        state = DeploymentState(
            placement={"m1": "v1", "m2": "v2"},
            usage={("s1", "v1", "m1"), ("s1", "v2", "m2")},
            capabilities={"m1": 4.0, "m2": 6.0},
        )
        assert total_cost(state, sc) == pytest.approx(21.0)

    @settings(max_examples=50, deadline=None)
    @given(
        mu=st.floats(min_value=0.0, max_value=10.0),
        bump=st.floats(min_value=0.0, max_value=5.0),
    )
    def test_cost_monotone_in_capability(self, mu, bump):
        sc = small_scenario()
        base = DeploymentState(
            placement={"m1": "v1"}, usage={("s1", "v1", "m1")}, capabilities={"m1": mu}
        )
        more = DeploymentState(
            placement={"m1": "v1"},
            usage={("s1", "v1", "m1")},
            capabilities={"m1": min(mu + bump, 10.0)},
        )
        assert total_cost(more, sc) >= total_cost(base, sc) - 1e-12

    def test_cost_monotone_in_active_set(self):
        sc = generate_synthetic(1.0, seed=2)
        small = DeploymentState(placement={"m1": "v1"}, capabilities={"m1": 1.0},
                                usage=set())
        big = DeploymentState(
            placement={"m1": "v1", "m2": "v2"},
            capabilities={"m1": 1.0, "m2": 0.0},
            usage=set(),
        )
        assert total_cost(big, sc) >= total_cost(small, sc)


class TestStateValidation:
    def test_usage_requires_placement(self):
        sc = small_scenario()
        state = DeploymentState(usage={("s1", "v1", "m1")})
        with pytest.raises(ScenarioError, match="no matching placement"):
            state.validate(sc)

    def test_capability_above_max_rejected(self):
        sc = small_scenario()
        state = DeploymentState(
            placement={"m1": "v1"}, usage={("s1", "v1", "m1")}, capabilities={"m1": 11.0}
        )
        with pytest.raises(ScenarioError, match="outside"):
            state.validate(sc)

    def test_admitted_service_must_be_fully_placed(self):
        sc = generate_synthetic(1.0, seed=2)
        state = DeploymentState(placement={"m1": "v1"}, usage={("s1", "v1", "m1")})
        with pytest.raises(ScenarioError, match="missing"):
            state.validate(sc)
