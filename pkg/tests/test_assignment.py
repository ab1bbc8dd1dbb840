import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flexshare.assignment import (
    EDGE_COST_EPSILON,
    MatchingInfeasibleError,
    NoCandidateError,
    apply_assignment,
    build_graph,
    hungarian,
    min_cost_assignment,
    stable_after_join,
    to_dot,
)
from flexshare.generators import generate_synthetic
from flexshare.model import DeploymentState, Scenario, Service, Vm, Vnf


def brute_min_assignment(cost: np.ndarray) -> float:
    n, m = cost.shape
    best = np.inf
    for perm in itertools.permutations(range(m), n):
        total = sum(cost[i, j] for i, j in enumerate(perm))
        best = min(best, total)
    return best


class TestMinCostAssignment:
    def test_single_cell(self):
        cols, total = min_cost_assignment(np.array([[9.0]]))
        assert list(cols) == [0]
        assert total == 9.0

    def test_three_by_three(self):
        cost = np.array([[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]])
        cols, total = min_cost_assignment(cost)
        assert total == pytest.approx(5.0)
        assert sorted(cols) == [0, 1, 2]

    def test_missing_edges_infeasible(self):
        cost = np.array([[np.inf, np.inf], [1.0, 2.0]])
        with pytest.raises(MatchingInfeasibleError):
            min_cost_assignment(cost)

    def test_missing_edges_avoided_when_possible(self):
        cost = np.array([[np.inf, 1.0], [1.0, np.inf]])
        cols, total = min_cost_assignment(cost)
        assert list(cols) == [1, 0]
        assert total == pytest.approx(2.0)

    def test_rectangular_uses_spare_columns(self):
        cost = np.array([[10.0, 1.0, 5.0, 2.0]])
        cols, total = min_cost_assignment(cost)
        assert list(cols) == [1]
        assert total == pytest.approx(1.0)

    def test_matches_brute_force_on_random_instances(self):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(404)))
        for _ in range(100):
            n = int(rng.integers(2, 7))
            m = int(rng.integers(n, 7))
            cost = rng.uniform(0, 100, size=(n, m))
            _, total = min_cost_assignment(cost)
            assert total == pytest.approx(brute_min_assignment(cost), abs=1e-9)

    def test_deterministic(self):
        cost = np.array([[1.0, 1.0], [1.0, 1.0]])
        first = min_cost_assignment(cost)
        second = min_cost_assignment(cost)
        assert list(first[0]) == list(second[0])


def tiny_scenario(cap_small=3.0):
    vms = {
        "m1": Vm(id="m1", max_capability=10.0, fixed_cost=8.0, proportional_cost=0.5),
        "m2": Vm(id="m2", max_capability=cap_small, fixed_cost=8.0, proportional_cost=0.5),
    }
    vnfs = {"v1": Vnf(id="v1", load_coefficient=1e-3), "v2": Vnf(id="v2", load_coefficient=1e-3)}
    services = {
        "s1": Service(id="s1", arrival_rates={"v1": 2000.0}, max_delay=0.01),
        "s2": Service(id="s2", arrival_rates={"v1": 2000.0, "v2": 1000.0}, max_delay=0.01),
    }
    sc = Scenario(vms=vms, vnfs=vnfs, services=services)
    sc.validate()
    return sc


class TestBuildGraph:
    def test_fresh_vm_edge_cost(self):
        sc = generate_synthetic(1.0, seed=3)
        graph = build_graph("s3", DeploymentState(), sc)
        # lambda(s3, v3) = 2000/s, l = 1e-3 -> extra capability 2.0
        cost = graph.edges[("v3", "m1")]
        assert cost == pytest.approx(8.0 + 0.5 * (2.0 + EDGE_COST_EPSILON), abs=1e-12)

    def test_shared_edge_skips_activation(self):
        sc = tiny_scenario()
        state = DeploymentState(
            placement={"m1": "v1"}, usage={("s1", "v1", "m1")}, capabilities={"m1": 5.0}
        )
        graph = build_graph("s2", state, sc)
        assert graph.edges[("v1", "m1")] == pytest.approx(
            0.5 * (2.0 + EDGE_COST_EPSILON), abs=1e-12
        )

    def test_overloaded_shared_edge_absent(self):
        sc = tiny_scenario(cap_small=3.0)
        state = DeploymentState(
            placement={"m2": "v1"}, usage={("s1", "v1", "m2")}, capabilities={"m2": 3.0}
        )
        graph = build_graph("s2", state, sc)
        # joint load 4.0 >= C(m2)=3.0, so sharing m2 is not offered
        assert ("v1", "m2") not in graph.edges
        assert ("v1", "m1") in graph.edges

    def test_occupied_vm_not_offered_for_other_vnfs(self):
        sc = tiny_scenario()
        state = DeploymentState(
            placement={"m1": "v1"}, usage={("s1", "v1", "m1")}, capabilities={"m1": 5.0}
        )
        graph = build_graph("s2", state, sc)
        assert ("v2", "m1") not in graph.edges
        assert ("v2", "m2") in graph.edges

    def test_no_candidate_raises(self):
        sc = tiny_scenario(cap_small=1.0)
        state = DeploymentState(
            placement={"m1": "v2"}, usage={("s1", "v2", "m1")}, capabilities={"m1": 5.0}
        )
        # m1 busy with v2, m2 too small for s2's 2.0 load on v1
        svc = dict(sc.services)
        svc["s1"] = Service(id="s1", arrival_rates={"v2": 1000.0}, max_delay=0.01)
        sc = Scenario(vms=sc.vms, vnfs=sc.vnfs, services=svc)
        with pytest.raises(NoCandidateError) as exc:
            build_graph("s2", state, sc)
        assert exc.value.vnf == "v1"

    def test_deterministic_rebuild(self):
        sc = generate_synthetic(1.0, seed=3)
        g1 = build_graph("s1", DeploymentState(), sc)
        g2 = build_graph("s1", DeploymentState(), sc)
        assert g1.edges == g2.edges
        assert g1.vnf_nodes == g2.vnf_nodes

    @settings(max_examples=30, deadline=None)
    @given(
        n=st.floats(0.5, 4.0),
        seed=st.integers(0, 1000),
        service=st.sampled_from(["s1", "s2", "s3"]),
    )
    def test_every_edge_is_stable(self, n, seed, service):
        sc = generate_synthetic(n, seed=seed)
        try:
            graph = build_graph(service, DeploymentState(), sc)
        except NoCandidateError:
            return
        for v, m in graph.edges:
            assert stable_after_join(v, m, service, DeploymentState(), sc)
            load = sc.vnf(v).load_coefficient * sc.rate(service, v)
            assert load < sc.vm(m).max_capability


class TestHungarianOnGraph:
    def test_prefers_sharing_over_activation(self):
        sc = tiny_scenario()
        state = DeploymentState(
            placement={"m1": "v1"}, usage={("s1", "v1", "m1")}, capabilities={"m1": 5.0}
        )
        graph = build_graph("s2", state, sc)
        assignment = hungarian(graph)
        assert assignment.pairs["v1"] == "m1"  # share, avoid second activation
        assert assignment.pairs["v2"] == "m2"

    def test_pruned_edge_is_not_used(self):
        sc = tiny_scenario()
        state = DeploymentState(
            placement={"m1": "v1"}, usage={("s1", "v1", "m1")}, capabilities={"m1": 5.0}
        )
        graph = build_graph("s2", state, sc)
        graph.prune("v1", "m1")
        with pytest.raises(MatchingInfeasibleError):
            # v1 and v2 now both need fresh VMs but only m2 is free
            hungarian(graph)

    def test_graph_total_matches_edge_sum(self):
        sc = generate_synthetic(1.0, seed=9)
        graph = build_graph("s1", DeploymentState(), sc)
        assignment = hungarian(graph)
        total = sum(graph.edges[(v, m)] for v, m in assignment.pairs.items())
        assert assignment.total_cost == pytest.approx(total, rel=1e-12)


class TestApplyAssignment:
    def test_fresh_vms_add_placements(self):
        sc = generate_synthetic(1.0, seed=9)
        graph = build_graph("s1", DeploymentState(), sc)
        assignment = hungarian(graph)
        state = apply_assignment(assignment, "s1", DeploymentState())
        assert len(state.placement) == 3
        assert len(state.usage) == 3

    def test_shared_instance_keeps_placement_count(self):
        sc = tiny_scenario()
        before = DeploymentState(
            placement={"m1": "v1"}, usage={("s1", "v1", "m1")}, capabilities={"m1": 5.0}
        )
        graph = build_graph("s2", before, sc)
        assignment = hungarian(graph)
        after = apply_assignment(assignment, "s2", before)
        assert len(after.placement) == 2  # m1 reused for v1, m2 fresh for v2
        assert ("s2", "v1", "m1") in after.usage
        assert len(before.usage) == 1  # input untouched

    def test_conflicting_assignment_rejected(self):
        from flexshare.assignment import Assignment

        state = DeploymentState(placement={"m1": "v1"}, usage=set())
        with pytest.raises(ValueError):
            apply_assignment(Assignment(pairs={"v2": "m1"}, total_cost=0.0), "s", state)


def test_dot_dump_mentions_every_edge():
    sc = generate_synthetic(1.0, seed=9)
    graph = build_graph("s1", DeploymentState(), sc)
    graph.prune("v1", "m1")
    dot = to_dot(graph)
    assert dot.startswith('graph "s1"')
    assert dot.count(" -- ") == len(graph.edges) + 1
    assert "pruned" in dot
