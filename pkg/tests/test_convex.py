import dataclasses
import itertools

import numpy as np
import pytest

from flexshare import convex, queueing
from flexshare.convex import (
    DelayReport,
    ScalingSolution,
    averaging_factor,
    build_mu_problem,
    build_problem,
    extract_iis,
    is_feasible_subset,
    per_service_priorities,
    problem_debug_dict,
    realize_priorities,
    solve,
    verify_realization,
)
from flexshare.model import DeploymentState, PrioritySpec, Scenario, Service, Vm, Vnf
from conftest import make_video_scenario, make_video_state

MS = 1e-3


def chain_scenario(
    dmax=1.0 / 3.0 * MS,
    cap=10.0,
    rate=2000.0,
    kf=8.0,
    kp=0.5,
    scheme="per-vnf",
    avg_mode="self-excluded",
):
    sc = Scenario(
        vms={"m1": Vm(id="m1", max_capability=cap, fixed_cost=kf, proportional_cost=kp)},
        vnfs={"v1": Vnf(id="v1", load_coefficient=1e-3)},
        services={"s1": Service(id="s1", arrival_rates={"v1": rate}, max_delay=dmax)},
        priority_scheme=scheme,
        averaging_factor_mode=avg_mode,
    )
    sc.validate()
    return sc


def chain_state():
    return DeploymentState(placement={"m1": "v1"}, usage={("s1", "v1", "m1")})


def shared_pair_scenario(avg_mode="self-excluded", rate1=1000.0, rate2=1000.0,
                         dmax1=5e-3, dmax2=5e-3, cap=10.0):
    sc = Scenario(
        vms={"m1": Vm(id="m1", max_capability=cap, fixed_cost=8.0, proportional_cost=0.5)},
        vnfs={"v1": Vnf(id="v1", load_coefficient=1e-3)},
        services={
            "s1": Service(id="s1", arrival_rates={"v1": rate1}, max_delay=dmax1),
            "s2": Service(id="s2", arrival_rates={"v1": rate2}, max_delay=dmax2),
        },
        averaging_factor_mode=avg_mode,
    )
    sc.validate()
    return sc


def shared_pair_state():
    return DeploymentState(
        placement={"m1": "v1"},
        usage={("s1", "v1", "m1"), ("s2", "v1", "m1")},
    )


class TestBuildProblem:
    def test_single_service_instance_pins_zero(self):
        p = build_problem(chain_state(), chain_scenario())
        assert p.n_lt == 0
        (u,) = p.usages
        assert u.lt_fixed == 0.0

    def test_single_service_paper_literal_pins_half(self):
        p = build_problem(chain_state(), chain_scenario(avg_mode="paper-literal"))
        (u,) = p.usages
        assert u.lt_fixed == pytest.approx(1000.0)  # rate/2

    def test_pair_paper_literal_target(self):
        p = build_problem(shared_pair_state(), shared_pair_scenario("paper-literal"))
        (inst,) = p.instances
        assert inst.target == pytest.approx(2000.0)

    def test_pair_self_excluded_target(self):
        p = build_problem(shared_pair_state(), shared_pair_scenario())
        (inst,) = p.instances
        assert inst.target == pytest.approx(1000.0)

    def test_averaging_factor_values(self):
        assert averaging_factor(1, "self-excluded") == 0.0
        assert averaging_factor(2, "self-excluded") == 0.5
        assert averaging_factor(2, "paper-literal") == 1.0
        assert averaging_factor(3, "paper-literal") == 1.5


class TestSolve:
    def test_closed_form_capability(self):
        # delay target 1/3 ms with own rate 2/ms forces mu/l - rate = 3/ms
        sol = solve(build_problem(chain_state(), chain_scenario()))
        assert sol.status == "optimal"
        assert sol.mu["m1"] == pytest.approx(5.0, abs=1e-6)
        assert sol.objective_value == pytest.approx(8.0 + 0.5 * 5.0, abs=1e-5)
        assert sol.kkt_residual is not None and sol.kkt_residual < 1e-8

    def test_infeasible_when_cap_too_small(self):
        # best achievable at mu=C=10 is 1/(10/ms - 2/ms) = 0.125 ms
        sol = solve(build_problem(chain_state(), chain_scenario(dmax=1e-4)))
        assert sol.status == "infeasible"
        assert ("capacity", "m1") in sol.iis

    def test_flat_objective_accepts_any_feasible(self):
        sol = solve(build_problem(chain_state(), chain_scenario(kp=0.0)))
        assert sol.status == "optimal"
        assert sol.objective_value == pytest.approx(8.0)

    def test_two_variable_grid_agreement(self):
        sc = shared_pair_scenario(rate1=1000.0, rate2=1500.0, dmax1=2e-3, dmax2=1.5e-3)
        p = build_problem(shared_pair_state(), sc)
        assert p.n_mu == 1 and p.n_lt == 2  # one equality leaves 2 dof
        sol = solve(p)
        assert sol.status == "optimal"

        # independent oracle: dense grid over (mu, lt1) with lt2 following
        # from the pinned total, refined around the coarse minimum
        target = p.instances[0].target
        l = 1e-3

        def grid_best(mu_lo, mu_hi, lt_lo, lt_hi, steps):
            mu = np.linspace(mu_lo, mu_hi, steps)[:, None]
            lt1 = np.linspace(lt_lo, lt_hi, steps)[None, :]
            lt2 = target - lt1
            feas = (lt2 >= 0) & (lt2 <= 1000.0) & (l * 2500.0 <= (1 - 1e-6) * mu)
            for lam, lt, dmax in ((1000.0, lt1, 2e-3), (1500.0, lt2, 1.5e-3)):
                stable = l * (lt + lam) <= (1 - 1e-6) * mu
                s = np.where(
                    stable,
                    (l / mu) / ((1 - l * lt / mu) * (1 - l * (lt + lam) / mu)),
                    np.inf,
                )
                feas &= stable & (s <= dmax)
            cost = np.where(feas, 8.0 + 0.5 * mu, np.inf)
            i, j = np.unravel_index(np.argmin(cost), cost.shape)
            return float(cost[i, j]), float(mu[i, 0]), float(lt1[0, j])

        best, mu_c, lt_c = grid_best(2.51, 10.0, 0.0, min(target, 1500.0), 800)
        d_mu, d_lt = 7.49 / 799 * 2, min(target, 1500.0) / 799 * 2
        best, _, _ = grid_best(
            max(2.51, mu_c - d_mu), mu_c + d_mu,
            max(0.0, lt_c - d_lt), min(min(target, 1500.0), lt_c + d_lt), 700,
        )
        assert sol.objective_value == pytest.approx(best, rel=1e-4)

    def test_deterministic_resolve(self):
        p1 = solve(build_problem(shared_pair_state(), shared_pair_scenario()))
        p2 = solve(build_problem(shared_pair_state(), shared_pair_scenario()))
        assert p1.mu == p2.mu
        assert p1.lambda_tilde == p2.lambda_tilde

    def test_empty_problem(self):
        sol = solve(build_problem(DeploymentState(), chain_scenario()))
        assert sol.status == "optimal"
        assert sol.objective_value == 0.0


class TestIis:
    def test_single_overload_names_capacity(self):
        p = build_problem(chain_state(), chain_scenario(dmax=1e-4))
        iis = extract_iis(p)
        assert ("capacity", "m1") in iis
        assert ("delay", "s1") in iis

    def test_feasible_problem_refuses(self):
        with pytest.raises(ValueError):
            extract_iis(build_problem(chain_state(), chain_scenario()))

    def test_iis_is_irreducible(self):
        p = build_problem(chain_state(), chain_scenario(dmax=1e-4))
        iis = extract_iis(p)
        assert not is_feasible_subset(p, iis)
        for c in iis:
            assert is_feasible_subset(p, [k for k in iis if k != c])

    def test_overtight_chain_blames_only_its_vms(self):
        # two disjoint single-service chains; only s1's is impossible
        sc = Scenario(
            vms={
                "m1": Vm(id="m1", max_capability=4.0, fixed_cost=8.0, proportional_cost=0.5),
                "m2": Vm(id="m2", max_capability=4.0, fixed_cost=8.0, proportional_cost=0.5),
                "m3": Vm(id="m3", max_capability=9.0, fixed_cost=8.0, proportional_cost=0.5),
            },
            vnfs={v: Vnf(id=v, load_coefficient=1e-3) for v in ("v1", "v2", "v3")},
            services={
                # two queues at C=4 cannot beat 2 * 1/(4000-2000) = 1 ms
                "s1": Service(id="s1", arrival_rates={"v1": 2000.0, "v2": 2000.0},
                              max_delay=0.9e-3),
                "s2": Service(id="s2", arrival_rates={"v3": 2000.0}, max_delay=5e-3),
            },
        )
        sc.validate()
        state = DeploymentState(
            placement={"m1": "v1", "m2": "v2", "m3": "v3"},
            usage={("s1", "v1", "m1"), ("s1", "v2", "m2"), ("s2", "v3", "m3")},
        )
        p = build_problem(state, sc)
        sol = solve(p)
        assert sol.status == "infeasible"
        for order in (extract_iis(p), tuple(reversed(extract_iis(p)))):
            capped = {c[1] for c in order if c[0] == "capacity"}
            assert capped and capped <= {"m1", "m2"}

    def test_theorem_style_capacity_presence_small_corpus(self):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(5150)))
        found = 0
        attempts = 0
        while found < 10 and attempts < 200:
            attempts += 1
            cap = float(rng.uniform(2.5, 5.0))
            rate1 = float(rng.uniform(500, 1500))
            rate2 = float(rng.uniform(500, 1500))
            dmax = float(rng.uniform(0.3, 1.2)) * MS
            sc = shared_pair_scenario(rate1=rate1, rate2=rate2, dmax1=dmax,
                                      dmax2=dmax, cap=cap)
            p = build_problem(shared_pair_state(), sc)
            sol = solve(p)
            if sol.status != "infeasible":
                continue
            found += 1
            assert any(c[0] == "capacity" for c in sol.iis)
        assert found == 10


class TestRealizePriorities:
    def test_per_vnf_order_inverts_rates(self):
        sol = ScalingSolution(
            status="optimal", mu={"m1": 5.0},
            lambda_tilde={("s1", "v1"): 0.0, ("s2", "v1"): 2000.0},
            objective_value=0.0,
        )
        spec = realize_priorities(sol, shared_pair_state(), shared_pair_scenario())
        assert spec.scheme == "per-vnf"
        assert spec.priority("s1", "v1") > spec.priority("s2", "v1")

    def test_per_vnf_preserves_order_property(self):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(77)))
        state = shared_pair_state()
        sc = shared_pair_scenario()
        for _ in range(50):
            lt = rng.uniform(0, 1000, size=2)
            sol = ScalingSolution(
                status="optimal", mu={"m1": 5.0},
                lambda_tilde={("s1", "v1"): lt[0], ("s2", "v1"): lt[1]},
                objective_value=0.0,
            )
            spec = realize_priorities(sol, state, sc)
            if lt[0] < lt[1]:
                assert spec.priority("s1", "v1") > spec.priority("s2", "v1")
            elif lt[1] < lt[0]:
                assert spec.priority("s2", "v1") > spec.priority("s1", "v1")

    def test_per_request_symmetric_targets_equal_centers(self):
        sc = dataclasses.replace(shared_pair_scenario(), priority_scheme="per-request",
                                 jitter=1.0)
        sol = ScalingSolution(
            status="optimal", mu={"m1": 5.0},
            lambda_tilde={("s1", "v1"): 500.0, ("s2", "v1"): 500.0},
            objective_value=0.0,
        )
        spec = realize_priorities(sol, shared_pair_state(), sc)
        assert spec.center("s1", "v1") == pytest.approx(spec.center("s2", "v1"), abs=1e-9)
        # realized overtaking probability is one half
        q = queueing.overtake_probability(
            spec.center("s1", "v1"), spec.center("s2", "v1"), 1.0
        )
        assert q == pytest.approx(0.5)

    def test_per_request_strict_ladder(self):
        # three services, equal rates; targets demand a strict ordering
        sc = Scenario(
            vms={"m1": Vm(id="m1", max_capability=10.0, fixed_cost=8.0, proportional_cost=0.5)},
            vnfs={"v1": Vnf(id="v1", load_coefficient=1e-3)},
            services={
                s: Service(id=s, arrival_rates={"v1": 1000.0}, max_delay=5e-3)
                for s in ("s1", "s2", "s3")
            },
            priority_scheme="per-request",
            jitter=0.5,
        )
        sc.validate()
        state = DeploymentState(
            placement={"m1": "v1"},
            usage={(s, "v1", "m1") for s in ("s1", "s2", "s3")},
        )
        # targets of a strict ordering: top sees 0, middle 1000, bottom 2000
        sol = ScalingSolution(
            status="optimal", mu={"m1": 8.0},
            lambda_tilde={("s1", "v1"): 0.0, ("s2", "v1"): 1000.0, ("s3", "v1"): 2000.0},
            objective_value=0.0,
        )
        spec = realize_priorities(sol, state, sc)
        r1, r2, r3 = (spec.center(s, "v1") for s in ("s1", "s2", "s3"))
        assert r1 > r2 > r3
        # strict separation needs at least the full window per pair
        assert r1 - r2 >= 2 * 0.5 - 1e-9
        assert r2 - r3 >= 2 * 0.5 - 1e-9
        j = 0.5
        realized = {
            s: queueing.higher_priority_rate_per_request(
                s, "v1", spec, {"s1": 1000.0, "s2": 1000.0, "s3": 1000.0}
            )
            for s in ("s1", "s2", "s3")
        }
        assert realized["s1"] == pytest.approx(0.0, abs=1e-6)
        assert realized["s2"] == pytest.approx(1000.0, rel=1e-9)
        assert realized["s3"] == pytest.approx(2000.0, rel=1e-9)

    def test_jitter_scale_invariance(self):
        sol = ScalingSolution(
            status="optimal", mu={"m1": 5.0},
            lambda_tilde={("s1", "v1"): 200.0, ("s2", "v1"): 800.0},
            objective_value=0.0,
        )
        state = shared_pair_state()
        qs = []
        for j in (0.05, 0.5):
            sc = dataclasses.replace(shared_pair_scenario(), priority_scheme="per-request",
                                     jitter=j)
            spec = realize_priorities(sol, state, sc)
            qs.append(
                queueing.overtake_probability(
                    spec.center("s1", "v1"), spec.center("s2", "v1"), j
                )
            )
        assert qs[0] == pytest.approx(qs[1], abs=1e-12)

    def test_per_service_ranking(self):
        sc = shared_pair_scenario(dmax1=20e-3, dmax2=5e-3)
        spec = per_service_priorities(shared_pair_state(), sc)
        assert spec.priority("s2", "v1") > spec.priority("s1", "v1")


class TestVerifyRealization:
    def test_flexible_video_slacks(self):
        from conftest import video_priorities

        sc = make_video_scenario()
        state = make_video_state()
        report = verify_realization(video_priorities("flexible"), state, sc)
        assert report.feasible
        d1 = (1.0 / 3.0 + 0.625 + 1.0 / 7.15) * MS
        d2 = (0.2 / 0.24 + 0.25) * MS
        assert report.rows["s1"].slack == pytest.approx(1.1 * MS - d1, abs=1e-12)
        assert report.rows["s2"].slack == pytest.approx(1.1 * MS - d2, abs=1e-12)

    def test_single_service_alone(self):
        state = chain_state()
        state.capabilities = {"m1": 5.0}
        spec = PrioritySpec(scheme="per-vnf", deterministic={("s1", "v1"): 0.0})
        report = verify_realization(spec, state, chain_scenario(dmax=1e-3))
        assert report.realized_higher_rates[("s1", "v1")] == 0.0
        assert report.rows["s1"].delay == pytest.approx(1.0 / 3.0 * MS)

    def test_violation_flagged(self):
        from conftest import video_priorities

        sc = make_video_scenario()
        state = make_video_state()
        report = verify_realization(video_priorities("s1-first"), state, sc)
        assert not report.feasible
        assert not report.rows["s2"].feasible
        assert report.rows["s1"].feasible


def test_debug_dump_roundtrips_to_json():
    import json

    p = build_problem(shared_pair_state(), shared_pair_scenario())
    sol = solve(p)
    doc = problem_debug_dict(p, sol)
    text = json.dumps(doc)
    assert "lambda_tilde" in text
    assert doc["status"] == "optimal"
