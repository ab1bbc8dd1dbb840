"""Discrete-event validation of the analytic queueing model.

Each deployed VNF instance is simulated as an independent preemptive-
resume priority M/M/1 queue: Poisson arrivals per service stream,
exponential service at rate capability / load-coefficient, priorities
either fixed per (service, VNF) or drawn per request from the service's
uniform window.  Equal priorities are served in arrival order and do not
preempt each other.  End-to-end service delay is reported as the sum of
the service's per-queue means, matching the additive definition used by
the analytic model (streams are independent by construction, so no token
routing is simulated).

Randomness comes from counter-based Philox streams keyed by (seed, queue,
class, purpose), so runs are reproducible across platforms.  The event
loop is JIT-compiled with numba when available.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import queueing
from .model import DeploymentState, PrioritySpec, Scenario
from .queueing import InstabilityError

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(fn):
            return fn

        return wrap


MIN_HORIZON = 10_000
_N_BATCHES = 50


@dataclass(frozen=True)
class SimConfig:
    state: DeploymentState
    scenario: Scenario
    horizon: int  # completed requests per class at every queue
    seed: int
    warmup_fraction: float = 0.1

    def validate(self) -> None:
        if self.horizon < MIN_HORIZON:
            raise ValueError(f"horizon must be >= {MIN_HORIZON}")
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must be in [0, 1)")


@dataclass(frozen=True)
class QueueStat:
    mean_sojourn: float
    std_error: float
    completions: int


@dataclass(frozen=True)
class SimReport:
    per_queue: dict[tuple[str, str, str], QueueStat]  # (service, vnf, vm)
    per_service: dict[str, tuple[float, float]]  # mean end-to-end delay, se
    per_vm_utilization: dict[str, float]
    horizon: int
    seed: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "horizon": self.horizon,
                "seed": self.seed,
                "per_queue": [
                    {
                        "service": s, "vnf": v, "vm": m,
                        "mean_sojourn": st.mean_sojourn,
                        "std_error": st.std_error,
                        "completions": st.completions,
                    }
                    for (s, v, m), st in sorted(self.per_queue.items())
                ],
                "per_service": [
                    {"service": s, "mean_delay": d, "std_error": e}
                    for s, (d, e) in sorted(self.per_service.items())
                ],
                "per_vm_utilization": dict(sorted(self.per_vm_utilization.items())),
            },
            indent=2,
        )

    def to_csv_rows(self) -> list[list]:
        rows: list[list] = [["service", "vnf", "vm", "mean_sojourn", "std_error", "completions"]]
        for (s, v, m), st in sorted(self.per_queue.items()):
            rows.append([s, v, m, st.mean_sojourn, st.std_error, st.completions])
        return rows


@njit(cache=True)
def _heap_push(heap, heap_n, idx, prio):
    i = heap_n
    heap[i] = idx
    while i > 0:
        parent = (i - 1) // 2
        a, b = heap[i], heap[parent]
        if prio[a] > prio[b] or (prio[a] == prio[b] and a < b):
            heap[i], heap[parent] = heap[parent], heap[i]
            i = parent
        else:
            break
    return heap_n + 1


@njit(cache=True)
def _heap_pop(heap, heap_n, prio):
    top = heap[0]
    heap_n -= 1
    heap[0] = heap[heap_n]
    i = 0
    while True:
        l = 2 * i + 1
        r = l + 1
        best = i
        if l < heap_n:
            a, b = heap[l], heap[best]
            if prio[a] > prio[b] or (prio[a] == prio[b] and a < b):
                best = l
        if r < heap_n:
            a, b = heap[r], heap[best]
            if prio[a] > prio[b] or (prio[a] == prio[b] and a < b):
                best = r
        if best == i:
            break
        heap[i], heap[best] = heap[best], heap[i]
        i = best
    return top, heap_n


@njit(cache=True)
def _run_queue(inter, work, prio_draw, starts, counts, n_target, n_warm, n_batches):
    """Preemptive-resume priority queue fed by pre-drawn randomness.

    The flat arrays hold per-class interarrival gaps, service demands
    (seconds of server time) and priorities; class k owns the slice
    [starts[k], starts[k] + counts[k]).  Collects per-class sojourn
    statistics for completions n_warm+1 .. n_target, plus server busy
    time.  Returns (sums, sumsq, batch sums, batch counts, completions,
    busy_time, end_time, exhausted_flag); the flag reports a class whose
    draws ran out before it reached the horizon.
    """
    K = len(starts)
    used_n = n_target - n_warm
    next_arr = np.empty(K)
    ptr = np.zeros(K, np.int64)
    for k in range(K):
        next_arr[k] = inter[starts[k]]
    total_cap = len(inter)
    rec_arr = np.empty(total_cap)
    rec_rem = np.empty(total_cap)
    rec_prio = np.empty(total_cap)
    rec_cls = np.empty(total_cap, np.int64)
    n_rec = 0
    heap = np.empty(total_cap, np.int64)
    heap_n = 0
    cur = -1
    cur_done = 0.0
    span_start = 0.0
    busy = 0.0
    completions = np.zeros(K, np.int64)
    sums = np.zeros(K)
    sumsq = np.zeros(K)
    batch_sum = np.zeros((K, n_batches))
    batch_cnt = np.zeros((K, n_batches), np.int64)
    pending = K
    t = 0.0
    exhausted = False
    while pending > 0:
        k_min = -1
        t_arr = np.inf
        for k in range(K):
            if next_arr[k] < t_arr:
                t_arr = next_arr[k]
                k_min = k
        if cur >= 0 and cur_done <= t_arr:
            t = cur_done
            busy += t - span_start
            k = rec_cls[cur]
            completions[k] += 1
            c = completions[k]
            if c > n_warm and c <= n_target:
                sj = t - rec_arr[cur]
                sums[k] += sj
                sumsq[k] += sj * sj
                b = (c - n_warm - 1) * n_batches // used_n
                batch_sum[k, b] += sj
                batch_cnt[k, b] += 1
                if c == n_target:
                    pending -= 1
            if heap_n > 0:
                cur, heap_n = _heap_pop(heap, heap_n, rec_prio)
                span_start = t
                cur_done = t + rec_rem[cur]
            else:
                cur = -1
        else:
            if k_min < 0:
                exhausted = True
                break
            t = t_arr
            src = starts[k_min] + ptr[k_min]
            idx = n_rec
            n_rec += 1
            rec_arr[idx] = t
            rec_rem[idx] = work[src]
            rec_prio[idx] = prio_draw[src]
            rec_cls[idx] = k_min
            ptr[k_min] += 1
            if ptr[k_min] < counts[k_min]:
                next_arr[k_min] = t + inter[src + 1]
            else:
                next_arr[k_min] = np.inf
                if completions[k_min] < n_target:
                    exhausted = True
            if cur < 0:
                cur = idx
                span_start = t
                cur_done = t + rec_rem[idx]
            elif rec_prio[idx] > rec_prio[cur]:
                busy += t - span_start
                rec_rem[cur] = cur_done - t
                heap_n = _heap_push(heap, heap_n, cur, rec_prio)
                cur = idx
                span_start = t
                cur_done = t + rec_rem[idx]
            else:
                heap_n = _heap_push(heap, heap_n, idx, rec_prio)
        if exhausted:
            break
    return sums, sumsq, batch_sum, batch_cnt, completions, busy, t, exhausted


def _class_priorities(
    spec: PrioritySpec, s: str, v: str, n: int, rng: np.random.Generator
) -> np.ndarray:
    if spec.scheme == "per-request":
        assert spec.jitter is not None
        r = spec.center(s, v)
        return rng.uniform(r - spec.jitter, r + spec.jitter, size=n)
    return np.full(n, spec.priority(s, v))


MAX_TOTAL_DRAWS = 64_000_000  # per queue, across classes


def simulate(cfg: SimConfig) -> SimReport:
    """Simulate every deployed instance and aggregate per-service delays."""
    cfg.validate()
    state, scenario = cfg.state, cfg.scenario
    spec = state.priorities
    if spec is None:
        raise ValueError("deployment state carries no priorities")
    n_warm = int(cfg.horizon * cfg.warmup_fraction)
    n_total = cfg.horizon

    per_queue: dict[tuple[str, str, str], QueueStat] = {}
    per_vm_util: dict[str, float] = {}
    instances = state.instances()
    for q_index, ((v, m), services) in enumerate(sorted(instances.items())):
        classes = [s for s in services if scenario.rate(s, v) > 0]
        mu = state.capabilities[m]
        l = scenario.vnf(v).load_coefficient
        total_load = sum(l * scenario.rate(s, v) for s in classes)
        if not total_load < mu * (1 - queueing.STABILITY_MARGIN):
            raise InstabilityError(
                f"instance {v}@{m} offered load {total_load:.6g} vs capability {mu:.6g}",
                vm=m,
            )
        # the run lasts until the slowest class reaches the horizon, so a
        # faster class consumes proportionally more draws
        rates = np.array([scenario.rate(s, v) for s in classes])
        ratios = rates / rates.min()
        counts = np.array(
            [
                int(math.ceil(n_total * r + 10 * math.sqrt(n_total * r) + 1000))
                for r in ratios
            ],
            dtype=np.int64,
        )
        if int(counts.sum()) > MAX_TOTAL_DRAWS:
            raise RuntimeError(
                f"instance {v}@{m}: rate spread needs {int(counts.sum())} draws; "
                f"lower the horizon"
            )
        starts = np.zeros(len(classes), dtype=np.int64)
        starts[1:] = np.cumsum(counts)[:-1]
        total = int(counts.sum())
        inter = np.empty(total)
        work = np.empty(total)
        prio = np.empty(total)
        for ci, s in enumerate(classes):
            streams = [
                np.random.Generator(
                    np.random.Philox(
                        np.random.SeedSequence(cfg.seed, spawn_key=(q_index, ci, p))
                    )
                )
                for p in range(3)
            ]
            lam = scenario.rate(s, v)
            lo, hi = int(starts[ci]), int(starts[ci] + counts[ci])
            inter[lo:hi] = streams[0].exponential(1.0 / lam, size=hi - lo)
            work[lo:hi] = streams[1].exponential(l / mu, size=hi - lo)
            prio[lo:hi] = _class_priorities(spec, s, v, hi - lo, streams[2])
        sums, sumsq, bsum, bcnt, comps, busy, t_end, exhausted = _run_queue(
            inter, work, prio, starts, counts, n_total, n_warm, _N_BATCHES
        )
        if exhausted:
            raise RuntimeError(
                f"instance {v}@{m}: random draw budget exhausted before the horizon"
            )
        for ci, s in enumerate(classes):
            used = n_total - n_warm
            mean = sums[ci] / used
            means = bsum[ci] / np.maximum(bcnt[ci], 1)
            se = float(np.std(means, ddof=1) / math.sqrt(_N_BATCHES))
            per_queue[(s, v, m)] = QueueStat(
                mean_sojourn=float(mean), std_error=se, completions=int(comps[ci])
            )
        per_vm_util[m] = float(busy / t_end) if t_end > 0 else 0.0

    per_service: dict[str, tuple[float, float]] = {}
    for s in state.admitted_services():
        total = 0.0
        var = 0.0
        for v in scenario.service(s).used_vnfs():
            m = state.instance_of(s, v)
            st = per_queue[(s, v, m)]
            total += st.mean_sojourn
            var += st.std_error**2
        per_service[s] = (total, math.sqrt(var))
    return SimReport(
        per_queue=per_queue,
        per_service=per_service,
        per_vm_utilization=per_vm_util,
        horizon=cfg.horizon,
        seed=cfg.seed,
    )


@dataclass(frozen=True)
class DeviationRow:
    service: str
    vnf: str | None  # None for the end-to-end row
    vm: str | None
    simulated: float
    analytic: float
    relative_deviation: float
    flagged: bool


def compare_to_analytic(
    report: SimReport,
    state: DeploymentState,
    scenario: Scenario,
    threshold: float = 0.02,
) -> list[DeviationRow]:
    """Relative deviation of every simulated mean from the analytic model
    at the same capabilities and priorities; zero-rate streams are
    omitted.  Rows beyond ``threshold`` are flagged."""
    rows: list[DeviationRow] = []
    for (s, v, m), st in sorted(report.per_queue.items()):
        if scenario.rate(s, v) <= 0:
            continue
        q = queueing.queue_operands(s, v, m, state, scenario)
        analytic = queueing.sojourn_time(q, vm=m)
        dev = (st.mean_sojourn - analytic) / analytic
        rows.append(
            DeviationRow(
                service=s, vnf=v, vm=m, simulated=st.mean_sojourn,
                analytic=analytic, relative_deviation=dev,
                flagged=abs(dev) > threshold,
            )
        )
    for s, (delay, _se) in sorted(report.per_service.items()):
        analytic = queueing.service_delay(s, state, scenario)
        dev = (delay - analytic) / analytic if analytic > 0 else 0.0
        rows.append(
            DeviationRow(
                service=s, vnf=None, vm=None, simulated=delay,
                analytic=analytic, relative_deviation=dev,
                flagged=abs(dev) > threshold,
            )
        )
    return rows


def deviation_csv_rows(rows: list[DeviationRow]) -> list[list]:
    out: list[list] = [
        ["service", "vnf", "vm", "simulated", "analytic", "relative_deviation", "flagged"]
    ]
    for r in rows:
        out.append(
            [
                r.service, r.vnf or "", r.vm or "", r.simulated, r.analytic,
                r.relative_deviation, r.flagged,
            ]
        )
    return out
