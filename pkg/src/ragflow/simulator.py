"""Deterministic discrete-event simulation of a deployed pipeline."""

from __future__ import annotations

import heapq
import math
import random
import time as _time
from dataclasses import dataclass, field, replace

from .allocator import AllocationPlan, replan_with_extra
from .latency import GroundTruthLatency, eval_ground_truth
from .pipeline import CONDITIONAL, RECURSIVE, PipelineGraph, forward_order
from .scheduler import (
    ESCALATED,
    NORMAL,
    MitigationState,
    RunningAverageEstimator,
    mitigate,
    predict_violation,
    route,
)

# event ranks: completions free capacity before new work is placed
RANK_COMPLETE = 0
RANK_ARRIVAL = 1
RANK_RESUME = 2
RANK_DISPATCH = 3

IN_FLIGHT = "in_flight"
COMPLETED = "completed"
VIOLATED = "violated"


@dataclass
class ScenarioConfig:
    arrival_rate_rps: float = 1.0
    duration_s: float = 60.0
    slo_s: float = 10.0
    seed: int = 0
    query_len_mu: float = 4.0
    query_len_sigma: float = 0.5
    batch_timeout_s: float | None = None
    batching: bool = True
    pipelining: bool = True
    component_allocation: bool = True
    mitigation_enabled: bool = False
    autoscale_enabled: bool = False
    spare_pool: dict = field(default_factory=dict)
    cooldown_s: float = 5.0
    pause_margin_s: float = 0.0
    ewma_alpha: float = 0.1
    default_batch: int = 32
    arrival_process: str = "poisson"  # or "deterministic"
    noise: bool = True

    def to_dict(self):
        return {
            "arrival_rate_rps": self.arrival_rate_rps,
            "duration_s": self.duration_s,
            "slo_s": self.slo_s,
            "seed": self.seed,
            "query_len": {"mu": self.query_len_mu, "sigma": self.query_len_sigma},
            "batch_timeout_s": self.batch_timeout_s,
            "toggles": {
                "batching": self.batching,
                "pipelining": self.pipelining,
                "component_allocation": self.component_allocation,
            },
            "mitigation": {
                "enabled": self.mitigation_enabled,
                "autoscale": self.autoscale_enabled,
                "spare": dict(self.spare_pool),
                "cooldown_s": self.cooldown_s,
                "pause_margin_s": self.pause_margin_s,
                "alpha": self.ewma_alpha,
            },
            "default_batch": self.default_batch,
            "arrival_process": self.arrival_process,
            "noise": self.noise,
        }

    @classmethod
    def from_dict(cls, d):
        q = d.get("query_len", {})
        t = d.get("toggles", {})
        m = d.get("mitigation", {})
        return cls(
            arrival_rate_rps=float(d.get("arrival_rate_rps", 1.0)),
            duration_s=float(d.get("duration_s", 60.0)),
            slo_s=float(d.get("slo_s", 10.0)),
            seed=int(d.get("seed", 0)),
            query_len_mu=float(q.get("mu", 4.0)),
            query_len_sigma=float(q.get("sigma", 0.5)),
            batch_timeout_s=d.get("batch_timeout_s"),
            batching=bool(t.get("batching", True)),
            pipelining=bool(t.get("pipelining", True)),
            component_allocation=bool(t.get("component_allocation", True)),
            mitigation_enabled=bool(m.get("enabled", False)),
            autoscale_enabled=bool(m.get("autoscale", False)),
            spare_pool=dict(m.get("spare", {})),
            cooldown_s=float(m.get("cooldown_s", 5.0)),
            pause_margin_s=float(m.get("pause_margin_s", 0.0)),
            ewma_alpha=float(m.get("alpha", 0.1)),
            default_batch=int(d.get("default_batch", 32)),
            arrival_process=str(d.get("arrival_process", "poisson")),
            noise=bool(d.get("noise", True)),
        )


def toggle_features(scenario: ScenarioConfig, batching=None, pipelining=None,
                    component_allocation=None) -> ScenarioConfig:
    kw = {}
    if batching is not None:
        kw["batching"] = batching
    if pipelining is not None:
        kw["pipelining"] = pipelining
    if component_allocation is not None:
        kw["component_allocation"] = component_allocation
    return replace(scenario, **kw)


@dataclass
class Request:
    id: int
    arrival_time: float
    query_len: int
    slo_deadline: float
    trace: list = field(default_factory=list)
    priority: str = NORMAL
    status: str = IN_FLIGHT
    current_node: str | None = None
    in_service_until: float | None = None
    outstanding: int = 0
    completion_time: float | None = None


class _Item:
    __slots__ = ("request", "node", "depths", "enqueue_t", "seq")

    def __init__(self, request, node, depths=None):
        self.request = request
        self.node = node
        self.depths = depths or {}
        self.enqueue_t = 0.0
        self.seq = 0


class _Replica:
    __slots__ = ("kind", "limit", "busy_until", "busy_time", "intervals")

    def __init__(self, kind, limit):
        self.kind = kind
        self.limit = limit
        self.busy_until = 0.0
        self.busy_time = 0.0
        self.intervals = []


class _Station:
    def __init__(self, node_id):
        self.node_id = node_id
        self.replicas = []
        self.queue = []  # (seq, item); priority read from the request at dispatch
        self.queue_area = 0.0
        self.last_q_change = 0.0

    def note_queue(self, now):
        self.queue_area += len(self.queue) * (now - self.last_q_change)
        self.last_q_change = now


@dataclass
class MetricsReport:
    throughput: float
    goodput: float
    slo_violation_rate: float
    latency_p50: float
    latency_p95: float
    latency_p99: float
    arrivals: int
    completions: int
    violations: int
    in_flight_at_end: int
    buffered_at_end: int
    utilization: dict
    mean_queue_len: dict
    timeseries: list
    actions_log: list = field(default_factory=list)
    scheduler_calls: int = 0
    scheduler_wall_time_s: float = 0.0  # excluded from serialization

    def to_dict(self):
        return {
            "throughput": self.throughput,
            "goodput": self.goodput,
            "slo_violation_rate": self.slo_violation_rate,
            "latency_p50": self.latency_p50,
            "latency_p95": self.latency_p95,
            "latency_p99": self.latency_p99,
            "arrivals": self.arrivals,
            "completions": self.completions,
            "violations": self.violations,
            "in_flight_at_end": self.in_flight_at_end,
            "buffered_at_end": self.buffered_at_end,
            "utilization": self.utilization,
            "mean_queue_len": self.mean_queue_len,
            "timeseries": self.timeseries,
            "actions_log": self.actions_log,
            "scheduler_calls": self.scheduler_calls,
        }


def _quantile(sorted_vals, q):
    if not sorted_vals:
        return 0.0
    idx = min(int(math.ceil(q * len(sorted_vals))) - 1, len(sorted_vals) - 1)
    return sorted_vals[max(idx, 0)]


def generate_arrivals(rate, duration, seed, process="poisson"):
    """Arrival timestamps on [0, duration); deterministic from the seed."""
    rng = random.Random(seed)
    out = []
    t = 0.0
    while True:
        gap = rng.expovariate(rate) if process == "poisson" else 1.0 / rate
        t += gap
        if t >= duration:
            break
        out.append(t)
    return out


def _uniform_round_robin(graph, plan, max_batch, batching, default_batch):
    """Spread the plan's per-kind unit totals uniformly over affine nodes."""
    totals = {}
    for (nid, k), a in plan.replicas.items():
        totals[k] = totals.get(k, 0) + a
    order = forward_order(graph)
    replicas = {}
    for k in sorted(totals):
        eligible = [nid for nid in order if k in graph.nodes[nid].resource_affinity]
        if not eligible:
            continue
        for u in range(totals[k]):
            nid = eligible[u % len(eligible)]
            replicas[(nid, k)] = replicas.get((nid, k), 0) + 1
    stations = {}
    for nid in order:
        st = _Station(nid)
        for k in sorted(totals):
            count = replicas.get((nid, k), 0)
            limit = 1
            if batching:
                limit = max_batch.get((nid, k), default_batch) if max_batch else default_batch
                limit = max(limit, 1)
            for _ in range(count):
                st.replicas.append(_Replica(k, limit))
        stations[nid] = st
    return stations


def _stations_from_plan(graph, plan, batching):
    stations = {}
    for nid in forward_order(graph):
        st = _Station(nid)
        keys = sorted((k for (i, k) in plan.replicas if i == nid and plan.replicas[(i, k)] > 0))
        for k in keys:
            a = plan.replicas[(nid, k)]
            b = plan.batch.get((nid, k), a)
            limit = max(1, math.ceil(b / a)) if batching else 1
            for _ in range(a):
                st.replicas.append(_Replica(k, limit))
        stations[nid] = st
    return stations


class _Sim:
    def __init__(self, graph, plan, ground_truth, scenario, problem=None, max_batch=None):
        self.graph = graph
        self.plan = plan
        self.gt = ground_truth
        self.sc = scenario
        self.problem = problem
        self.max_batch = max_batch
        # Common random numbers: routing draws are keyed to the request and
        # service-noise draws to the (node, dispatch index), so paired runs
        # (mitigation on/off, feature toggles) share randomness and their
        # metric deltas reflect policy effects rather than resampled noise.
        self.rng_qlen = random.Random(scenario.seed * 1000003 + 3)
        self._req_rng = {}
        self._node_index = {nid: i for i, nid in enumerate(sorted(graph.nodes))}
        self._dispatch_count = {nid: 0 for nid in graph.nodes}
        self.events = []
        self.seq = 0
        self.item_seq = 0
        self.now = 0.0
        self.requests = []
        self.in_flight = {}
        self.admission_buffer = []
        self.arrivals = 0
        self.completions = 0
        self.violations = 0
        self.est = RunningAverageEstimator(graph, alpha=scenario.ewma_alpha)
        self.mit = MitigationState(
            autoscale_enabled=scenario.autoscale_enabled,
            spare_pool=dict(scenario.spare_pool),
            cooldown_s=scenario.cooldown_s,
            pause_margin_s=scenario.pause_margin_s,
        )
        self.sched_calls = 0
        self.sched_time = 0.0
        self.bucket_events = {}
        self.drain_pending = False
        rate = plan.objective_throughput
        self.drain_gap = 1.0 / rate if rate > 0 else 1.0 / max(scenario.arrival_rate_rps, 1e-9)

        if scenario.component_allocation:
            self.stations = _stations_from_plan(graph, plan, scenario.batching)
        else:
            self.stations = _uniform_round_robin(
                graph, plan, max_batch, scenario.batching, scenario.default_batch
            )
        for st in self.stations.values():
            if not st.replicas:
                raise ValueError("station %r has no replicas" % st.node_id)

        if scenario.batch_timeout_s is not None:
            self.timeout = scenario.batch_timeout_s
        else:
            bn = plan.bottleneck
            st = self.stations.get(bn) or next(iter(self.stations.values()))
            limit = max(r.limit for r in st.replicas)
            self.timeout = eval_ground_truth(self.gt[st.node_id], limit, 1)

        self.back_edges = {
            nid: [e for e in graph.out_edges(nid) if e.kind == RECURSIVE]
            for nid in graph.nodes
        }
        self.fwd_edges = {
            nid: [e for e in graph.out_edges(nid) if e.kind != RECURSIVE]
            for nid in graph.nodes
        }
        kinds = sorted({r.kind for r in self.stations.get(plan.bottleneck, _Station("")).replicas})
        self.bottleneck_kind = kinds[0] if kinds else None

    def route_rng(self, req):
        rng = self._req_rng.get(req.id)
        if rng is None:
            rng = random.Random(self.sc.seed * 1000003 + 17 + req.id * 7919)
            self._req_rng[req.id] = rng
        return rng

    def service_rng(self, node):
        k = self._dispatch_count[node]
        self._dispatch_count[node] = k + 1
        return random.Random(
            self.sc.seed * 1000003 + 29 + self._node_index[node] * 15485863 + k * 2654435761
        )

    # -- event machinery -------------------------------------------------

    def push(self, t, rank, kind, payload=None):
        self.seq += 1
        heapq.heappush(self.events, (t, rank, self.seq, kind, payload))

    def bucket(self, t):
        return int(t)

    def note(self, t, key, val=1):
        b = self.bucket_events.setdefault(self.bucket(t), {})
        b[key] = b.get(key, 0) + val

    # -- admission -------------------------------------------------------

    def admission_gate_open(self):
        if not self.mit.admission_open:
            return False
        if not self.sc.pipelining and self.in_flight:
            return False
        return True

    def _group_limit(self):
        # pipelining off: one batch group traverses the pipeline at a time,
        # sized to fill every entry replica once
        if not self.sc.batching:
            return 1
        st = self.stations[self.graph.entry]
        return sum(r.limit for r in st.replicas)

    def try_admit(self, t):
        if not self.admission_buffer or not self.admission_gate_open():
            return
        if self.sc.pipelining:
            if self.drain_pending:
                return
            self.inject(self.admission_buffer.pop(0), t)
            if self.admission_buffer:
                # backlog after an admission pause: release at the planned
                # service rate rather than all at once, so the resume does not
                # itself create the next overload burst
                self.drain_pending = True
                self.push(t + self.drain_gap, RANK_RESUME, "drain")
        else:
            for _ in range(min(self._group_limit(), len(self.admission_buffer))):
                req = self.admission_buffer.pop(0)
                self.inject(req, t)

    def inject(self, req, t):
        self.in_flight[req.id] = req
        req.outstanding = 1
        req.current_node = self.graph.entry
        item = _Item(req, self.graph.entry)
        self.enqueue_item(item, self.graph.entry, t)

    # -- stations --------------------------------------------------------

    def enqueue_item(self, item, node, t):
        st = self.stations[node]
        st.note_queue(t)
        self.item_seq += 1
        item.seq = self.item_seq
        item.node = node
        item.enqueue_t = t
        st.queue.append((item.seq, item))
        item.request.current_node = node
        self.push(t, RANK_DISPATCH, "dispatch", node)
        self.push(t + self.timeout, RANK_DISPATCH, "dispatch", node)

    def handle_dispatch(self, node, t):
        st = self.stations[node]
        while st.queue:
            idle = [i for i, r in enumerate(st.replicas) if r.busy_until <= t + 1e-12]
            if not idle:
                break
            t0 = _time.perf_counter()
            entries = [
                (ESCALATED if s[1].request.priority == ESCALATED else NORMAL, s[0], s[1])
                for s in st.queue
            ]
            # pick the least-loaded idle replica; its limit caps the batch
            ridx, _ = route({i: st.replicas[i].busy_until for i in idle}, idle, entries, 1)
            self.sched_calls += 1
            self.sched_time += _time.perf_counter() - t0
            rep = st.replicas[ridx]
            limit = rep.limit if self.sc.batching else 1
            oldest = min(it.enqueue_t for _, it in st.queue)
            if len(st.queue) < limit and t - oldest < self.timeout - 1e-12:
                break
            ordered = sorted(
                st.queue,
                key=lambda s: (0 if s[1].request.priority == ESCALATED else 1, s[0]),
            )
            batch = [it for _, it in ordered[:limit]]
            taken = {id(it) for it in batch}
            st.note_queue(t)
            st.queue = [s for s in st.queue if id(s[1]) not in taken]
            rng = self.service_rng(node) if self.sc.noise else None
            service = eval_ground_truth(self.gt[node], len(batch), 1, rng)
            rep.busy_until = t + service
            rep.busy_time += service
            rep.intervals.append((t, t + service))
            for it in batch:
                it.request.trace.append((node, it.enqueue_t, t, t + service))
                it.request.in_service_until = t + service
            self.push(t + service, RANK_COMPLETE, "complete", (node, ridx, batch, service))

    def handle_complete(self, node, ridx, batch, service, t):
        self.est.update_service(node, service)
        for it in batch:
            residence = t - it.enqueue_t
            self.est.update(node, residence)
            it.request.in_service_until = None
        for it in batch:
            self.route_item(it, t)
        self.push(t, RANK_DISPATCH, "dispatch", node)

    # -- routing ---------------------------------------------------------

    def route_item(self, item, t):
        node = item.node
        req = item.request
        for e in self.back_edges[node]:
            key = (e.src, e.dst)
            depth = item.depths.get(key, 0)
            if depth < e.max_depth and self.route_rng(req).random() < e.probability:
                item.depths[key] = depth + 1
                self.enqueue_item(item, e.dst, t)
                return

        fanout = self.graph.nodes[node].fanout_factor
        base = int(math.floor(fanout))
        frac = fanout - base
        copies = base + (1 if frac > 0 and self.route_rng(req).random() < frac else 0)

        fwd = self.fwd_edges[node]
        targets = []
        if fwd:
            cond = [e for e in fwd if e.kind == CONDITIONAL]
            seq = [e for e in fwd if e.kind != CONDITIONAL]
            if cond:
                u = self.route_rng(req).random()
                acc = 0.0
                chosen = cond[-1]
                for e in cond:
                    acc += e.probability
                    if u < acc:
                        chosen = e
                        break
                targets.append(chosen.dst)
            for e in seq:
                targets.append(e.dst)

        if not targets or copies == 0:
            # item leaves the pipeline
            req.outstanding -= 1
            if req.outstanding <= 0 and req.status == IN_FLIGHT:
                self.complete_request(req, t)
            return

        emitted = 0
        for dst in targets:
            for _ in range(copies):
                emitted += 1
                if emitted == 1:
                    self.enqueue_item(item, dst, t)
                else:
                    clone = _Item(req, dst, dict(item.depths))
                    req.outstanding += 1
                    self.enqueue_item(clone, dst, t)

    def complete_request(self, req, t):
        req.completion_time = t
        violated = t > req.slo_deadline + 1e-12
        req.status = VIOLATED if violated else COMPLETED
        self.completions += 1
        if violated:
            self.violations += 1
            self.note(t, "violations")
        self.note(t, "completions")
        b = self.bucket_events.setdefault(self.bucket(t), {})
        b.setdefault("latencies", []).append(t - req.arrival_time)
        del self.in_flight[req.id]
        self.mit.at_risk.discard(req.id)
        self.try_admit(t)

    # -- mitigation ------------------------------------------------------

    def run_mitigation(self, t):
        t0 = _time.perf_counter()
        bn_node = self.plan.bottleneck
        directives = mitigate(
            self.mit, self.est, list(self.in_flight.values()), t,
            bottleneck_kind=self.bottleneck_kind, bottleneck_node=bn_node,
        )
        self.sched_calls += max(len(self.in_flight), 1)
        self.sched_time += _time.perf_counter() - t0
        for d in directives:
            if d[0] == "resume":
                self.try_admit(t)
            elif d[0] == "autoscale":
                self.apply_autoscale(d[1], t)

    def apply_autoscale(self, kind, t):
        if self.problem is not None:
            new_plan = replan_with_extra(self.problem, self.plan, kind)
            for (nid, k), a in new_plan.replicas.items():
                old = self.plan.replicas.get((nid, k), 0)
                if a > old:
                    b = new_plan.batch.get((nid, k), a)
                    limit = max(1, math.ceil(b / a)) if self.sc.batching else 1
                    for _ in range(a - old):
                        rep = _Replica(k, limit)
                        rep.busy_until = t
                        self.stations[nid].replicas.append(rep)
                    self.push(t, RANK_DISPATCH, "dispatch", nid)
            self.plan = new_plan
            if new_plan.objective_throughput > 0:
                self.drain_gap = 1.0 / new_plan.objective_throughput
        else:
            st = self.stations[self.plan.bottleneck]
            tmpl = st.replicas[0]
            rep = _Replica(kind, tmpl.limit)
            rep.busy_until = t
            st.replicas.append(rep)
            self.push(t, RANK_DISPATCH, "dispatch", self.plan.bottleneck)

    # -- main loop -------------------------------------------------------

    def run(self):
        sc = self.sc
        for at in generate_arrivals(sc.arrival_rate_rps, sc.duration_s, sc.seed,
                                    sc.arrival_process):
            self.push(at, RANK_ARRIVAL, "arrival", at)

        while self.events:
            t, rank, _, kind, payload = heapq.heappop(self.events)
            if t > sc.duration_s:
                break
            self.now = t
            if kind == "arrival":
                self.arrivals += 1
                self.note(t, "arrivals")
                qlen = max(1, int(round(
                    math.exp(self.rng_qlen.gauss(sc.query_len_mu, sc.query_len_sigma))
                )))
                req = Request(
                    id=self.arrivals,
                    arrival_time=t,
                    query_len=qlen,
                    slo_deadline=t + sc.slo_s,
                )
                self.requests.append(req)
                self.admission_buffer.append(req)
                self.try_admit(t)
            elif kind == "dispatch":
                self.handle_dispatch(payload, t)
            elif kind == "complete":
                node, ridx, batch, service = payload
                self.handle_complete(node, ridx, batch, service, t)
            elif kind == "drain":
                self.drain_pending = False
                self.try_admit(t)
            if sc.mitigation_enabled and kind in ("arrival", "complete"):
                self.run_mitigation(t)

        return self.report()

    def report(self):
        sc = self.sc
        latencies = sorted(
            r.completion_time - r.arrival_time
            for r in self.requests
            if r.completion_time is not None
        )
        duration = sc.duration_s
        util = {}
        for nid, st in self.stations.items():
            busy = 0.0
            for rep in st.replicas:
                for s, e in rep.intervals:
                    busy += min(e, duration) - min(s, duration)
            util[nid] = busy / (duration * max(len(st.replicas), 1))
        qlen = {}
        for nid, st in self.stations.items():
            st.note_queue(duration)
            qlen[nid] = st.queue_area / duration
        series = []
        for b in range(int(math.ceil(duration))):
            ev = self.bucket_events.get(b, {})
            lats = sorted(ev.get("latencies", []))
            row = {
                "t": b,
                "arrivals": ev.get("arrivals", 0),
                "completions": ev.get("completions", 0),
                "violations": ev.get("violations", 0),
                "p50": _quantile(lats, 0.5),
                "p95": _quantile(lats, 0.95),
            }
            for nid in sorted(self.stations):
                st = self.stations[nid]
                busy = 0.0
                for rep in st.replicas:
                    for s, e in rep.intervals:
                        busy += max(0.0, min(e, b + 1) - max(s, b))
                row["util_%s" % nid] = busy / max(len(st.replicas), 1)
            series.append(row)
        report = MetricsReport(
            throughput=self.completions / duration,
            goodput=(self.completions - self.violations) / duration,
            slo_violation_rate=(self.violations / self.completions) if self.completions else 0.0,
            latency_p50=_quantile(latencies, 0.5),
            latency_p95=_quantile(latencies, 0.95),
            latency_p99=_quantile(latencies, 0.99),
            arrivals=self.arrivals,
            completions=self.completions,
            violations=self.violations,
            in_flight_at_end=len(self.in_flight),
            buffered_at_end=len(self.admission_buffer),
            utilization=util,
            mean_queue_len=qlen,
            timeseries=series,
            actions_log=list(self.mit.actions_log),
            scheduler_calls=self.sched_calls,
            scheduler_wall_time_s=self.sched_time,
        )
        return report


def run(graph: PipelineGraph, plan: AllocationPlan, ground_truth: dict,
        scenario: ScenarioConfig, seed: int | None = None, problem=None,
        max_batch=None):
    """Simulate the pipeline under the given plan; reproducible from the seed."""
    if seed is not None:
        scenario = replace(scenario, seed=seed)
    sim = _Sim(graph, plan, ground_truth, scenario, problem=problem, max_batch=max_batch)
    report = sim.run()
    return report, sim.requests
