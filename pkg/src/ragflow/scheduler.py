"""Online request management: residence-time estimation, SLO-risk prediction,
and the mitigation triad (priority escalation, admission pause, autoscaling)."""

from __future__ import annotations

from dataclasses import dataclass, field

from .pipeline import CONDITIONAL, RECURSIVE, PipelineGraph, forward_order

NORMAL = "normal"
ESCALATED = "escalated"


class RunningAverageEstimator:
    """Per-node EWMA of service residence time plus a remaining-path table.

    predict_violation is O(1): remaining times come from a cached table that
    is rebuilt lazily when any node mean has drifted by more than 5%.
    """

    REBUILD_REL = 0.05

    def __init__(self, graph: PipelineGraph, alpha: float = 0.1, mode: str = "ewma"):
        if mode not in ("ewma", "cumulative"):
            raise ValueError("mode must be 'ewma' or 'cumulative'")
        self.graph = graph
        self.alpha = alpha
        self.mode = mode
        self.means = {nid: 0.0 for nid in graph.nodes}
        self.counts = {nid: 0 for nid in graph.nodes}
        # service-only means (no queue wait): lower bound on residence, used
        # to decide whether an at-risk request is still savable
        self.service_means = {nid: 0.0 for nid in graph.nodes}
        self.service_counts = {nid: 0 for nid in graph.nodes}
        self._table = None
        self._table_means = None
        self._floor = None
        self._floor_means = None
        self.min_hops, self.max_hops = self._hop_bounds()

    def update(self, node: str, observed: float):
        if observed < 0:
            raise ValueError("observed residence time must be >= 0")
        if self.counts[node] == 0:
            self.means[node] = observed
        elif self.mode == "ewma":
            self.means[node] = (1.0 - self.alpha) * self.means[node] + self.alpha * observed
        else:
            n = self.counts[node]
            self.means[node] = (self.means[node] * n + observed) / (n + 1)
        self.counts[node] += 1

    def update_service(self, node: str, observed: float):
        if observed < 0:
            raise ValueError("observed service time must be >= 0")
        if self.service_counts[node] == 0:
            self.service_means[node] = observed
        elif self.mode == "ewma":
            self.service_means[node] = (
                (1.0 - self.alpha) * self.service_means[node] + self.alpha * observed
            )
        else:
            n = self.service_counts[node]
            self.service_means[node] = (self.service_means[node] * n + observed) / (n + 1)
        self.service_counts[node] += 1

    # -- remaining-time table -------------------------------------------

    @staticmethod
    def _drifted(means, ref, rel):
        if ref is None:
            return True
        for nid, m in means.items():
            base = max(abs(ref[nid]), 1e-12)
            if abs(m - ref[nid]) / base > rel:
                return True
        return False

    def remaining_table(self):
        if self._drifted(self.means, self._table_means, self.REBUILD_REL):
            self._table = self._build_table(self.means)
            self._table_means = dict(self.means)
        return self._table

    def floor_table(self):
        if self._drifted(self.service_means, self._floor_means, self.REBUILD_REL):
            self._floor = self._build_table(self.service_means)
            self._floor_means = dict(self.service_means)
        return self._floor

    def _build_table(self, means):
        """Expected remaining time from each node, including that node's own
        residence, weighted over conditional branches and truncated recursion."""
        g = self.graph
        iters = len(g.nodes) + sum(
            e.max_depth for e in g.edges if e.kind == RECURSIVE
        ) * len(g.nodes) + 1
        iters = min(iters, 200)
        rem = {nid: 0.0 for nid in g.nodes}
        for _ in range(iters):
            new = {}
            for nid in g.nodes:
                total = means[nid]
                for e in g.out_edges(nid):
                    if e.kind == CONDITIONAL:
                        total += e.probability * rem[e.dst]
                    elif e.kind == RECURSIVE:
                        total += e.probability * rem[e.dst]
                    else:
                        total += rem[e.dst]
                new[nid] = total
            if all(abs(new[n] - rem[n]) < 1e-12 for n in rem):
                rem = new
                break
            rem = new
        return rem

    def expected_remaining(self, node: str) -> float:
        return self.remaining_table()[node]

    def expected_downstream(self, node: str) -> float:
        """Remaining time past the current node (excludes its own residence)."""
        return max(self.remaining_table()[node] - self.means[node], 0.0)

    def floor_remaining(self, node: str) -> float:
        """Best-case remaining time: service only, zero queueing."""
        return self.floor_table()[node]

    def floor_downstream(self, node: str) -> float:
        return max(self.floor_table()[node] - self.service_means[node], 0.0)

    def _hop_bounds(self):
        g = self.graph
        order = forward_order(g)
        min_h = {nid: (0 if not [e for e in g.out_edges(nid) if e.kind != RECURSIVE]
                       else float("inf")) for nid in g.nodes}
        max_h = {nid: 0 for nid in g.nodes}
        for nid in reversed(order):
            for e in g.out_edges(nid):
                if e.kind == RECURSIVE:
                    continue
                min_h[nid] = min(min_h[nid], 1 + min_h[e.dst])
                max_h[nid] = max(max_h[nid], 1 + max_h[e.dst])
        # recursion adds up to max_depth extra traversals of the loop body
        for e in g.edges:
            if e.kind == RECURSIVE:
                loop_len = max_h[e.dst] - max_h.get(e.src, 0) + 1
                for nid in g.nodes:
                    max_h[nid] += e.max_depth * max(loop_len, 1)
        return min_h, max_h


def update_estimate(est: RunningAverageEstimator, node: str, observed: float):
    est.update(node, observed)
    return est


def predict_violation(est: RunningAverageEstimator, current_node, arrival_time, slo_deadline,
                      now: float, in_service_finish=None):
    """at_risk iff time spent plus expected remaining time crosses the SLO.

    If the request's batch is already in service, its finish time is known;
    charging the node's full mean residence again would double-count the
    queueing delay it has already paid, so we use the actual finish plus the
    downstream portion of the table instead.
    """
    if current_node is None:
        remaining = 0.0
    elif in_service_finish is not None:
        remaining = max(in_service_finish - now, 0.0) + est.expected_downstream(current_node)
    else:
        remaining = est.expected_remaining(current_node)
    elapsed = now - arrival_time
    return {
        "at_risk": elapsed + remaining > slo_deadline - arrival_time,
        "expected_remaining": remaining,
    }


def _savable(est: RunningAverageEstimator, req, now: float, in_service_finish=None) -> bool:
    """True if the request could still meet its SLO given zero further queueing."""
    node = req.current_node
    if node is None:
        return True
    if in_service_finish is not None:
        floor = max(in_service_finish - now, 0.0) + est.floor_downstream(node)
    else:
        floor = est.floor_remaining(node)
    return now + floor <= req.slo_deadline


@dataclass
class MitigationState:
    admission_open: bool = True
    at_risk: set = field(default_factory=set)
    autoscale_enabled: bool = False
    spare_pool: dict = field(default_factory=dict)
    actions_log: list = field(default_factory=list)
    cooldown_s: float = 5.0
    last_autoscale_t: float = float("-inf")
    # minimum predicted SLO overshoot (seconds) before a request may hold
    # admission closed; escalation and autoscaling still react to any at-risk
    # request. 0 pauses on any predicted violation.
    pause_margin_s: float = 0.0

    def log(self, t, action, **extra):
        entry = {"t": t, "action": action}
        entry.update(extra)
        self.actions_log.append(entry)


def mitigate(state: MitigationState, est: RunningAverageEstimator, in_flight, now,
             bottleneck_kind=None, bottleneck_node=None):
    """Apply the mitigation rules; returns a list of directives for the caller.

    `in_flight` is an iterable of objects with id, arrival_time, slo_deadline,
    current_node, and priority attributes. Directives: ("escalate", request),
    ("pause",), ("resume",), ("autoscale", kind).
    """
    directives = []
    still_at_risk = set()
    confident_overshoot = False
    for req in in_flight:
        finish = getattr(req, "in_service_until", None)
        pred = predict_violation(est, req.current_node, req.arrival_time, req.slo_deadline, now,
                                 in_service_finish=finish)
        if pred["at_risk"]:
            overshoot = (now - req.arrival_time) + pred["expected_remaining"] \
                - (req.slo_deadline - req.arrival_time)
            if overshoot > state.pause_margin_s:
                confident_overshoot = True
            if (now <= req.slo_deadline and overshoot > state.pause_margin_s
                    and _savable(est, req, now, finish)):
                # Requests already past their deadline have violated, requests
                # that cannot finish in time even with zero queueing cannot be
                # saved, and borderline predictions (within the pause margin)
                # are as likely as not to make it; none may hold admission
                # closed, because a closed gate burns the SLO slack of every
                # buffered arrival.
                still_at_risk.add(req.id)
            if req.priority != ESCALATED:
                req.priority = ESCALATED
                directives.append(("escalate", req))
                state.log(now, "escalate", request=req.id)
    state.at_risk = still_at_risk

    if state.at_risk and state.admission_open:
        state.admission_open = False
        directives.append(("pause",))
        state.log(now, "pause")
    elif not state.at_risk and not state.admission_open:
        state.admission_open = True
        directives.append(("resume",))
        state.log(now, "resume")

    if (
        confident_overshoot
        and state.autoscale_enabled
        and bottleneck_kind is not None
        and state.spare_pool.get(bottleneck_kind, 0) > 0
        and now - state.last_autoscale_t >= state.cooldown_s
    ):
        state.spare_pool[bottleneck_kind] -= 1
        state.last_autoscale_t = now
        directives.append(("autoscale", bottleneck_kind))
        state.log(now, "autoscale", kind=bottleneck_kind, node=bottleneck_node)
    return directives


def route(busy_until, idle_replicas, queue, batch_limit):
    """Pick the least-loaded idle replica and fill a batch, escalated first.

    queue entries are (priority, seq, item); returns (replica index, batch items).
    """
    replica = min(idle_replicas, key=lambda r: (busy_until[r], r))
    ordered = sorted(queue, key=lambda q: (0 if q[0] == ESCALATED else 1, q[1]))
    batch = ordered[:batch_limit]
    return replica, batch
