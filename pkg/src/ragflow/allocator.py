"""Joint batch-size / replica-allocation optimization.

Objective: maximize the minimum per-component throughput sum_k b/T(b, a)
subject to resource supply, flow conservation, and per-replica batch caps.
Includes an exhaustive oracle, an exact branch-and-bound solver with a
greedy + LP-bound fallback for large instances, and the min-max-latency
variant with an epigraph auxiliary variable.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field

from .pipeline import CONDITIONAL, RECURSIVE, PipelineGraph, expected_visit_rates, forward_order

EPS = 1e-12
FLOW_TOL = 1e-9


class AllocationError(ValueError):
    pass


class Infeasible(AllocationError):
    pass


@dataclass
class AllocationProblem:
    graph: PipelineGraph
    resource_kinds: dict  # kind name -> count available (r_k)
    max_batch: dict  # (node id, kind) -> per-replica batch cap m_{i,k}; 0 = ineligible
    latency: dict  # (node id, kind) -> PwlFit
    flow_mode: str = "weighted"  # "weighted" (fanout/probability) or "strict" (weights 1)
    visit_rates: dict = None

    def __post_init__(self):
        if self.visit_rates is None:
            self.visit_rates = expected_visit_rates(self.graph)
        for nid in self.graph.nodes:
            elig = self.eligible_kinds(nid)
            if not elig:
                raise AllocationError("node %r has no eligible resource kind" % nid)
            for k in elig:
                if (nid, k) not in self.latency:
                    raise AllocationError("missing latency fit for (%s, %s)" % (nid, k))
        for (nid, k), m in self.max_batch.items():
            if m > 0 and k not in self.graph.nodes[nid].resource_affinity:
                raise AllocationError("max_batch > 0 for non-affine pair (%s, %s)" % (nid, k))

    @property
    def kinds(self):
        return sorted(self.resource_kinds)

    def eligible_kinds(self, nid):
        return [k for k in self.kinds if self.max_batch.get((nid, k), 0) >= 1]

    def flow_weight(self, edge):
        if self.flow_mode == "strict":
            return 1.0
        w = self.graph.nodes[edge.src].fanout_factor
        if edge.kind == CONDITIONAL:
            w *= edge.probability
        return w

    def predecessors_weighted(self, nid):
        """(pred id, weight) pairs over non-back in-edges."""
        return [
            (e.src, self.flow_weight(e))
            for e in self.graph.dag_predecessors(nid)
        ]


@dataclass
class AllocationPlan:
    batch: dict  # (node id, kind) -> int
    replicas: dict  # (node id, kind) -> int
    objective_throughput: float
    bottleneck: str
    gap: float = 0.0  # reported optimality gap (0 when solved exactly)

    def node_total_batch(self, nid):
        return sum(b for (i, _), b in self.batch.items() if i == nid)

    def node_throughput(self, problem, nid):
        return _node_throughput(problem, nid, self.batch, self.replicas)

    def total_replicas(self):
        return sum(self.replicas.values())

    def to_rows(self):
        rows = []
        keys = sorted(set(self.batch) | set(self.replicas))
        for nid, k in keys:
            b = self.batch.get((nid, k), 0)
            a = self.replicas.get((nid, k), 0)
            if b or a:
                rows.append({"component": nid, "kind": k, "batch": b, "replicas": a})
        return rows

    def to_dict(self):
        return {
            "plan": self.to_rows(),
            "objective_throughput": self.objective_throughput,
            "bottleneck": self.bottleneck,
            "gap": self.gap,
        }

    @classmethod
    def from_dict(cls, d):
        batch, replicas = {}, {}
        for row in d["plan"]:
            key = (row["component"], row["kind"])
            batch[key] = int(row["batch"])
            replicas[key] = int(row["replicas"])
        return cls(
            batch=batch,
            replicas=replicas,
            objective_throughput=float(d["objective_throughput"]),
            bottleneck=d["bottleneck"],
            gap=float(d.get("gap", 0.0)),
        )


def _node_throughput(problem, nid, batch, replicas):
    thr = 0.0
    for k in problem.eligible_kinds(nid):
        b = batch.get((nid, k), 0)
        a = replicas.get((nid, k), 0)
        if b > 0:
            fit = problem.latency[(nid, k)]
            thr += b / fit.predict(min(math.ceil(b / a), fit.domain_max), 1)
    return thr


def validate_plan(problem: AllocationProblem, plan: AllocationPlan, raise_on_error=True):
    """Runnable restatement of the resource / flow / cap constraints."""
    errors = []
    used = {k: 0 for k in problem.kinds}
    for (nid, k), a in plan.replicas.items():
        if a < 0:
            errors.append("negative replicas at (%s, %s)" % (nid, k))
        used[k] = used.get(k, 0) + a
    for k, u in used.items():
        if u > problem.resource_kinds.get(k, 0):
            errors.append("kind %r over-allocated: %d > %d" % (k, u, problem.resource_kinds.get(k, 0)))
    totals = {nid: plan.node_total_batch(nid) for nid in problem.graph.nodes}
    for nid in problem.graph.nodes:
        if totals[nid] < 1:
            errors.append("node %r has total batch < 1" % nid)
        if sum(plan.replicas.get((nid, k), 0) for k in problem.kinds) < 1:
            errors.append("node %r has no replicas" % nid)
        preds = problem.predecessors_weighted(nid)
        if preds:
            cap = sum(w * totals[g] for g, w in preds)
            if totals[nid] > cap + FLOW_TOL:
                errors.append("flow violated at %r: %d > %.6f" % (nid, totals[nid], cap))
        for k in problem.kinds:
            b = plan.batch.get((nid, k), 0)
            a = plan.replicas.get((nid, k), 0)
            m = problem.max_batch.get((nid, k), 0)
            if b > 0 and a == 0:
                errors.append("batch without replicas at (%s, %s)" % (nid, k))
            if b > 0 and math.ceil(b / max(a, 1)) > m:
                errors.append("batch cap violated at (%s, %s): ceil(%d/%d) > %d" % (nid, k, b, a, m))
    if errors and raise_on_error:
        raise AllocationError("; ".join(errors))
    return errors


def check_feasible(problem: AllocationProblem):
    """Hall-style check that every node can get one replica of an eligible kind."""
    kinds = problem.kinds
    nodes = list(problem.graph.nodes)
    if sum(problem.resource_kinds.values()) < len(nodes):
        raise Infeasible("fewer resource units (%d) than components (%d)"
                         % (sum(problem.resource_kinds.values()), len(nodes)))
    for r in range(1, len(kinds) + 1):
        for subset in itertools.combinations(kinds, r):
            ss = set(subset)
            demand = sum(1 for nid in nodes if set(problem.eligible_kinds(nid)) <= ss)
            supply = sum(problem.resource_kinds[k] for k in subset)
            if demand > supply:
                raise Infeasible(
                    "nodes restricted to kinds %s need %d units, only %d available"
                    % (sorted(ss), demand, supply)
                )


# -- per-node throughput tables ------------------------------------------


def _kind_thr_curve(problem, nid, k, a):
    """thr[k][b] for b = 0..a*m on `a` replicas of kind k."""
    m = problem.max_batch.get((nid, k), 0)
    fit = problem.latency[(nid, k)]
    out = [0.0]
    for b in range(1, a * m + 1):
        out.append(b / fit.predict(math.ceil(b / a), 1))
    return out


def _node_total_table(problem, nid, avec):
    """Per total batch t: (max thr, b-vector achieving it), for a fixed a-vector.

    Combines kinds by exact max-plus convolution of per-kind throughput curves.
    """
    kinds = [k for k in problem.eligible_kinds(nid) if avec.get(k, 0) > 0]
    table = {0: (0.0, {})}
    for k in kinds:
        curve = _kind_thr_curve(problem, nid, k, avec[k])
        new = {}
        for t, (thr, bv) in table.items():
            for b, bthr in enumerate(curve):
                tt = t + b
                cand = thr + bthr
                cur = new.get(tt)
                if cur is None or cand > cur[0] + EPS:
                    bv2 = dict(bv)
                    if b:
                        bv2[k] = b
                    new[tt] = (cand, bv2)
        table = new
    return table


def _node_best_thr(problem, nid, avec):
    table = _node_total_table(problem, nid, avec)
    return max((thr for thr, _ in table.values()), default=0.0)


def _node_avecs(problem, nid, supply):
    """All replica vectors for a node given per-kind supply; total >= 1."""
    kinds = problem.eligible_kinds(nid)
    out = []
    ranges = [range(0, supply.get(k, 0) + 1) for k in kinds]
    for combo in itertools.product(*ranges):
        if sum(combo) >= 1:
            out.append({k: a for k, a in zip(kinds, combo) if a > 0})
    return out


# -- exact optimal batch step for a fixed replica matrix -----------------


def _best_batches(problem, order, amats, upper_bounds, best_obj):
    """Max-min throughput over batch totals with flow caps, fixed replicas.

    Returns (objective, batch dict, bottleneck) or None if it cannot beat
    best_obj - EPS.
    """
    tables = []
    for nid in order:
        table = _node_total_table(problem, nid, amats[nid])
        # drop t=0 (every node needs batch >= 1) and sort by descending thr
        opts = sorted(
            ((thr, t, bv) for t, (thr, bv) in table.items() if t >= 1),
            key=lambda x: (-x[0], -x[1]),
        )
        if not opts:
            return None
        tables.append(opts)

    preds = {nid: problem.predecessors_weighted(nid) for nid in order}
    pos = {nid: i for i, nid in enumerate(order)}
    n = len(order)
    best = {"obj": best_obj, "assign": None}
    totals = [0] * n
    choice = [None] * n

    def rec(i, cur_min, cur_bottleneck):
        if i == n:
            if cur_min > best["obj"] + EPS or best["assign"] is None and cur_min > best["obj"] - EPS:
                best["obj"] = cur_min
                best["assign"] = (list(choice), cur_bottleneck)
            return
        nid = order[i]
        cap = None
        if preds[nid]:
            cap = sum(w * totals[pos[g]] for g, w in preds[nid]) + FLOW_TOL
        # remaining-node optimism: bound by per-node flow-free max
        for thr, t, bv in tables[i]:
            if thr <= best["obj"] + EPS and best["assign"] is not None:
                break
            if thr < best["obj"] - EPS:
                break
            if cap is not None and t > cap:
                continue
            totals[i] = t
            choice[i] = bv
            if thr < cur_min:
                rec(i + 1, thr, nid)
            else:
                rec(i + 1, cur_min, cur_bottleneck)
        totals[i] = 0
        choice[i] = None

    rec(0, float("inf"), None)
    if best["assign"] is None:
        return None
    bvs, bottleneck = best["assign"]
    batch = {}
    for nid, bv in zip(order, bvs):
        for k, b in bv.items():
            batch[(nid, k)] = b
    return best["obj"], batch, bottleneck


def _finish_plan(problem, amats, obj, batch, bottleneck, gap=0.0):
    replicas = {}
    for nid, avec in amats.items():
        for k, a in avec.items():
            if a > 0:
                replicas[(nid, k)] = a
    plan = AllocationPlan(
        batch=batch,
        replicas=replicas,
        objective_throughput=obj,
        bottleneck=bottleneck,
        gap=gap,
    )
    validate_plan(problem, plan)
    return plan


# -- exact branch and bound over replica matrices ------------------------


def _solve_exact(problem, budget, warm_obj=-1.0, deadline=None):
    order = forward_order(problem.graph)
    supply = dict(problem.resource_kinds)
    avec_lists = {}
    for nid in order:
        lst = []
        for avec in _node_avecs(problem, nid, supply):
            lst.append((avec, _node_best_thr(problem, nid, avec)))
        lst.sort(key=lambda x: -x[1])
        avec_lists[nid] = lst
        if not lst:
            raise Infeasible("node %r cannot be assigned any replica" % nid)

    best = {"obj": warm_obj, "plan": None}
    amats = {}

    def bound_remaining(i, remaining):
        ub = float("inf")
        for nid in order[i:]:
            node_ub = 0.0
            for avec, thr in avec_lists[nid]:
                if all(remaining.get(k, 0) >= a for k, a in avec.items()):
                    node_ub = thr  # lists sorted desc; first feasible is the max
                    break
            ub = min(ub, node_ub)
        return ub

    def rec(i, remaining, cur_ub):
        if deadline is not None and time.monotonic() > deadline:
            raise TimeoutError
        if i == len(order):
            res = _best_batches(problem, order, amats, None, best["obj"])
            if res is not None:
                obj, batch, bottleneck = res
                if obj > best["obj"] + EPS:
                    best["obj"] = obj
                    best["plan"] = _finish_plan(problem, dict(amats), obj, batch, bottleneck)
            return
        nid = order[i]
        # units that must be kept for the remaining nodes (1 replica each)
        for avec, thr in avec_lists[nid]:
            if thr < best["obj"] - EPS:
                break
            if not all(remaining.get(k, 0) >= a for k, a in avec.items()):
                continue
            rem2 = dict(remaining)
            for k, a in avec.items():
                rem2[k] -= a
            ub = min(cur_ub, thr, bound_remaining(i + 1, rem2))
            if ub < best["obj"] - EPS:
                continue
            amats[nid] = avec
            rec(i + 1, rem2, min(cur_ub, thr))
            del amats[nid]

    rec(0, supply, float("inf"))
    if best["plan"] is None:
        raise Infeasible("no feasible plan found")
    return best["plan"]


# -- greedy + LP bound for large instances -------------------------------


def _unit_rate(problem, nid, k):
    m = problem.max_batch.get((nid, k), 0)
    fit = problem.latency[(nid, k)]
    return max(b / fit.predict(b, 1) for b in range(1, m + 1))


def _lp_upper_bound(problem):
    """Continuous relaxation: max lambda s.t. sum_k u_ik a_ik >= lambda."""
    from scipy.optimize import linprog

    nodes = list(problem.graph.nodes)
    kinds = problem.kinds
    nv = len(nodes) * len(kinds) + 1  # a_ik ... lambda
    c = [0.0] * (nv - 1) + [-1.0]
    A_ub, b_ub = [], []
    for i, nid in enumerate(nodes):
        row = [0.0] * nv
        for j, k in enumerate(kinds):
            if problem.max_batch.get((nid, k), 0) >= 1:
                row[i * len(kinds) + j] = -_unit_rate(problem, nid, k)
        row[-1] = 1.0
        A_ub.append(row)
        b_ub.append(0.0)
    for j, k in enumerate(kinds):
        row = [0.0] * nv
        for i in range(len(nodes)):
            if problem.max_batch.get((nodes[i], k), 0) >= 1:
                row[i * len(kinds) + j] = 1.0
        A_ub.append(row)
        b_ub.append(float(problem.resource_kinds[k]))
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, bounds=[(0, None)] * nv, method="highs")
    if not res.success:
        raise AllocationError("LP bound failed: %s" % res.message)
    return -res.fun


def _batch_lambda_opt(problem, nodes, alloc):
    """Best max-min throughput for a fixed replica matrix.

    Binary search on the target throughput lambda; for a candidate lambda each
    node takes the largest flow-feasible total that still reaches lambda
    (larger upstream totals only relax downstream caps), so feasibility is
    separable in topological order.
    """
    import numpy as np

    tables = {}
    for nid in nodes:
        table = _node_total_table(problem, nid, alloc[nid])
        entries = sorted(
            (t, thr, bv) for t, (thr, bv) in table.items() if t >= 1
        )
        ts = np.array([e[0] for e in entries], dtype=float)
        th = np.array([e[1] for e in entries], dtype=float)
        tables[nid] = (ts, th, [e[2] for e in entries])

    def batches_for(lam):
        totals, batch = {}, {}
        for nid in nodes:
            preds = problem.predecessors_weighted(nid)
            ts, th, bvs = tables[nid]
            ok = th >= lam - 1e-12
            if preds:
                cap = sum(w * totals[g] for g, w in preds) + FLOW_TOL
                ok = ok & (ts <= cap)
            idx = np.nonzero(ok)[0]
            if idx.size == 0:
                return None
            j = int(idx[-1])  # entries sorted by t: the largest feasible total
            totals[nid] = ts[j]
            for k, b in bvs[j].items():
                batch[(nid, k)] = b
        return batch

    best_batch = batches_for(0.0)
    if best_batch is None:
        return None
    lo, hi = 0.0, min(float(tables[nid][1].max()) for nid in nodes)
    for _ in range(50):
        mid = 0.5 * (lo + hi)
        cand = batches_for(mid)
        if cand is None:
            hi = mid
        else:
            lo, best_batch = mid, cand

    replicas = {(n, k): a for n, av in alloc.items() for k, a in av.items()}
    thrs = {nid: _node_throughput(problem, nid, best_batch, replicas)
            for nid in nodes}
    bottleneck = min(thrs, key=thrs.get)
    return thrs[bottleneck], best_batch, bottleneck


def _solve_greedy(problem, deadline=None):
    nodes = list(forward_order(problem.graph))
    remaining = dict(problem.resource_kinds)
    alloc = {nid: {} for nid in nodes}
    rates = {}
    for nid in nodes:
        for k in problem.eligible_kinds(nid):
            rates[(nid, k)] = _unit_rate(problem, nid, k)

    def node_rate(nid):
        return sum(a * rates[(nid, k)] for k, a in alloc[nid].items())

    # seed: one replica of the best available kind per node
    for nid in nodes:
        options = sorted(
            (k for k in problem.eligible_kinds(nid) if remaining.get(k, 0) > 0),
            key=lambda k: -rates[(nid, k)],
        )
        if not options:
            raise Infeasible("no resource unit left for node %r" % nid)
        k = options[0]
        alloc[nid][k] = 1
        remaining[k] -= 1

    # waterfill: give the bottleneck node the unit that helps it most
    while True:
        nid = min(nodes, key=node_rate)
        options = [k for k in problem.eligible_kinds(nid) if remaining.get(k, 0) > 0]
        if not options:
            # bottleneck saturated; try the next-lowest node that can still grow
            growable = [
                n for n in nodes
                if any(remaining.get(k, 0) > 0 for k in problem.eligible_kinds(n))
            ]
            if not growable:
                break
            nid = min(growable, key=node_rate)
            options = [k for k in problem.eligible_kinds(nid) if remaining.get(k, 0) > 0]
        k = max(options, key=lambda k: rates[(nid, k)])
        alloc[nid][k] = alloc[nid].get(k, 0) + 1
        remaining[k] -= 1

    res = _batch_lambda_opt(problem, nodes, alloc)
    if res is None:
        raise Infeasible("flow caps leave no feasible batch assignment")
    obj, batch, bottleneck = res

    # local improvement: move a replica from a high-throughput donor onto the
    # bottleneck node while the objective rises (the waterfill sizes replicas
    # by standalone unit rate and can misjudge flow-capped nodes)
    improved = True
    while improved and (deadline is None or time.monotonic() < deadline):
        improved = False
        replicas = {(n, k): a for n, av in alloc.items() for k, a in av.items()}
        thrs = {nid: _node_throughput(problem, nid, batch, replicas)
                for nid in nodes}
        targets = sorted(nodes, key=lambda n: thrs[n])
        donors = sorted(nodes, key=lambda n: -thrs[n])
        for target in targets:
            for d in donors:
                if d == target:
                    continue
                for k in sorted(alloc[d]):
                    if problem.max_batch.get((target, k), 0) < 1:
                        continue
                    if sum(alloc[d].values()) <= 1:
                        continue
                    trial = {n: dict(av) for n, av in alloc.items()}
                    trial[d][k] -= 1
                    if trial[d][k] == 0:
                        del trial[d][k]
                    trial[target][k] = trial[target].get(k, 0) + 1
                    res2 = _batch_lambda_opt(problem, nodes, trial)
                    if res2 is not None and res2[0] > obj + EPS:
                        alloc = trial
                        obj, batch, bottleneck = res2
                        improved = True
                        break
                if improved:
                    break
            if improved or (deadline is not None and time.monotonic() > deadline):
                break

    amats = {nid: alloc[nid] for nid in nodes}
    return _finish_plan(problem, amats, obj, batch, bottleneck)


def _search_size(problem):
    supply = dict(problem.resource_kinds)
    size = 1.0
    for nid in problem.graph.nodes:
        size *= max(len(_node_avecs(problem, nid, supply)), 1)
        if size > 1e12:
            break
    return size


def solve_max_throughput(problem: AllocationProblem, budget: float = 30.0,
                         warm_plan: AllocationPlan | None = None) -> AllocationPlan:
    """Max-min throughput plan; exact within exhaustive reach, greedy+bound beyond."""
    check_feasible(problem)
    warm_obj = warm_plan.objective_throughput - 1e-9 if warm_plan is not None else -1.0
    deadline = time.monotonic() + budget
    if _search_size(problem) <= 2e5:
        try:
            return _solve_exact(problem, budget, warm_obj=warm_obj, deadline=deadline)
        except TimeoutError:
            pass
    plan = _solve_greedy(problem, deadline=deadline)
    bound = _lp_upper_bound(problem)
    plan.gap = max(0.0, (bound - plan.objective_throughput) / bound) if bound > 0 else 0.0
    if warm_plan is not None and warm_plan.objective_throughput > plan.objective_throughput:
        return warm_plan
    return plan


# -- exhaustive oracle ---------------------------------------------------


def brute_force_solve(problem: AllocationProblem) -> AllocationPlan:
    """Exhaustive enumeration over integer replica and batch grids."""
    check_feasible(problem)
    if _search_size(problem) > 1e8:
        raise AllocationError("search space too large for exhaustive enumeration")
    order = forward_order(problem.graph)
    kinds = problem.kinds

    # enumerate replica matrices: per kind, distributions over eligible nodes
    def kind_distributions(k):
        elig = [nid for nid in order if problem.max_batch.get((nid, k), 0) >= 1]
        r = problem.resource_kinds[k]
        results = []

        def rec(i, left, cur):
            if i == len(elig):
                results.append(dict(cur))
                return
            for a in range(left + 1):
                if a:
                    cur[elig[i]] = a
                rec(i + 1, left - a, cur)
                cur.pop(elig[i], None)

        rec(0, r, {})
        return results

    dists = [kind_distributions(k) for k in kinds]
    preds = {nid: problem.predecessors_weighted(nid) for nid in order}

    best = {"obj": -1.0, "plan": None, "tie": None}

    bvec_cache = {}

    def node_bvectors(nid, avec_key, avec):
        """All batch vectors with per-kind per-replica cap, sorted by desc thr."""
        key = (nid, avec_key)
        if key in bvec_cache:
            return bvec_cache[key]
        ks = [k for k in kinds if avec.get(k, 0) > 0]
        ranges = []
        for k in ks:
            ranges.append(range(0, avec[k] * problem.max_batch[(nid, k)] + 1))
        out = []
        for combo in itertools.product(*ranges):
            total = sum(combo)
            if total < 1:
                continue
            thr = 0.0
            for k, b in zip(ks, combo):
                if b:
                    fit = problem.latency[(nid, k)]
                    thr += b / fit.predict(math.ceil(b / avec[k]), 1)
            out.append((thr, total, {k: b for k, b in zip(ks, combo) if b}))
        out.sort(key=lambda x: (-x[0], x[1]))
        bvec_cache[key] = out
        return out

    for combo in itertools.product(*dists):
        amats = {}
        ok = True
        for nid in order:
            avec = {}
            for k, dist in zip(kinds, combo):
                if dist.get(nid, 0) > 0:
                    avec[k] = dist[nid]
            if not avec:
                ok = False
                break
            amats[nid] = avec
        if not ok:
            continue

        lists = []
        for nid in order:
            avec = amats[nid]
            avec_key = tuple(sorted(avec.items()))
            lst = node_bvectors(nid, avec_key, avec)
            if not lst or lst[0][0] < best["obj"] - EPS:
                lists = None
                break
            lists.append(lst)
        if lists is None:
            continue

        totals = [0] * len(order)
        choice = [None] * len(order)
        pos = {nid: i for i, nid in enumerate(order)}
        total_reps = sum(sum(av.values()) for av in amats.values())

        def rec(i, cur_min, cur_bn):
            if i == len(order):
                obj = cur_min
                tie = (total_reps, tuple(
                    tuple(sorted(choice[j].items())) for j in range(len(order))
                ))
                if obj > best["obj"] + EPS or (
                    abs(obj - best["obj"]) <= EPS and best["tie"] is not None and tie < best["tie"]
                ):
                    batch = {}
                    for nid, bv in zip(order, choice):
                        for k, b in bv.items():
                            batch[(nid, k)] = b
                    best["obj"] = max(obj, best["obj"])
                    best["tie"] = tie
                    best["plan"] = _finish_plan(problem, dict(amats), obj, batch, cur_bn)
                return
            nid = order[i]
            cap = None
            if preds[nid]:
                cap = sum(w * totals[pos[g]] for g, w in preds[nid]) + FLOW_TOL
            for thr, total, bv in lists[i]:
                if thr < best["obj"] - EPS:
                    break
                if cap is not None and total > cap:
                    continue
                totals[i] = total
                choice[i] = bv
                if thr < cur_min:
                    rec(i + 1, thr, nid)
                else:
                    rec(i + 1, cur_min, cur_bn)
            choice[i] = None

        rec(0, float("inf"), None)

    if best["plan"] is None:
        raise Infeasible("no feasible plan found by enumeration")
    return best["plan"]


# -- min-max latency variant (auxiliary-variable epigraph form) ----------


def solve_minmax_latency(stage_times, X: int, M: int):
    """Minimize z = max_i f_i(b_i, m_i) with sum b_i = X, sum m_i <= M.

    stage_times: list of callables f(b, m) or objects with .predict(b, m).
    Returns (list of (b_i, m_i), z).
    """
    n = len(stage_times)
    if X < n:
        raise Infeasible("total batch %d < number of stages %d" % (X, n))
    if M < n:
        raise Infeasible("total machines %d < number of stages %d" % (M, n))

    fs = []
    for f in stage_times:
        fs.append(f.predict if hasattr(f, "predict") else f)

    from functools import lru_cache

    @lru_cache(maxsize=None)
    def rec(i, x, mm):
        remaining = n - i - 1
        if i == n - 1:
            return fs[i](x, mm), ((x, mm),)
        best_z, best_assign = float("inf"), None
        for b in range(1, x - remaining + 1):
            for m in range(1, mm - remaining + 1):
                here = fs[i](b, m)
                if here >= best_z:
                    continue
                sub_z, sub = rec(i + 1, x - b, mm - m)
                z = max(here, sub_z)
                if z < best_z:
                    best_z, best_assign = z, ((b, m),) + sub
        return best_z, best_assign

    z, assign = rec(0, X, M)
    return list(assign), z


# -- autoscaling replan --------------------------------------------------


def replan_with_extra(problem: AllocationProblem, plan: AllocationPlan, kind: str,
                      budget: float = 30.0) -> AllocationPlan:
    """Re-solve with one extra unit of `kind`, warm-started from `plan`."""
    if not any(problem.max_batch.get((nid, kind), 0) >= 1 for nid in problem.graph.nodes):
        return plan
    resources = dict(problem.resource_kinds)
    resources[kind] = resources.get(kind, 0) + 1
    p2 = AllocationProblem(
        graph=problem.graph,
        resource_kinds=resources,
        max_batch=problem.max_batch,
        latency=problem.latency,
        flow_mode=problem.flow_mode,
        visit_rates=problem.visit_rates,
    )
    new = solve_max_throughput(p2, budget=budget, warm_plan=plan)
    if new.objective_throughput < plan.objective_throughput:
        return plan
    return new
