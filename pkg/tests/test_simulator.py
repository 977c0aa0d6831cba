"""Discrete-event simulator: queueing oracles, toggles, conservation, traces."""

import json
from dataclasses import replace

from ragflow.allocator import AllocationPlan
from ragflow.latency import GroundTruthLatency
from ragflow.pipeline import expected_visit_rates, parse_pipeline
from ragflow.simulator import (
    ScenarioConfig,
    generate_arrivals,
    run,
    toggle_features,
)


def single_node():
    g = parse_pipeline(json.dumps({
        "nodes": [{"id": "n", "kind": "Custom", "affinity": ["cpu"]}],
        "edges": [], "entry": "n", "exits": ["n"]}))
    plan = AllocationPlan(batch={("n", "cpu"): 1}, replicas={("n", "cpu"): 1},
                          objective_throughput=1.0, bottleneck="n")
    gt = {"n": GroundTruthLatency(family="amortized_batch", c0=1.0, c1=0.0)}
    return g, plan, gt


def three_stage_chain():
    g = parse_pipeline(json.dumps({
        "nodes": [{"id": x, "kind": "Custom", "affinity": ["cpu"]}
                  for x in ("a", "b", "c")],
        "edges": [{"from": "a", "to": "b"}, {"from": "b", "to": "c"}],
        "entry": "a", "exits": ["c"]}))
    plan = AllocationPlan(batch={(x, "cpu"): 1 for x in "abc"},
                          replicas={(x, "cpu"): 1 for x in "abc"},
                          objective_throughput=1.0, bottleneck="a")
    gt = {x: GroundTruthLatency(family="amortized_batch", c0=1.0, c1=0.0)
          for x in "abc"}
    return g, plan, gt


# -- queueing oracles ------------------------------------------------------


def test_dd1_underloaded_exact():
    g, plan, gt = single_node()
    sc = ScenarioConfig(arrival_rate_rps=0.5, duration_s=100.0, slo_s=10.0, seed=1,
                        arrival_process="deterministic", batching=False, noise=False)
    rep, reqs = run(g, plan, gt, sc)
    lats = [r.completion_time - r.arrival_time for r in reqs if r.completion_time]
    assert lats
    assert all(abs(l - 1.0) < 1e-12 for l in lats)
    assert abs(rep.throughput - len(lats) / 100.0) < 1e-12
    assert rep.slo_violation_rate == 0.0


def test_lindley_recursion_oracle():
    # FIFO batch=1, Poisson arrivals, deterministic 1 s service: simulated
    # waits must equal the Lindley recursion on the same arrival sequence
    g, plan, gt = single_node()
    sc = ScenarioConfig(arrival_rate_rps=0.8, duration_s=2000.0, slo_s=1e9, seed=7,
                        arrival_process="poisson", batching=False, noise=False)
    rep, reqs = run(g, plan, gt, sc)
    arr = generate_arrivals(0.8, 2000.0, 7, "poisson")
    S = 1.0
    W = [0.0]
    for i in range(1, len(arr)):
        W.append(max(0.0, W[-1] + S - (arr[i] - arr[i - 1])))
    waits = []
    for r in reqs:
        if r.trace:
            _, enq, start, _ = r.trace[0]
            waits.append(start - enq)
    n = min(len(W), len(waits))
    assert n > 1000
    maxerr = max(abs(a - b) for a, b in zip(W[:n], waits[:n]))
    assert maxerr <= 1e-9


def test_arrivals_deterministic_from_seed():
    a1 = generate_arrivals(2.0, 50.0, 13, "poisson")
    a2 = generate_arrivals(2.0, 50.0, 13, "poisson")
    assert a1 == a2
    det = generate_arrivals(2.0, 10.0, 0, "deterministic")
    gaps = [b - a for a, b in zip(det, det[1:])]
    assert all(abs(gp - 0.5) < 1e-12 for gp in gaps)


# -- feature toggles -------------------------------------------------------


def test_pipelining_speedup_three_stages():
    g, plan, gt = three_stage_chain()
    sc = ScenarioConfig(arrival_rate_rps=2.0, duration_s=300.0, slo_s=1e9, seed=3,
                        batching=False, noise=False)
    rep_on, _ = run(g, plan, gt, sc)
    rep_off, _ = run(g, plan, gt, toggle_features(sc, pipelining=False))
    ratio = rep_on.throughput / rep_off.throughput
    assert ratio >= 2.5  # analytic bound 3x for 3 balanced stages


def test_batching_speedup_amortized():
    g = parse_pipeline(json.dumps({
        "nodes": [{"id": "n", "kind": "Generator", "affinity": ["gpu"]}],
        "edges": [], "entry": "n", "exits": ["n"]}))
    plan = AllocationPlan(batch={("n", "gpu"): 32}, replicas={("n", "gpu"): 1},
                          objective_throughput=32 / 13.2, bottleneck="n")
    gt = {"n": GroundTruthLatency(family="amortized_batch", c0=10.0, c1=0.1)}
    sc = ScenarioConfig(arrival_rate_rps=3.0, duration_s=2000.0, slo_s=1e9, seed=5,
                        noise=False)
    r_b, _ = run(g, plan, gt, sc)
    r_nb, _ = run(g, plan, gt, toggle_features(sc, batching=False))
    assert r_b.throughput / r_nb.throughput >= 8.0


def test_toggle_all_on_is_identity():
    g, plan, gt = three_stage_chain()
    sc = ScenarioConfig(arrival_rate_rps=0.6, duration_s=120.0, slo_s=1e9, seed=11)
    rep1, _ = run(g, plan, gt, sc)
    rep2, _ = run(g, plan, gt, toggle_features(
        sc, batching=True, pipelining=True, component_allocation=True))
    assert json.dumps(rep1.to_dict(), sort_keys=True) == \
        json.dumps(rep2.to_dict(), sort_keys=True)


def test_toggle_returns_new_config():
    sc = ScenarioConfig()
    sc2 = toggle_features(sc, batching=False)
    assert sc.batching is True
    assert sc2.batching is False
    assert sc2.pipelining == sc.pipelining


# -- conservation, determinism, causality ----------------------------------


def test_conservation_exact():
    g, plan, gt = three_stage_chain()
    for rate in (0.5, 2.0, 5.0):
        sc = ScenarioConfig(arrival_rate_rps=rate, duration_s=60.0, slo_s=4.0,
                            seed=17, noise=True)
        rep, _ = run(g, plan, gt, sc)
        assert rep.arrivals == rep.completions + rep.in_flight_at_end \
            + rep.buffered_at_end


def test_bit_identical_determinism():
    g, plan, gt = three_stage_chain()
    sc = ScenarioConfig(arrival_rate_rps=1.5, duration_s=120.0, slo_s=5.0, seed=23,
                        mitigation_enabled=True, noise=True)
    rep1, reqs1 = run(g, plan, gt, sc)
    rep2, reqs2 = run(g, plan, gt, sc)
    assert json.dumps(rep1.to_dict(), sort_keys=True) == \
        json.dumps(rep2.to_dict(), sort_keys=True)
    assert [r.trace for r in reqs1] == [r.trace for r in reqs2]


def test_causality_and_trace_consistency():
    g, plan, gt = three_stage_chain()
    sc = ScenarioConfig(arrival_rate_rps=1.2, duration_s=100.0, slo_s=1e9, seed=29,
                        noise=True)
    _, reqs = run(g, plan, gt, sc)
    assert any(r.trace for r in reqs)
    for r in reqs:
        prev_fin = r.arrival_time
        for node, enq, start, fin in r.trace:
            assert enq >= r.arrival_time - 1e-12
            assert enq >= prev_fin - 1e-12
            assert start >= enq - 1e-12
            assert fin >= start
            prev_fin = fin
        if r.completion_time is not None:
            assert abs(r.completion_time - r.trace[-1][3]) < 1e-12


def test_report_sanity_invariants():
    g, plan, gt = three_stage_chain()
    sc = ScenarioConfig(arrival_rate_rps=2.5, duration_s=90.0, slo_s=4.0, seed=31)
    rep, _ = run(g, plan, gt, sc)
    assert 0.0 <= rep.slo_violation_rate <= 1.0
    assert rep.goodput <= rep.throughput + 1e-12
    assert rep.latency_p50 <= rep.latency_p95 <= rep.latency_p99
    for u in rep.utilization.values():
        assert 0.0 <= u <= 1.0 + 1e-9
    assert len(rep.timeseries) == 90
    for row in rep.timeseries:
        assert row["p50"] <= row["p95"] + 1e-12


def test_underload_p95_bounded():
    # under 50% load, noiseless: p95 within 2x the zero-queue path time
    g, plan, gt = three_stage_chain()
    sc = ScenarioConfig(arrival_rate_rps=0.4, duration_s=400.0, slo_s=1e9, seed=37,
                        batching=False, noise=False)
    rep, _ = run(g, plan, gt, sc)
    assert rep.latency_p95 <= 2.0 * 3.0


# -- routing statistics ----------------------------------------------------


def branchy_graph():
    g = parse_pipeline(json.dumps({
        "nodes": [
            {"id": "a", "kind": "Custom", "affinity": ["cpu"]},
            {"id": "b", "kind": "Custom", "affinity": ["cpu"]},
            {"id": "c", "kind": "Custom", "affinity": ["cpu"]},
            {"id": "d", "kind": "Custom", "affinity": ["cpu"]},
        ],
        "edges": [
            {"from": "a", "to": "b", "kind": "conditional", "p": 0.3},
            {"from": "a", "to": "c", "kind": "conditional", "p": 0.7},
            {"from": "b", "to": "d"},
            {"from": "c", "to": "d"},
        ],
        "entry": "a", "exits": ["d"]}))
    plan = AllocationPlan(batch={(x, "cpu"): 1 for x in "abcd"},
                          replicas={(x, "cpu"): 1 for x in "abcd"},
                          objective_throughput=1.0, bottleneck="a")
    gt = {x: GroundTruthLatency(family="amortized_batch", c0=0.05, c1=0.0)
          for x in "abcd"}
    return g, plan, gt


def test_visit_counts_match_expected_rates():
    g, plan, gt = branchy_graph()
    sc = ScenarioConfig(arrival_rate_rps=4.0, duration_s=1500.0, slo_s=1e9, seed=41,
                        noise=False)
    _, reqs = run(g, plan, gt, sc)
    visits = {nid: 0 for nid in g.nodes}
    n_entered = 0
    for r in reqs:
        if not r.trace:
            continue
        n_entered += 1
        for node, *_ in r.trace:
            visits[node] += 1
    rates = expected_visit_rates(g)
    assert n_entered > 3000
    for nid in ("b", "c"):
        p = rates[nid]
        se = (p * (1 - p) / n_entered) ** 0.5
        assert abs(visits[nid] / n_entered - p) <= 3 * se + 1e-9


def test_recursion_depth_capped():
    g = parse_pipeline(json.dumps({
        "nodes": [{"id": "r", "kind": "Retriever", "affinity": ["cpu"]},
                  {"id": "g", "kind": "Generator", "affinity": ["cpu"]}],
        "edges": [{"from": "r", "to": "g"},
                  {"from": "g", "to": "r", "kind": "recursive", "p": 0.9,
                   "max_depth": 3}],
        "entry": "r", "exits": ["g"]}))
    plan = AllocationPlan(batch={("r", "cpu"): 1, ("g", "cpu"): 1},
                          replicas={("r", "cpu"): 1, ("g", "cpu"): 1},
                          objective_throughput=1.0, bottleneck="r")
    gt = {x: GroundTruthLatency(family="amortized_batch", c0=0.05, c1=0.0)
          for x in ("r", "g")}
    sc = ScenarioConfig(arrival_rate_rps=1.0, duration_s=300.0, slo_s=1e9, seed=43,
                        noise=False)
    _, reqs = run(g, plan, gt, sc)
    for r in reqs:
        r_visits = sum(1 for node, *_ in r.trace if node == "r")
        assert r_visits <= 4  # first pass + at most max_depth loops


# -- mitigation plumbing ----------------------------------------------------


def test_admission_log_alternates_pause_resume():
    g, plan, gt = three_stage_chain()
    sc = ScenarioConfig(arrival_rate_rps=1.5, duration_s=200.0, slo_s=4.0, seed=47,
                        mitigation_enabled=True, noise=True)
    rep, _ = run(g, plan, gt, sc)
    gate = [e for e in rep.actions_log if e["action"] in ("pause", "resume")]
    # pauses and resumes strictly alternate, starting with a pause
    for i, e in enumerate(gate):
        assert e["action"] == ("pause" if i % 2 == 0 else "resume")


def test_mitigation_off_has_empty_action_log():
    g, plan, gt = three_stage_chain()
    sc = ScenarioConfig(arrival_rate_rps=1.5, duration_s=100.0, slo_s=2.0, seed=51)
    rep, _ = run(g, plan, gt, sc)
    assert rep.actions_log == []


def test_scenario_round_trip():
    sc = ScenarioConfig(arrival_rate_rps=3.5, duration_s=42.0, slo_s=7.0, seed=9,
                        batch_timeout_s=0.25, batching=False,
                        mitigation_enabled=True, autoscale_enabled=True,
                        spare_pool={"gpu": 2}, cooldown_s=3.0, pause_margin_s=1.0,
                        ewma_alpha=0.3, arrival_process="deterministic", noise=False)
    assert ScenarioConfig.from_dict(sc.to_dict()) == sc


def test_run_seed_override():
    g, plan, gt = single_node()
    sc = ScenarioConfig(arrival_rate_rps=1.0, duration_s=50.0, slo_s=1e9, seed=1)
    rep_a, _ = run(g, plan, gt, sc, seed=99)
    rep_b, _ = run(g, plan, gt, replace(sc, seed=99))
    assert json.dumps(rep_a.to_dict(), sort_keys=True) == \
        json.dumps(rep_b.to_dict(), sort_keys=True)
