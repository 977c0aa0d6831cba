"""Glue between profiling, planning, and simulation: the offline workflow."""

from __future__ import annotations

from .allocator import AllocationProblem, solve_max_throughput
from .latency import fit_pwl, profile
from .pipeline import PipelineGraph
from .scenarios import ground_truth_models


def profile_components(graph: PipelineGraph, gt_models: dict, max_batch: dict,
                       improvement_threshold: float = 0.05, max_segments: int = 4,
                       penalty=None):
    """Profile and fit every component; returns {node: {"points", "fit"}}."""
    out = {}
    for nid in sorted(graph.nodes):
        model = gt_models[nid]
        m = max(max_batch.get(nid, {}).values() or [1])
        points = profile(model.mean_batch_time, m, improvement_threshold)
        fit = fit_pwl(points, max_segments=max_segments, penalty=penalty)
        out[nid] = {"points": points, "fit": fit}
    return out


def build_problem(graph: PipelineGraph, fits: dict, max_batch: dict, resources: dict,
                  flow_mode: str = "weighted") -> AllocationProblem:
    """Assemble the allocation instance from per-node fits and per-kind caps.

    fits: {node: PwlFit}; max_batch: {node: {kind: per-replica cap}}.
    """
    mb = {}
    lat = {}
    for nid in graph.nodes:
        caps = max_batch.get(nid, {})
        for k in graph.nodes[nid].resource_affinity:
            m = int(caps.get(k, 0))
            mb[(nid, k)] = m
            if m >= 1:
                fit = fits[nid]
                m_eff = min(m, fit.domain_max)
                mb[(nid, k)] = m_eff
                lat[(nid, k)] = fit
    return AllocationProblem(
        graph=graph,
        resource_kinds=dict(resources),
        max_batch=mb,
        latency=lat,
        flow_mode=flow_mode,
    )


def plan_template(template: dict, flow_mode: str = "weighted", budget: float = 30.0):
    """Profile, fit, and solve a scenario template end to end."""
    from .pipeline import pipeline_from_dict

    graph = pipeline_from_dict(template["pipeline"])
    gt = ground_truth_models(template["ground_truth"])
    profiled = profile_components(graph, gt, template["max_batch"])
    fits = {nid: v["fit"] for nid, v in profiled.items()}
    problem = build_problem(graph, fits, template["max_batch"], template["resources"],
                            flow_mode=flow_mode)
    plan = solve_max_throughput(problem, budget=budget)
    return graph, gt, problem, plan
