"""Command-line workflow: profile, plan, simulate, ablate, report."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

from .allocator import AllocationError, AllocationPlan, Infeasible, solve_max_throughput
from .latency import PwlFit, fit_pwl, profile
from .pipeline import PipelineError, parse_pipeline, serialize_pipeline
from .scenarios import TEMPLATES, get_template, ground_truth_models
from .simulator import MetricsReport, ScenarioConfig, run, toggle_features
from .workflow import build_problem, profile_components

SCHEMA_VERSION = 1


class CliError(Exception):
    pass


def _digest(path):
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


def _write_json(path, payload):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError("missing file: %s" % path)
    except json.JSONDecodeError as exc:
        raise CliError("invalid JSON in %s: %s" % (path, exc))


def _load_inputs(args):
    """Resolve --template or explicit files into (graph, gt spec, max_batch, resources)."""
    if getattr(args, "template", None):
        tpl = get_template(args.template)
        graph = parse_pipeline(json.dumps(tpl["pipeline"]))
        return graph, tpl["ground_truth"], tpl["max_batch"], tpl["resources"], {}
    digests = {}
    if not args.pipeline:
        raise CliError("either --pipeline or --template is required")
    graph = parse_pipeline(Path(args.pipeline).read_text())
    digests["pipeline"] = _digest(args.pipeline)
    gt_doc = _load_json(args.ground_truth) if getattr(args, "ground_truth", None) else None
    gt_spec, max_batch = None, None
    if gt_doc is not None:
        gt_spec = gt_doc.get("components", gt_doc)
        max_batch = gt_doc.get("max_batch", {})
        digests["ground_truth"] = _digest(args.ground_truth)
    resources = None
    if getattr(args, "resources", None):
        resources = _load_json(args.resources)
        digests["resources"] = _digest(args.resources)
    return graph, gt_spec, max_batch, resources, digests


# -- profile -------------------------------------------------------------


def cmd_profile(args):
    graph, gt_spec, max_batch, _, digests = _load_inputs(args)
    if gt_spec is None:
        raise CliError("--ground-truth is required")
    gt = ground_truth_models(gt_spec)
    missing = sorted(set(graph.nodes) - set(gt))
    if missing:
        raise CliError("ground truth missing for components: %s" % missing)
    profiled = profile_components(graph, gt, max_batch or {},
                                  improvement_threshold=args.threshold)
    out = Path(args.out)
    for nid, res in sorted(profiled.items()):
        payload = {
            "schema_version": SCHEMA_VERSION,
            "inputs": digests,
            "component": nid,
            "points": [
                {"batch": p.batch, "replicas": p.replicas,
                 "mean_batch_time": p.mean_batch_time, "samples": p.samples}
                for p in res["points"]
            ],
        }
        payload.update(res["fit"].to_dict())
        _write_json(out / ("profile_%s.json" % nid), payload)
    print("profiled %d components -> %s" % (len(profiled), out))


def _load_fits(fits_dir, graph):
    fits = {}
    for nid in graph.nodes:
        path = Path(fits_dir) / ("profile_%s.json" % nid)
        if not path.exists():
            raise CliError("no fit artifact for component %r (%s)" % (nid, path))
        doc = _load_json(path)
        fits[nid] = PwlFit.from_dict(doc)
    return fits


# -- plan ----------------------------------------------------------------


def cmd_plan(args):
    graph, gt_spec, max_batch, resources, digests = _load_inputs(args)
    if args.fits:
        fits = _load_fits(args.fits, graph)
    elif gt_spec is not None:
        gt = ground_truth_models(gt_spec)
        profiled = profile_components(graph, gt, max_batch or {})
        fits = {nid: v["fit"] for nid, v in profiled.items()}
    else:
        raise CliError("need --fits or --ground-truth to plan")
    if resources is None:
        raise CliError("--resources (or --template) is required")
    problem = build_problem(graph, fits, max_batch or {}, resources,
                            flow_mode="strict" if args.strict_flow else "weighted")
    try:
        plan = solve_max_throughput(problem, budget=args.budget)
    except Infeasible as exc:
        raise CliError("infeasible: %s" % exc)
    payload = {"schema_version": SCHEMA_VERSION, "inputs": digests}
    payload.update(plan.to_dict())
    _write_json(args.out, payload)
    print("objective throughput: %.6f items/s  bottleneck: %s  gap: %.4f"
          % (plan.objective_throughput, plan.bottleneck, plan.gap))
    for row in plan.to_rows():
        print("  %-12s %-6s batch=%-4d replicas=%d"
              % (row["component"], row["kind"], row["batch"], row["replicas"]))


# -- simulate ------------------------------------------------------------


def _apply_overrides(scenario, args):
    for tog in args.toggle or []:
        try:
            name, val = tog.split("=", 1)
        except ValueError:
            raise CliError("bad --toggle %r; expected name=on|off" % tog)
        if name not in ("batching", "pipelining", "allocation", "component_allocation"):
            raise CliError("unknown toggle %r" % name)
        if name == "allocation":
            name = "component_allocation"
        scenario = replace(scenario, **{name: val == "on"})
    if args.mitigation is not None:
        scenario = replace(scenario, mitigation_enabled=args.mitigation == "on")
    if getattr(args, "autoscale", None) is not None:
        scenario = replace(scenario, autoscale_enabled=args.autoscale == "on")
    if args.seed is not None:
        scenario = replace(scenario, seed=args.seed)
    return scenario


def _report_rows(rate, seed, rep):
    return {
        "rate": rate,
        "seed": seed,
        "throughput": rep.throughput,
        "goodput": rep.goodput,
        "violation_rate": rep.slo_violation_rate,
        "p50": rep.latency_p50,
        "p95": rep.latency_p95,
        "p99": rep.latency_p99,
    }


def _write_timeseries_csv(path, report):
    cols = ["t", "arrivals", "completions", "violations", "p50", "p95"]
    util_cols = sorted(k for k in (report.timeseries[0] if report.timeseries else {})
                       if k.startswith("util_"))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols + util_cols)
        for row in report.timeseries:
            w.writerow([row[c] for c in cols] + ["%.6f" % row[c] for c in util_cols])


def cmd_simulate(args):
    graph, gt_spec, max_batch, resources, digests = _load_inputs(args)
    if gt_spec is None:
        raise CliError("--ground-truth (or --template) is required")
    gt = ground_truth_models(gt_spec)
    scenario = ScenarioConfig.from_dict(_load_json(args.scenario)) if args.scenario \
        else ScenarioConfig()
    if args.scenario:
        digests["scenario"] = _digest(args.scenario)
    scenario = _apply_overrides(scenario, args)

    if args.plan:
        plan = AllocationPlan.from_dict(_load_json(args.plan))
        digests["plan"] = _digest(args.plan)
        problem = None
    else:
        if resources is None:
            raise CliError("need --plan or --resources/--template")
        profiled = profile_components(graph, gt, max_batch or {})
        fits = {nid: v["fit"] for nid, v in profiled.items()}
        problem = build_problem(graph, fits, max_batch or {}, resources)
        plan = solve_max_throughput(problem)

    rates = [float(r) for r in (args.rates.split(",") if args.rates
                                else [str(scenario.arrival_rate_rps)])]
    seeds = [scenario.seed + i for i in range(args.repeats)]
    mb_flat = {(nid, k): m for nid, kinds in (max_batch or {}).items()
               for k, m in kinds.items()}

    def one(point):
        rate, seed = point
        sc = replace(scenario, arrival_rate_rps=rate, seed=seed)
        rep, _ = run(graph, plan, gt, sc, problem=problem, max_batch=mb_flat)
        return rate, seed, rep

    points = [(r, s) for r in rates for s in seeds]
    workers = int(os.environ.get("RAGFLOW_THREADS", "1"))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, points))
    else:
        results = [one(p) for p in points]
    results.sort(key=lambda x: (x[0], x[1]))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = []
    for rate, seed, rep in results:
        stem = "run_rate%g_seed%d" % (rate, seed)
        payload = {
            "schema_version": SCHEMA_VERSION,
            "inputs": digests,
            "scenario": replace(scenario, arrival_rate_rps=rate, seed=seed).to_dict(),
        }
        payload.update(rep.to_dict())
        _write_json(out / (stem + ".json"), payload)
        _write_timeseries_csv(out / (stem + "_timeseries.csv"), rep)
        summary.append(_report_rows(rate, seed, rep))
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(summary[0].keys()))
        w.writeheader()
        w.writerows(summary)
    print("wrote %d runs -> %s" % (len(results), out))


# -- ablate --------------------------------------------------------------

ABLATION_STEPS = [
    ("baseline", dict(batching=False, pipelining=False, component_allocation=False)),
    ("+batching", dict(batching=True, pipelining=False, component_allocation=False)),
    ("+pipelining", dict(batching=True, pipelining=True, component_allocation=False)),
    ("+allocation", dict(batching=True, pipelining=True, component_allocation=True)),
]


def cmd_ablate(args):
    graph, gt_spec, max_batch, resources, digests = _load_inputs(args)
    if gt_spec is None or resources is None:
        raise CliError("--ground-truth and --resources (or --template) are required")
    gt = ground_truth_models(gt_spec)
    scenario = ScenarioConfig.from_dict(_load_json(args.scenario)) if args.scenario \
        else ScenarioConfig()
    if args.scenario:
        digests["scenario"] = _digest(args.scenario)
    if args.seed is not None:
        scenario = replace(scenario, seed=args.seed)
    profiled = profile_components(graph, gt, max_batch or {})
    fits = {nid: v["fit"] for nid, v in profiled.items()}
    problem = build_problem(graph, fits, max_batch or {}, resources)
    plan = solve_max_throughput(problem)
    mb_flat = {(nid, k): m for nid, kinds in (max_batch or {}).items()
               for k, m in kinds.items()}
    # ablation measures sustainable throughput, so saturate the pipeline
    # unless the caller pinned a rate explicitly
    rate = args.rate if args.rate is not None else 3.0 * plan.objective_throughput
    scenario = replace(scenario, arrival_rate_rps=rate, mitigation_enabled=False)

    rows = []
    prev = None
    for name, toggles in ABLATION_STEPS:
        sc = toggle_features(scenario, **toggles)
        rep, _ = run(graph, plan, gt, sc, max_batch=mb_flat)
        mult = rep.throughput / prev if prev else 1.0
        rows.append({"config": name, "throughput": rep.throughput,
                     "multiplier_vs_prev": mult})
        prev = rep.throughput if rep.throughput > 0 else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["config", "throughput", "multiplier_vs_prev"])
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print("%-12s throughput=%.4f  x%.2f" % (r["config"], r["throughput"],
                                                r["multiplier_vs_prev"]))


# -- report --------------------------------------------------------------


def cmd_report(args):
    rundir = Path(args.run)
    summary = rundir / "summary.csv"
    if not summary.exists():
        raise CliError("no summary.csv in %s" % rundir)
    with open(summary) as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise CliError("summary.csv is empty")
    print("%-8s %-6s %-12s %-12s %-12s %-10s" % ("rate", "seed", "throughput",
                                                 "goodput", "violation%", "p95"))
    for r in rows:
        print("%-8s %-6s %-12.4f %-12.4f %-12.2f %-10.4f"
              % (r["rate"], r["seed"], float(r["throughput"]), float(r["goodput"]),
                 100 * float(r["violation_rate"]), float(r["p95"])))
    plot = rundir / "plot.csv"
    with open(plot, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        w.writeheader()
        w.writerows(rows)
    print("plot-ready CSV -> %s" % plot)


# -- template ------------------------------------------------------------


def cmd_template(args):
    tpl = get_template(args.name)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "pipeline.json", tpl["pipeline"])
    _write_json(out / "ground_truth.json",
                {"components": tpl["ground_truth"], "max_batch": tpl["max_batch"]})
    _write_json(out / "resources.json", tpl["resources"])
    _write_json(out / "scenario.json", ScenarioConfig(batch_timeout_s=0.5).to_dict())
    print("wrote %s template -> %s" % (args.name, out))


# -- entry point ---------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="ragflow",
                                description="RAG pipeline planning and simulation")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, scenario=False, resources=False):
        sp.add_argument("--pipeline", help="pipeline config JSON")
        sp.add_argument("--template", choices=sorted(TEMPLATES),
                        help="use a built-in scenario template")
        sp.add_argument("--ground-truth", dest="ground_truth",
                        help="ground-truth latency spec JSON")
        sp.add_argument("--seed", type=int, default=None)
        if scenario:
            sp.add_argument("--scenario", help="scenario config JSON")
        if resources:
            sp.add_argument("--resources", help="resource pool JSON")

    sp = sub.add_parser("profile", help="profile components and fit latency models")
    common(sp)
    sp.add_argument("--threshold", type=float, default=0.05)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_profile)

    sp = sub.add_parser("plan", help="solve the batch/replica allocation")
    common(sp, resources=True)
    sp.add_argument("--fits", help="directory of profile_<node>.json artifacts")
    sp.add_argument("--strict-flow", action="store_true")
    sp.add_argument("--budget", type=float, default=30.0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("simulate", help="simulate serving under a plan")
    common(sp, scenario=True, resources=True)
    sp.add_argument("--plan", help="plan JSON from `ragflow plan`")
    sp.add_argument("--rates", help="comma-separated arrival-rate sweep")
    sp.add_argument("--repeats", type=int, default=1)
    sp.add_argument("--toggle", action="append",
                    help="batching|pipelining|allocation=on/off")
    sp.add_argument("--mitigation", choices=["on", "off"], default=None)
    sp.add_argument("--autoscale", choices=["on", "off"], default=None)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("ablate", help="incremental feature ablation")
    common(sp, scenario=True, resources=True)
    sp.add_argument("--rate", type=float, default=None,
                    help="arrival rate (default: 3x planned capacity)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("report", help="summarize a run directory")
    sp.add_argument("--run", required=True)
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("template", help="materialize a built-in scenario template")
    sp.add_argument("name", choices=sorted(TEMPLATES))
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_template)

    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (CliError, PipelineError, AllocationError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
