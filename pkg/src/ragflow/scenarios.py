"""Scenario library: pipeline topologies with synthetic latency templates.

Each template bundles a pipeline config, per-component ground-truth latency
parameters, per-replica batch caps, and a resource pool, chosen so the
documented bottleneck (grader for the conditional-refinement pipeline,
generator for the memory-augmented one) emerges by construction.
"""

from __future__ import annotations

from .latency import GroundTruthLatency
from .pipeline import pipeline_from_dict


def crag_template():
    """Conditional refinement: grade retrieved docs, rewrite + web-search on a miss."""
    pipeline = {
        "nodes": [
            {"id": "retrieve", "kind": "Retriever", "affinity": ["cpu"], "fanout": 1.0,
             "config": {"top_k": 6}},
            {"id": "grade", "kind": "Grader", "affinity": ["gpu"], "fanout": 1.0, "config": {}},
            {"id": "rewrite", "kind": "Rewriter", "affinity": ["gpu"], "fanout": 1.0, "config": {}},
            {"id": "websearch", "kind": "WebSearch", "affinity": ["cpu"], "fanout": 1.0,
             "config": {}},
            {"id": "augment", "kind": "Augmenter", "affinity": ["cpu"], "fanout": 1.0,
             "config": {"mode": "concatenate"}},
            {"id": "generate", "kind": "Generator", "affinity": ["gpu"], "fanout": 1.0,
             "config": {"max_tokens": 30}},
        ],
        "edges": [
            {"from": "retrieve", "to": "grade"},
            {"from": "grade", "to": "augment", "kind": "conditional", "p": 0.7},
            {"from": "grade", "to": "rewrite", "kind": "conditional", "p": 0.3},
            {"from": "rewrite", "to": "websearch"},
            {"from": "websearch", "to": "augment"},
            {"from": "augment", "to": "generate"},
        ],
        "entry": "retrieve",
        "exits": ["generate"],
    }
    ground_truth = {
        "retrieve": {"family": "sublinear", "c": 0.08, "alpha": 0.6},
        # grader scores every query+context pair: heavy, poorly amortized
        "grade": {"family": "constant_per_query", "c": 0.30},
        "rewrite": {"family": "amortized_batch", "c0": 0.25, "c1": 0.02},
        "websearch": {"family": "constant_per_query", "c": 0.12},
        "augment": {"family": "amortized_batch", "c0": 0.01, "c1": 0.005},
        "generate": {"family": "amortized_batch", "c0": 0.40, "c1": 0.02},
    }
    max_batch = {
        "retrieve": {"cpu": 32},
        "grade": {"gpu": 16},
        "rewrite": {"gpu": 16},
        "websearch": {"cpu": 32},
        "augment": {"cpu": 64},
        "generate": {"gpu": 32},
    }
    resources = {"cpu": 4, "gpu": 6}
    return {
        "name": "crag",
        "pipeline": pipeline,
        "ground_truth": ground_truth,
        "max_batch": max_batch,
        "resources": resources,
    }


def memorag_template():
    """Linear memory-augmented pipeline; generator-dominated with strong amortization."""
    pipeline = {
        "nodes": [
            {"id": "memory", "kind": "Retriever", "affinity": ["gpu"], "fanout": 1.0,
             "config": {}},
            {"id": "augment", "kind": "Augmenter", "affinity": ["cpu"], "fanout": 1.0,
             "config": {"mode": "summary"}},
            {"id": "compress", "kind": "Custom", "affinity": ["gpu"], "fanout": 1.0,
             "config": {"stage": "context-compression"}},
            {"id": "generate", "kind": "Generator", "affinity": ["gpu"], "fanout": 1.0,
             "config": {}},
        ],
        "edges": [
            {"from": "memory", "to": "augment"},
            {"from": "augment", "to": "compress"},
            {"from": "compress", "to": "generate"},
        ],
        "entry": "memory",
        "exits": ["generate"],
    }
    ground_truth = {
        "memory": {"family": "amortized_batch", "c0": 0.3, "c1": 0.005},
        "augment": {"family": "amortized_batch", "c0": 0.02, "c1": 0.004},
        "compress": {"family": "amortized_batch", "c0": 0.1, "c1": 0.005},
        "generate": {"family": "amortized_batch", "c0": 1.5, "c1": 0.02},
    }
    max_batch = {
        "memory": {"gpu": 64},
        "augment": {"cpu": 64},
        "compress": {"gpu": 64},
        "generate": {"gpu": 32},
    }
    resources = {"cpu": 2, "gpu": 4}
    return {
        "name": "memorag",
        "pipeline": pipeline,
        "ground_truth": ground_truth,
        "max_batch": max_batch,
        "resources": resources,
    }


def ircot_template():
    """Interleaved retrieve/generate loop, capped at 10 steps."""
    pipeline = {
        "nodes": [
            {"id": "retrieve", "kind": "Retriever", "affinity": ["cpu"], "fanout": 1.0,
             "config": {"top_k": 6}},
            {"id": "generate", "kind": "Generator", "affinity": ["gpu"], "fanout": 1.0,
             "config": {"max_tokens": 30}},
        ],
        "edges": [
            {"from": "retrieve", "to": "generate"},
            {"from": "generate", "to": "retrieve", "kind": "recursive", "p": 0.5,
             "max_depth": 10},
        ],
        "entry": "retrieve",
        "exits": ["generate"],
    }
    ground_truth = {
        "retrieve": {"family": "sublinear", "c": 0.06, "alpha": 0.6},
        "generate": {"family": "amortized_batch", "c0": 0.6, "c1": 0.03},
    }
    max_batch = {
        "retrieve": {"cpu": 32},
        "generate": {"gpu": 32},
    }
    resources = {"cpu": 2, "gpu": 4}
    return {
        "name": "ircot",
        "pipeline": pipeline,
        "ground_truth": ground_truth,
        "max_batch": max_batch,
        "resources": resources,
    }


def hipporag_template():
    """Linear graph-retrieval pipeline: entity extraction, graph walk, generation."""
    pipeline = {
        "nodes": [
            {"id": "extract", "kind": "Custom", "affinity": ["gpu"], "fanout": 1.0,
             "config": {"stage": "entity-extraction"}},
            {"id": "graphwalk", "kind": "Retriever", "affinity": ["cpu"], "fanout": 1.0,
             "config": {"stage": "personalized-walk"}},
            {"id": "augment", "kind": "Augmenter", "affinity": ["cpu"], "fanout": 1.0,
             "config": {"mode": "selection"}},
            {"id": "generate", "kind": "Generator", "affinity": ["gpu"], "fanout": 1.0,
             "config": {}},
        ],
        "edges": [
            {"from": "extract", "to": "graphwalk"},
            {"from": "graphwalk", "to": "augment"},
            {"from": "augment", "to": "generate"},
        ],
        "entry": "extract",
        "exits": ["generate"],
    }
    ground_truth = {
        "extract": {"family": "amortized_batch", "c0": 0.3, "c1": 0.02},
        "graphwalk": {"family": "saturating", "c0": 0.1, "c1": 0.05, "b_knee": 8},
        "augment": {"family": "amortized_batch", "c0": 0.02, "c1": 0.004},
        "generate": {"family": "amortized_batch", "c0": 0.8, "c1": 0.03},
    }
    max_batch = {
        "extract": {"gpu": 32},
        "graphwalk": {"cpu": 32},
        "augment": {"cpu": 64},
        "generate": {"gpu": 32},
    }
    resources = {"cpu": 3, "gpu": 5}
    return {
        "name": "hipporag",
        "pipeline": pipeline,
        "ground_truth": ground_truth,
        "max_batch": max_batch,
        "resources": resources,
    }


TEMPLATES = {
    "crag": crag_template,
    "memorag": memorag_template,
    "ircot": ircot_template,
    "hipporag": hipporag_template,
}


def get_template(name: str):
    try:
        return TEMPLATES[name]()
    except KeyError:
        raise KeyError("unknown template %r; known: %s" % (name, sorted(TEMPLATES)))


def template_graph(name: str):
    return pipeline_from_dict(get_template(name)["pipeline"])


def ground_truth_models(spec: dict):
    """Instantiate GroundTruthLatency objects from a ground-truth spec tree."""
    return {nid: GroundTruthLatency.from_dict(d) for nid, d in spec.items()}
