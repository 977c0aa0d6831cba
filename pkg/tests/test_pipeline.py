"""Pipeline graph: parsing, validation, traversal order, visit rates."""

import json
import random

import pytest

from ragflow.pipeline import (
    PipelineError,
    expected_visit_rates,
    forward_order,
    parse_pipeline,
    pipeline_from_dict,
    pipeline_to_dict,
    serialize_pipeline,
)


def make_doc(nodes, edges, entry, exits):
    return {"nodes": nodes, "edges": edges, "entry": entry, "exits": exits}


def node(nid, kind="Custom", affinity=("cpu",), fanout=1.0, config=None):
    return {"id": nid, "kind": kind, "affinity": list(affinity), "fanout": fanout,
            "config": config or {}}


def crag_doc():
    return make_doc(
        [
            node("retrieve", "Retriever", ["cpu"], config={"top_k": 6}),
            node("grade", "Grader", ["gpu"]),
            node("rewrite", "Rewriter", ["gpu"]),
            node("websearch", "WebSearch", ["cpu"]),
            node("augment", "Augmenter", ["cpu"]),
            node("generate", "Generator", ["gpu"]),
        ],
        [
            {"from": "retrieve", "to": "grade"},
            {"from": "grade", "to": "augment", "kind": "conditional", "p": 0.7},
            {"from": "grade", "to": "rewrite", "kind": "conditional", "p": 0.3},
            {"from": "rewrite", "to": "websearch"},
            {"from": "websearch", "to": "augment"},
            {"from": "augment", "to": "generate"},
        ],
        "retrieve",
        ["generate"],
    )


# -- parsing -------------------------------------------------------------


def test_parse_single_node():
    g = parse_pipeline(json.dumps(make_doc(
        [node("gen", "Generator", ["gpu"])], [], "gen", ["gen"])))
    assert set(g.nodes) == {"gen"}
    assert g.entry == "gen"
    assert g.exits == frozenset({"gen"})
    assert g.nodes["gen"].resource_affinity == frozenset({"gpu"})


def test_parse_crag_template():
    g = parse_pipeline(json.dumps(crag_doc()))
    assert len(g.nodes) == 6
    cond = [e for e in g.edges if e.kind == "conditional"]
    assert len(cond) == 2
    assert sorted(e.probability for e in cond) == [0.3, 0.7]


def test_parse_recursive_loop():
    g = parse_pipeline(json.dumps(make_doc(
        [node("retrieve", "Retriever", ["cpu"]), node("generate", "Generator", ["gpu"])],
        [
            {"from": "retrieve", "to": "generate"},
            {"from": "generate", "to": "retrieve", "kind": "recursive", "p": 0.5,
             "max_depth": 10},
        ],
        "retrieve", ["generate"])))
    back = [e for e in g.edges if e.kind == "recursive"]
    assert len(back) == 1
    assert back[0].max_depth == 10


def test_static_config_carried_untouched():
    g = parse_pipeline(json.dumps(crag_doc()))
    assert g.nodes["retrieve"].config_dict() == {"top_k": 6}


def test_parse_duplicate_id_rejected():
    doc = make_doc([node("a"), node("a")], [], "a", ["a"])
    with pytest.raises(PipelineError):
        pipeline_from_dict(doc)


def test_parse_dangling_edge_rejected():
    doc = make_doc([node("a")], [{"from": "a", "to": "ghost"}], "a", ["a"])
    with pytest.raises(PipelineError):
        pipeline_from_dict(doc)


def test_parse_bad_conditional_probs_rejected():
    doc = make_doc(
        [node("a"), node("b"), node("c")],
        [
            {"from": "a", "to": "b", "kind": "conditional", "p": 0.5},
            {"from": "a", "to": "c", "kind": "conditional", "p": 0.4},
            {"from": "b", "to": "c"},
        ],
        "a", ["c"])
    with pytest.raises(PipelineError):
        pipeline_from_dict(doc)


def test_conditional_probs_tolerance_1e9():
    # sum within 1e-9 of 1 is accepted
    doc = make_doc(
        [node("a"), node("b"), node("c")],
        [
            {"from": "a", "to": "b", "kind": "conditional", "p": 0.5 + 4e-10},
            {"from": "a", "to": "c", "kind": "conditional", "p": 0.5},
            {"from": "b", "to": "c"},
        ],
        "a", ["c"])
    pipeline_from_dict(doc)


def test_parse_unannotated_cycle_rejected():
    doc = make_doc(
        [node("a"), node("b")],
        [{"from": "a", "to": "b"}, {"from": "b", "to": "a"}],
        "a", ["b"])
    with pytest.raises(PipelineError):
        pipeline_from_dict(doc)


def test_parse_empty_affinity_rejected():
    doc = make_doc([{"id": "a", "kind": "Custom", "affinity": []}], [], "a", ["a"])
    with pytest.raises(PipelineError):
        pipeline_from_dict(doc)


def test_recursive_edge_needs_max_depth():
    doc = make_doc(
        [node("a"), node("b")],
        [{"from": "a", "to": "b"},
         {"from": "b", "to": "a", "kind": "recursive", "p": 0.5}],
        "a", ["b"])
    with pytest.raises(PipelineError):
        pipeline_from_dict(doc)


def test_parse_invalid_json_rejected():
    with pytest.raises(PipelineError):
        parse_pipeline("{not json")


# -- forward order -------------------------------------------------------


def test_forward_order_single_node():
    g = pipeline_from_dict(make_doc([node("gen", "Generator", ["gpu"])], [], "gen", ["gen"]))
    assert forward_order(g) == ["gen"]


def test_forward_order_chain():
    g = pipeline_from_dict(make_doc(
        [node("a"), node("b"), node("c")],
        [{"from": "a", "to": "b"}, {"from": "b", "to": "c"}],
        "a", ["c"]))
    assert forward_order(g) == ["a", "b", "c"]


def test_forward_order_crag():
    g = pipeline_from_dict(crag_doc())
    order = forward_order(g)
    pos = {nid: i for i, nid in enumerate(order)}
    assert pos["retrieve"] < pos["grade"]
    for nid in ("rewrite", "websearch", "augment", "generate"):
        assert pos["grade"] < pos[nid]


def random_dag_doc(rng):
    n = rng.randint(1, 7)
    ids = ["n%d" % i for i in range(n)]
    nodes = [node(i) for i in ids]
    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < 0.4:
                edges.append({"from": ids[i], "to": ids[j]})
    # everything reachable from the entry and co-reachable with the exit
    for i in range(1, n):
        if not any(e["to"] == ids[i] for e in edges):
            edges.append({"from": ids[rng.randrange(i)], "to": ids[i]})
    for i in range(n - 1):
        if not any(e["from"] == ids[i] for e in edges):
            edges.append({"from": ids[i], "to": ids[rng.randrange(i + 1, n)]})
    seen = set()
    dedup = []
    for e in edges:
        key = (e["from"], e["to"])
        if key not in seen:
            seen.add(key)
            dedup.append(e)
    return make_doc(nodes, dedup, ids[0], [ids[-1]])


def test_forward_order_permutation_and_edge_respect():
    rng = random.Random(42)
    for _ in range(50):
        g = pipeline_from_dict(random_dag_doc(rng))
        order = forward_order(g)
        assert sorted(order) == sorted(g.nodes)
        pos = {nid: i for i, nid in enumerate(order)}
        for e in g.edges:
            if e.kind != "recursive":
                assert pos[e.src] < pos[e.dst]


# -- visit rates ---------------------------------------------------------


def test_visit_rates_linear_chain():
    g = pipeline_from_dict(make_doc(
        [node("a"), node("b"), node("c")],
        [{"from": "a", "to": "b"}, {"from": "b", "to": "c"}],
        "a", ["c"]))
    rates = expected_visit_rates(g)
    assert all(abs(r - 1.0) < 1e-12 for r in rates.values())


def test_visit_rates_branch():
    g = pipeline_from_dict(crag_doc())
    rates = expected_visit_rates(g)
    assert abs(rates["websearch"] - 0.3) < 1e-12
    assert abs(rates["rewrite"] - 0.3) < 1e-12
    assert abs(rates["augment"] - 1.0) < 1e-12


def test_visit_rates_recursion_mass():
    g = pipeline_from_dict(make_doc(
        [node("ret", "Retriever", ["cpu"]), node("gen", "Generator", ["gpu"])],
        [{"from": "ret", "to": "gen"},
         {"from": "gen", "to": "ret", "kind": "recursive", "p": 0.5, "max_depth": 2}],
        "ret", ["gen"]))
    rates = expected_visit_rates(g)
    # depth outcomes: 1 + 0.5 + 0.25
    assert abs(rates["ret"] - 1.75) < 1e-12
    assert abs(rates["gen"] - 1.75) < 1e-12


def test_visit_rates_entry_is_one_and_finite():
    rng = random.Random(7)
    for _ in range(50):
        g = pipeline_from_dict(random_dag_doc(rng))
        rates = expected_visit_rates(g)
        assert rates[g.entry] == 1.0
        for r in rates.values():
            assert r >= 0.0
            assert r < float("inf")


def test_visit_rates_fanout():
    g = pipeline_from_dict(make_doc(
        [node("a", fanout=2.0), node("b")],
        [{"from": "a", "to": "b"}],
        "a", ["b"]))
    rates = expected_visit_rates(g)
    assert abs(rates["b"] - 2.0) < 1e-12


# -- round trip ----------------------------------------------------------


def test_parse_serialize_round_trip():
    for doc in (crag_doc(),
                make_doc([node("gen", "Generator", ["gpu"])], [], "gen", ["gen"])):
        g1 = pipeline_from_dict(doc)
        g2 = parse_pipeline(serialize_pipeline(g1))
        assert g1 == g2
        assert pipeline_to_dict(g1) == pipeline_to_dict(g2)


def test_round_trip_random_graphs():
    rng = random.Random(99)
    for _ in range(25):
        g1 = pipeline_from_dict(random_dag_doc(rng))
        g2 = parse_pipeline(serialize_pipeline(g1))
        assert g1 == g2
