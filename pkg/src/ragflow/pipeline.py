"""Pipeline graph: components, edges, validation, traversal order, visit rates."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

NODE_KINDS = {
    "Retriever",
    "Augmenter",
    "Generator",
    "Grader",
    "Rewriter",
    "WebSearch",
    "Custom",
}

SEQUENTIAL = "sequential"
CONDITIONAL = "conditional"
RECURSIVE = "recursive"

PROB_TOL = 1e-9


class PipelineError(ValueError):
    """Raised when a pipeline config or graph fails validation."""


@dataclass(frozen=True)
class ComponentNode:
    id: str
    kind: str
    resource_affinity: frozenset
    fanout_factor: float = 1.0
    static_config: tuple = ()  # sorted (key, value) pairs; never touched by planning

    def config_dict(self):
        return dict(self.static_config)


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    kind: str = SEQUENTIAL
    probability: float = 1.0  # branch prob (conditional) or loop prob (recursive)
    max_depth: int = 0  # recursive edges only


@dataclass(frozen=True)
class ResourceKind:
    name: str
    count_available: int


class PipelineGraph:
    """Directed component graph; immutable once validated."""

    def __init__(self, nodes, edges, entry, exits):
        self.nodes = {n.id: n for n in nodes}
        if len(self.nodes) != len(nodes):
            seen = set()
            for n in nodes:
                if n.id in seen:
                    raise PipelineError("duplicate node id: %r" % n.id)
                seen.add(n.id)
        self.edges = tuple(edges)
        self.entry = entry
        self.exits = frozenset(exits)
        self._validate()

    # -- validation ------------------------------------------------------

    def _validate(self):
        for n in self.nodes.values():
            if not n.resource_affinity:
                raise PipelineError("node %r has empty resource affinity" % n.id)
            if n.fanout_factor <= 0:
                raise PipelineError("node %r has non-positive fanout" % n.id)
            if n.kind not in NODE_KINDS:
                raise PipelineError("node %r has unknown kind %r" % (n.id, n.kind))
        for e in self.edges:
            if e.src not in self.nodes or e.dst not in self.nodes:
                raise PipelineError("edge %s->%s has dangling endpoint" % (e.src, e.dst))
            if e.kind not in (SEQUENTIAL, CONDITIONAL, RECURSIVE):
                raise PipelineError("edge %s->%s has unknown kind %r" % (e.src, e.dst, e.kind))
            if e.kind == RECURSIVE and e.max_depth < 1:
                raise PipelineError(
                    "recursive edge %s->%s needs a finite max_depth >= 1" % (e.src, e.dst)
                )
            if not 0.0 <= e.probability <= 1.0:
                raise PipelineError("edge %s->%s probability outside [0,1]" % (e.src, e.dst))
        if self.entry not in self.nodes:
            raise PipelineError("entry %r is not a node" % self.entry)
        for x in self.exits:
            if x not in self.nodes:
                raise PipelineError("exit %r is not a node" % x)
        if not self.exits:
            raise PipelineError("no exit nodes given")

        for nid in self.nodes:
            probs = [e.probability for e in self.out_edges(nid) if e.kind == CONDITIONAL]
            if probs and abs(sum(probs) - 1.0) > PROB_TOL:
                raise PipelineError(
                    "conditional probabilities out of node %r sum to %g, not 1" % (nid, sum(probs))
                )

        order = self._topo_order_or_none()
        if order is None:
            raise PipelineError("cycle without a recursive back-edge annotation")
        # reachability from entry (all edges count)
        reach = {self.entry}
        frontier = [self.entry]
        while frontier:
            u = frontier.pop()
            for e in self.out_edges(u):
                if e.dst not in reach:
                    reach.add(e.dst)
                    frontier.append(e.dst)
        missing = set(self.nodes) - reach
        if missing:
            raise PipelineError("nodes unreachable from entry: %s" % sorted(missing))
        # every node reaches an exit via non-back edges
        co = set(self.exits)
        changed = True
        while changed:
            changed = False
            for e in self.edges:
                if e.kind != RECURSIVE and e.dst in co and e.src not in co:
                    co.add(e.src)
                    changed = True
        stuck = set(self.nodes) - co
        if stuck:
            raise PipelineError("nodes cannot reach an exit: %s" % sorted(stuck))

    # -- structure helpers ----------------------------------------------

    def out_edges(self, nid):
        return [e for e in self.edges if e.src == nid]

    def in_edges(self, nid):
        return [e for e in self.edges if e.dst == nid]

    def dag_predecessors(self, nid):
        return [e for e in self.in_edges(nid) if e.kind != RECURSIVE]

    def _topo_order_or_none(self):
        indeg = {nid: 0 for nid in self.nodes}
        for e in self.edges:
            if e.kind != RECURSIVE:
                indeg[e.dst] += 1
        ready = sorted(nid for nid, d in indeg.items() if d == 0)
        order = []
        while ready:
            u = ready.pop(0)
            order.append(u)
            touched = False
            for e in self.out_edges(u):
                if e.kind == RECURSIVE:
                    continue
                indeg[e.dst] -= 1
                if indeg[e.dst] == 0:
                    ready.append(e.dst)
                    touched = True
            if touched:
                ready.sort()
        if len(order) != len(self.nodes):
            return None
        return order

    def __eq__(self, other):
        return (
            isinstance(other, PipelineGraph)
            and self.nodes == other.nodes
            and self.edges == other.edges
            and self.entry == other.entry
            and self.exits == other.exits
        )


def forward_order(g: PipelineGraph):
    """Topological order ignoring back edges; lexicographic tie-break."""
    order = g._topo_order_or_none()
    assert order is not None
    return order


def loop_body(g: PipelineGraph, back_edge: Edge):
    """Nodes on a path from the back edge's target to its source (non-back edges)."""
    fwd = {back_edge.dst}
    frontier = [back_edge.dst]
    while frontier:
        u = frontier.pop()
        for e in g.out_edges(u):
            if e.kind != RECURSIVE and e.dst not in fwd:
                fwd.add(e.dst)
                frontier.append(e.dst)
    back = {back_edge.src}
    changed = True
    while changed:
        changed = False
        for e in g.edges:
            if e.kind != RECURSIVE and e.dst in back and e.src not in back and e.src in fwd:
                back.add(e.src)
                changed = True
    return fwd & back


def recursion_mass(probability, max_depth):
    """Expected visits of the loop body: sum of p^d for d = 0..max_depth."""
    return sum(probability ** d for d in range(max_depth + 1))


def expected_visit_rates(g: PipelineGraph):
    """Expected items processed per entry item at each node."""
    rates = {nid: 0.0 for nid in g.nodes}
    rates[g.entry] = 1.0
    for u in forward_order(g):
        out = [e for e in g.out_edges(u) if e.kind != RECURSIVE]
        emitted = rates[u] * g.nodes[u].fanout_factor
        for e in out:
            w = e.probability if e.kind == CONDITIONAL else 1.0
            rates[e.dst] += emitted * w
    for e in g.edges:
        if e.kind == RECURSIVE:
            mass = recursion_mass(e.probability, e.max_depth)
            for nid in loop_body(g, e):
                rates[nid] *= mass
    return rates


# -- config parsing / serialization -------------------------------------

_EDGE_KIND_ALIASES = {
    "sequential": SEQUENTIAL,
    "conditional": CONDITIONAL,
    "recursive": RECURSIVE,
    "recursiveback": RECURSIVE,
    "recursive_back": RECURSIVE,
}

_NODE_KIND_ALIASES = {k.lower(): k for k in NODE_KINDS}


def parse_pipeline(config_text: str) -> PipelineGraph:
    """Parse a JSON pipeline document into a validated PipelineGraph."""
    try:
        doc = json.loads(config_text)
    except json.JSONDecodeError as exc:
        raise PipelineError("invalid JSON: %s" % exc) from exc
    return pipeline_from_dict(doc)


def pipeline_from_dict(doc) -> PipelineGraph:
    for key in ("nodes", "edges", "entry", "exits"):
        if key not in doc:
            raise PipelineError("missing top-level key %r" % key)
    nodes = []
    for nd in doc["nodes"]:
        kind = str(nd.get("kind", "Custom"))
        kind = _NODE_KIND_ALIASES.get(kind.lower())
        if kind is None:
            raise PipelineError("unknown node kind %r" % nd.get("kind"))
        cfg = nd.get("config", {}) or {}
        nodes.append(
            ComponentNode(
                id=str(nd["id"]),
                kind=kind,
                resource_affinity=frozenset(nd.get("affinity", [])),
                fanout_factor=float(nd.get("fanout", 1.0)),
                static_config=tuple(sorted(cfg.items())),
            )
        )
    edges = []
    for ed in doc["edges"]:
        raw_kind = str(ed.get("kind", SEQUENTIAL)).lower()
        kind = _EDGE_KIND_ALIASES.get(raw_kind)
        if kind is None:
            raise PipelineError("unknown edge kind %r" % ed.get("kind"))
        edges.append(
            Edge(
                src=str(ed["from"]),
                dst=str(ed["to"]),
                kind=kind,
                probability=float(ed.get("p", 1.0)),
                max_depth=int(ed.get("max_depth", 0)),
            )
        )
    return PipelineGraph(nodes, edges, str(doc["entry"]), [str(x) for x in doc["exits"]])


def pipeline_to_dict(g: PipelineGraph):
    nodes = []
    for nid in sorted(g.nodes):
        n = g.nodes[nid]
        nodes.append(
            {
                "id": n.id,
                "kind": n.kind,
                "affinity": sorted(n.resource_affinity),
                "fanout": n.fanout_factor,
                "config": n.config_dict(),
            }
        )
    edges = []
    for e in g.edges:
        ed = {"from": e.src, "to": e.dst, "kind": e.kind}
        if e.kind == CONDITIONAL:
            ed["p"] = e.probability
        elif e.kind == RECURSIVE:
            ed["p"] = e.probability
            ed["max_depth"] = e.max_depth
        edges.append(ed)
    return {"nodes": nodes, "edges": edges, "entry": g.entry, "exits": sorted(g.exits)}


def serialize_pipeline(g: PipelineGraph) -> str:
    return json.dumps(pipeline_to_dict(g), indent=2, sort_keys=True)
