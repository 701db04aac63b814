"""Overwrite analysis and assembly of the directed class hierarchy."""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field

from . import ola
from .ctor_dtor import (CTOR, CTOR_CALL, CTOR_INLINE, DTOR, DTOR_CALL, DTOR_INLINE, INLINED_HOST,
                        OVERWRITE, classify_functions, ctor_analysis, dtor_analysis)
from .errors import InvariantViolation, UnknownFormat
from .facts import CALL, VPTR_WRITE, check_vtable_refs

log = logging.getLogger(__name__)

MODES = ("ctor", "ctor-dtor", "full")

SOURCE_RANK = {OVERWRITE: 0, DTOR_CALL: 1, DTOR_INLINE: 1, CTOR_CALL: 2, CTOR_INLINE: 2}


@dataclass(frozen=True)
class OverwritePair:
    function: int
    location: tuple  # (origin, offset)
    earlier: int
    later: int
    earlier_table: int
    later_table: int
    seqs: tuple

    @property
    def via(self):
        return ("primary" if self.earlier_table == self.earlier else "secondary",
                "primary" if self.later_table == self.later else "secondary")


def overwrite_analysis(facts, classified, classes) -> list[OverwritePair]:
    """Relate classes whose vptrs land on the same object slot in one function.

    Only consecutive writes at a slot are paired, so a chain X, C, D yields
    X-C and C-D but never X-D. A call to a known constructor or destructor
    counts as a store of its owner's primary vptr at the call's this-argument.
    """
    known = {a: c.owner_primary_vt for a, c in classified.items() if c.kind in (CTOR, DTOR)}
    pairs = []
    for addr in sorted(classified):
        if classified[addr].kind not in (CTOR, DTOR, INLINED_HOST):
            continue
        slots = defaultdict(list)
        for ev in facts[addr].events:
            if ev.base is None or not ev.base.known:
                continue
            if ev.kind == VPTR_WRITE and ev.vtable in classes.owner_of:
                slots[(ev.base.origin, ev.base.offset)].append(
                    (ev.seq, classes.owner_of[ev.vtable], ev.vtable, True))
            elif ev.kind == CALL and ev.target in known:
                owner = known[ev.target]
                slots[(ev.base.origin, ev.base.offset)].append((ev.seq, owner, owner, False))
        for loc in sorted(slots):
            seq = slots[loc]
            for (s1, c1, t1, w1), (s2, c2, t2, w2) in zip(seq, seq[1:]):
                if c1 == c2 or not (w1 or w2):
                    continue
                pairs.append(OverwritePair(addr, loc, c1, c2, t1, t2, (s1, s2)))
    return pairs


@dataclass
class Edge:
    derived: int
    base: int
    offset: int | None
    provenance: set = field(default_factory=set)
    rank: int = 0

    @property
    def kind(self):
        return "secondary" if self.offset else "primary"


@dataclass
class ChtGraph:
    nodes: list
    edges: dict = field(default_factory=dict)  # (derived, base) -> Edge
    unoriented: list = field(default_factory=list)
    contradictions: list = field(default_factory=list)
    vetoed: list = field(default_factory=list)
    dropped: list = field(default_factory=list)

    def edge_set(self):
        return set(self.edges)

    def add(self, derived, base, offset, provenance, rank):
        if derived == base:
            raise InvariantViolation(f"self edge on {derived:#x}")
        key = (derived, base)
        edge = self.edges.get(key)
        if edge is None:
            self.edges[key] = Edge(derived, base, offset, set(provenance), rank)
            return
        edge.provenance |= set(provenance)
        if rank > edge.rank:
            edge.rank = rank
            edge.offset = offset

    def check(self):
        nodes = set(self.nodes)
        for (d, b), e in self.edges.items():
            if d not in nodes or b not in nodes:
                raise InvariantViolation(f"edge {d:#x}->{b:#x} has an unknown endpoint")
            if not e.provenance:
                raise InvariantViolation(f"edge {d:#x}->{b:#x} has no provenance")


def _prov(source, pairs_of_fn_seq):
    return {f"{source}:{fn:#x}/{seq}" for fn, seq in pairs_of_fn_seq}


def _pair_prov(pair):
    return f"overwrite:{pair.function:#x}/{pair.seqs[0]},{pair.seqs[1]}"


def _find_cycle(edges):
    adj = defaultdict(list)
    for d, b in sorted(edges):
        adj[d].append(b)
    color = {}
    stack = []

    def visit(n):
        color[n] = 1
        stack.append(n)
        for m in adj[n]:
            if color.get(m) == 1:
                return stack[stack.index(m):] + [m]
            if m not in color:
                found = visit(m)
                if found:
                    return found
        stack.pop()
        color[n] = 2
        return None

    for n in sorted(adj):
        if n not in color:
            cyc = visit(n)
            if cyc:
                return cyc
    return None


def _break_cycles(graph):
    while True:
        cyc = _find_cycle(graph.edges)
        if cyc is None:
            return
        ring = [(cyc[i], cyc[i + 1]) for i in range(len(cyc) - 1)]
        weakest = min(ring, key=lambda k: (graph.edges[k].rank, k))
        edge = graph.edges.pop(weakest)
        log.warning("cycle: dropped %#x->%#x (%s)", edge.derived, edge.base, ",".join(sorted(edge.provenance)))
        graph.dropped.append((weakest, "cycle"))


def build_cht(candidates, pairs, profiles, classes) -> ChtGraph:
    graph = ChtGraph(nodes=sorted(classes.by_id))

    strong = {(c.derived, c.base) for c in candidates if not c.ambiguous}
    paired = {frozenset((p.earlier, p.later)) for p in pairs}

    for c in sorted(candidates, key=lambda c: (c.derived, c.base, c.source, c.secondary_offset or 0)):
        key = (c.derived, c.base)
        if c.derived not in classes or c.base not in classes:
            continue
        if c.secondary_offset and not ola.check_secondary_offset(c.derived, c.secondary_offset, c.base, profiles):
            graph.vetoed.append((key, "secondary_offset"))
            continue
        if c.ambiguous and key not in strong and frozenset(key) not in paired:
            graph.vetoed.append((key, "uncorroborated"))
            continue
        why = ola.veto_reason(c.derived, c.base, profiles, classes, c.secondary_offset or 0)
        if why:
            log.info("veto %#x->%#x (%s): %s", c.derived, c.base, c.source, why)
            graph.vetoed.append((key, why))
            continue
        graph.add(c.derived, c.base, c.secondary_offset, _prov(c.source, c.provenance), SOURCE_RANK[c.source])

    for p in pairs:
        ta, tb = classes.table_at[p.earlier_table], classes.table_at[p.later_table]
        verdict = ola.orient(p.earlier, p.later, profiles, classes, ta, tb)
        if verdict == ola.UNORIENTED:
            graph.unoriented.append(p)
            continue
        if verdict == ola.CONTRADICTION:
            graph.contradictions.append(p)
            continue
        if verdict == ola.A_DERIVES_B:
            derived, base, td, tbase = p.earlier, p.later, ta, tb
        else:
            derived, base, td, tbase = p.later, p.earlier, tb, ta
        offset = tbase.offset_to_top - td.offset_to_top
        key = (derived, base)
        if offset < 0:
            graph.vetoed.append((key, "negative_offset"))
            continue
        if offset and not ola.check_secondary_offset(derived, offset, base, profiles):
            graph.vetoed.append((key, "secondary_offset"))
            continue
        graph.add(derived, base, offset or None, {_pair_prov(p)}, SOURCE_RANK[OVERWRITE])

    _break_cycles(graph)
    graph.check()
    return graph


@dataclass
class AnalysisResult:
    classified: dict
    candidates: list
    pairs: list
    profiles: dict
    graph: ChtGraph


def analyze(facts, classes, mode="full", alg2_literal=False) -> AnalysisResult:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    check_vtable_refs(facts, classes.owner_of, log)
    classified = classify_functions(facts, classes)
    candidates = ctor_analysis(facts, classified, classes)
    if mode != "ctor":
        candidates += dtor_analysis(facts, classified, classes, literal=alg2_literal)
    pairs = overwrite_analysis(facts, classified, classes) if mode == "full" else []
    profiles = ola.derive_profiles(classes, facts)
    graph = build_cht(candidates, pairs, profiles, classes)
    return AnalysisResult(classified, candidates, pairs, profiles, graph)


# -- output ----------------------------------------------------------------

def to_json_obj(graph):
    edges = []
    for key in sorted(graph.edges):
        e = graph.edges[key]
        item = {"derived": f"{e.derived:#x}", "base": f"{e.base:#x}", "kind": e.kind,
                "provenance": sorted(e.provenance)}
        if e.offset:
            item["offset"] = e.offset
        edges.append(item)
    return {"nodes": [f"{n:#x}" for n in graph.nodes], "edges": edges}


def emit(graph: ChtGraph, fmt="dot") -> str:
    if fmt == "json":
        return json.dumps(to_json_obj(graph), sort_keys=True, separators=(",", ":")) + "\n"
    if fmt != "dot":
        raise UnknownFormat(f"unknown output format {fmt!r}")
    if not graph.nodes and not graph.edges:
        return "digraph cht {}\n"
    lines = ["digraph cht {"]
    for n in graph.nodes:
        lines.append(f'  "{n:#x}" [label="{n:#x}"];')
    for key in sorted(graph.edges):
        e = graph.edges[key]
        attr = f' [style=dashed,label="@{e.offset}"]' if e.offset else ""
        lines.append(f'  "{e.derived:#x}" -> "{e.base:#x}"{attr};')
    lines.append("}")
    return "\n".join(lines) + "\n"


def load_cht_json(text):
    """Read back the JSON emitted by :func:`emit`; returns ``(nodes, edges)``
    with integer ids and edges keyed by (derived, base)."""
    obj = json.loads(text)
    nodes = [int(n, 16) for n in obj.get("nodes", [])]
    edges = {}
    for e in obj.get("edges", []):
        edges[(int(e["derived"], 16), int(e["base"], 16))] = e
    return nodes, edges
