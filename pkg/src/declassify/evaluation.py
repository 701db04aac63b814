"""Scoring a recovered hierarchy against ground truth."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field

from .errors import InputError, UnmappableIdentity
from .rtti import parse_rtti  # noqa: F401  (re-exported)

MIB = "MIB"
ACTUAL_FALSE = "actual_false"
CLASS_VTABLE_MISSING = "class_vtable_missing"
EVIDENCE_ABSENT = "evidence_absent"
DIRECTION_UNASSIGNED = "direction_unassigned"


@dataclass
class GroundTruth:
    classes: set
    edges: set  # (derived, base, kind)
    name_to_vt: dict | None = None
    extra: dict = field(default_factory=dict)  # per-edge annotations, keyed (derived, base)

    def __post_init__(self):
        for d, b, _ in self.edges:
            if d not in self.classes or b not in self.classes:
                raise InputError(f"ground-truth edge {d}->{b} names an undeclared class")

    def to_json_obj(self):
        def name(x):
            return x if isinstance(x, str) else f"{x:#x}"
        edges = []
        for d, b, kind in sorted(self.edges, key=lambda e: (str(e[0]), str(e[1]))):
            item = {"derived": name(d), "base": name(b), "kind": kind}
            item.update(self.extra.get((d, b), {}))
            edges.append(item)
        obj = {"classes": sorted(name(c) for c in self.classes), "edges": edges}
        if self.name_to_vt is not None:
            obj["name_to_vt"] = {k: (None if v is None else f"{v:#x}") for k, v in sorted(self.name_to_vt.items())}
        return obj

    def dumps(self):
        return json.dumps(self.to_json_obj(), sort_keys=True, indent=1) + "\n"


def _id_value(v):
    if v is None or isinstance(v, int):
        return v
    return int(v, 16)


def parse_ground_truth(text) -> GroundTruth:
    try:
        obj = json.loads(text)
        n2v = obj.get("name_to_vt")
        if n2v is not None:
            n2v = {k: _id_value(v) for k, v in n2v.items()}
        classes = set(obj["classes"])
        edges = set()
        extra = {}
        for e in obj["edges"]:
            edges.add((e["derived"], e["base"], e.get("kind", "primary")))
            rest = {k: v for k, v in e.items() if k not in ("derived", "base", "kind")}
            if rest:
                extra[(e["derived"], e["base"])] = rest
    except (ValueError, KeyError, TypeError, AttributeError) as exc:
        raise InputError(f"bad ground-truth JSON: {exc}") from None
    return GroundTruth(classes, edges, n2v, extra)


def load_ground_truth(path) -> GroundTruth:
    with open(path, encoding="utf-8") as fh:
        return parse_ground_truth(fh.read())


def identity(gt: GroundTruth):
    """Map each GT class to the graph's id space.

    A class listed in ``name_to_vt`` with a null address has no VTable in
    the binary; it keeps its name as a placeholder id that matches no node.
    """
    ids = {}
    for c in gt.classes:
        if isinstance(c, int):
            ids[c] = c
        elif gt.name_to_vt is not None and c in gt.name_to_vt:
            v = gt.name_to_vt[c]
            ids[c] = ("missing", c) if v is None else v
        else:
            try:
                ids[c] = int(c, 16)
            except ValueError:
                raise UnmappableIdentity(f"no VTable correspondence for class {c!r}") from None
    return ids


@dataclass
class ScoreReport:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    mib_edges: int
    used_edges: int
    missing_vtable_classes: int
    kind_mismatches: int = 0
    tp_edges: set = field(default_factory=set, repr=False)
    fp_edges: set = field(default_factory=set, repr=False)
    fn_edges: set = field(default_factory=set, repr=False)
    mib_set: set = field(default_factory=set, repr=False)

    def format(self):
        rows = [("tp", self.tp), ("fp", self.fp), ("fn", self.fn), ("mib_edges", self.mib_edges),
                ("used_edges", self.used_edges), ("missing_vtable_classes", self.missing_vtable_classes),
                ("kind_mismatches", self.kind_mismatches),
                ("precision", f"{self.precision:.6f}"), ("recall", f"{self.recall:.6f}"),
                ("precision_pct", f"{100 * self.precision:.1f}"), ("recall_pct", f"{100 * self.recall:.1f}")]
        return "".join(f"{k}={v}\n" for k, v in rows)


def _graph_parts(graph):
    """Accept a ChtGraph or a ``(nodes, edges)`` pair from JSON."""
    if hasattr(graph, "edges") and hasattr(graph, "nodes"):
        kinds = {k: e.kind for k, e in graph.edges.items()}
        return set(graph.nodes), kinds
    nodes, edges = graph
    return set(nodes), {k: (v.get("kind", "primary") if isinstance(v, dict) else v) for k, v in edges.items()}


def _mapped(gt):
    ids = identity(gt)
    edges = {}
    for d, b, kind in gt.edges:
        edges[(ids[d], ids[b])] = kind
    return ids, edges


def _is_mib(edge, gt_adj, nodes):
    """A path derived -> ... -> base of length >= 2 through classes that all
    lack a recovered VTable."""
    src, dst = edge
    frontier = [m for m in gt_adj.get(src, ()) if m not in nodes]
    seen = set(frontier)
    while frontier:
        n = frontier.pop()
        for m in gt_adj.get(n, ()):
            if m == dst:
                return True
            if m not in nodes and m not in seen:
                seen.add(m)
                frontier.append(m)
    return False


def score(graph, gt: GroundTruth, restrict_to_found=False) -> ScoreReport:
    nodes, inferred = _graph_parts(graph)
    ids, full = _mapped(gt)
    scored = dict(full)
    if restrict_to_found:
        scored = {e: k for e, k in full.items() if e[0] in nodes and e[1] in nodes}

    adj = defaultdict(set)
    for d, b in full:
        adj[d].add(b)

    tp = set(inferred) & set(scored)
    rest = set(inferred) - tp
    mib = {e for e in rest if _is_mib(e, adj, nodes)}
    fp = rest - mib
    fn = set(scored) - tp
    kind_mismatch = sum(1 for e in tp if inferred[e] != scored[e])
    missing = sum(1 for c in gt.classes if ids[c] not in nodes)

    precision = len(tp) / (len(tp) + len(fp)) if tp or fp else 1.0
    recall = len(tp) / (len(tp) + len(fn)) if tp or fn else 1.0
    return ScoreReport(len(tp), len(fp), len(fn), precision, recall, len(mib), len(scored), missing,
                       kind_mismatch, tp, fp, fn, mib)


def _hex(x):
    return f"{x:#x}" if isinstance(x, int) else str(x[1] if isinstance(x, tuple) else x)


def falses_report(graph, gt: GroundTruth, classifications=None, restrict_to_found=False):
    """Label every non-TP inferred edge and every missed GT edge.

    Returns ``(false_edges, missed_edges)`` as lists of
    ``(derived, base, category, provenance)``.
    """
    rep = score(graph, gt, restrict_to_found)
    nodes, _ = _graph_parts(graph)
    prov = {}
    undirected = set()
    if isinstance(graph, tuple):
        prov = {k: sorted(v.get("provenance", [])) for k, v in graph[1].items() if isinstance(v, dict)}
    elif hasattr(graph, "unoriented"):
        prov = {k: sorted(e.provenance) for k, e in graph.edges.items()}
        for p in list(graph.unoriented) + list(graph.contradictions):
            undirected.add(frozenset((p.earlier, p.later)))
        for (key, _why) in graph.vetoed:
            undirected.add(frozenset(key))
    inferred_pairs = {frozenset(e) for e in rep.tp_edges | rep.fp_edges | rep.mib_set}

    falses = []
    for e in sorted(rep.mib_set | rep.fp_edges, key=lambda e: (_hex(e[0]), _hex(e[1]))):
        cat = MIB if e in rep.mib_set else ACTUAL_FALSE
        falses.append((e[0], e[1], cat, prov.get(e, [])))
    missed = []
    for e in sorted(rep.fn_edges, key=lambda e: (_hex(e[0]), _hex(e[1]))):
        if e[0] not in nodes or e[1] not in nodes:
            cat = CLASS_VTABLE_MISSING
        elif frozenset(e) in undirected or frozenset(e) in inferred_pairs:
            cat = DIRECTION_UNASSIGNED
        else:
            cat = EVIDENCE_ABSENT
        missed.append((e[0], e[1], cat, []))
    return falses, missed


def format_falses(falses, missed) -> str:
    lines = []
    for d, b, cat, prov in falses:
        lines.append(f"false {_hex(d)} -> {_hex(b)} {cat} {' '.join(prov) or '-'}")
    for d, b, cat, _ in missed:
        lines.append(f"missed {_hex(d)} -> {_hex(b)} {cat}")
    return "\n".join(lines) + ("\n" if lines else "")
