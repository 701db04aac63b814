import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from declassify.binary_image import open_image
from declassify.cht import ChtGraph, load_cht_json
from declassify.errors import InputError, NoRttiFound, UnmappableIdentity
from declassify.evaluation import (ACTUAL_FALSE, CLASS_VTABLE_MISSING, DIRECTION_UNASSIGNED, EVIDENCE_ABSENT, MIB,
                                   GroundTruth, falses_report, format_falses, identity, load_ground_truth,
                                   parse_ground_truth, score)
from declassify.rtti import parse_rtti


def graph(nodes, edges):
    return list(nodes), {e: "primary" for e in edges}


def gt(classes, edges, n2v=None):
    return GroundTruth(set(classes), {(d, b, "primary") for d, b in edges}, n2v)


def test_19_of_22(fixtures):
    g = load_cht_json((fixtures / "score_19_of_22.cht.json").read_text())
    truth = load_ground_truth(fixtures / "score_19_of_22.gt.json")
    rep = score(g, truth)
    assert (rep.tp, rep.fp, rep.fn) == (19, 0, 3)
    text = rep.format()
    assert "precision_pct=100.0\n" in text and "recall_pct=86.4\n" in text


def test_undefined_ratios_are_one():
    rep = score(graph([], []), gt([], []))
    assert rep.precision == 1.0 and rep.recall == 1.0


def test_empty_graph_nonempty_truth():
    rep = score(graph([1, 2], []), gt([1, 2], [(1, 2)]))
    assert rep.precision == 1.0 and rep.recall == 0.0


def test_mib_not_counted_as_false():
    # X -> Y -> Z with Y lost: an inferred X -> Z is a missing-intermediate edge
    truth = gt(["X", "Y", "Z"], [("X", "Y"), ("Y", "Z")], {"X": 0x10, "Y": None, "Z": 0x30})
    rep = score(graph([0x10, 0x30], [(0x10, 0x30)]), truth)
    assert (rep.tp, rep.fp, rep.mib_edges, rep.missing_vtable_classes) == (0, 0, 1, 1)
    assert rep.precision == 1.0


def test_mib_needs_every_intermediate_missing():
    # X -> Y -> Z -> W; Z survives, so X -> W skips a recovered class
    truth = gt(["X", "Y", "Z", "W"], [("X", "Y"), ("Y", "Z"), ("Z", "W")],
               {"X": 0x10, "Y": None, "Z": 0x30, "W": 0x40})
    rep = score(graph([0x10, 0x30, 0x40], [(0x10, 0x40)]), truth)
    assert rep.mib_edges == 0 and rep.fp == 1


def test_mib_chain_fixture(fixtures):
    truth = load_ground_truth(fixtures / "mib_chain.gt.json")
    rep = score(graph([0x402000, 0x402018, 0x402038], [(0x402038, 0x402018), (0x402018, 0x402000)]), truth)
    assert (rep.tp, rep.fp, rep.mib_edges) == (1, 0, 1)


def test_restrict_to_found():
    truth = gt(["A", "B", "C"], [("A", "B"), ("B", "C")], {"A": 1, "B": 2, "C": None})
    g = graph([1, 2], [(1, 2)])
    assert score(g, truth).recall == 0.5
    rep = score(g, truth, restrict_to_found=True)
    assert rep.recall == 1.0 and rep.used_edges == 1


def test_unmappable_identity():
    with pytest.raises(UnmappableIdentity):
        identity(gt(["Shape"], []))
    assert identity(gt(["0x10"], [])) == {"0x10": 0x10}


def test_bad_ground_truth():
    with pytest.raises(InputError):
        parse_ground_truth("{}")
    with pytest.raises(InputError):
        parse_ground_truth('{"classes": ["A"], "edges": [{"derived": "A", "base": "B"}]}')


def test_ground_truth_round_trip(fixtures):
    text = (fixtures / "zoo_O2.gt.json").read_text()
    assert parse_ground_truth(text).dumps() == text


def test_kind_mismatch_counted():
    truth = GroundTruth({1, 2}, {(1, 2, "secondary")})
    rep = score(graph([1, 2], [(1, 2)]), truth)
    assert rep.tp == 1 and rep.kind_mismatches == 1


def test_falses_categories():
    truth = gt(["A", "B", "C", "D", "E"], [("A", "B"), ("C", "D"), ("E", "A")],
               {"A": 1, "B": 2, "C": 3, "D": None, "E": 5})
    g = ChtGraph(nodes=[1, 2, 3, 5])
    g.add(2, 1, None, {"ctor_inline:0x1/0"}, 2)   # reversed A -> B
    g.add(3, 5, None, {"overwrite:0x9/1,2"}, 0)  # unrelated
    falses, missed = falses_report(g, truth)
    assert [(d, b, c) for d, b, c, _ in falses] == [(2, 1, ACTUAL_FALSE), (3, 5, ACTUAL_FALSE)]
    assert falses[1][3] == ["overwrite:0x9/1,2"]
    assert {(d, b): c for d, b, c, _ in missed} == {
        (1, 2): DIRECTION_UNASSIGNED, (3, ("missing", "D")): CLASS_VTABLE_MISSING, (5, 1): EVIDENCE_ABSENT}
    text = format_falses(falses, missed)
    assert "false 0x3 -> 0x5 actual_false overwrite:0x9/1,2\n" in text
    assert "missed 0x3 -> D class_vtable_missing\n" in text


def test_mib_labelled_in_falses():
    truth = gt(["X", "Y", "Z"], [("X", "Y"), ("Y", "Z")], {"X": 0x10, "Y": None, "Z": 0x30})
    falses, _ = falses_report(graph([0x10, 0x30], [(0x10, 0x30)]), truth)
    assert falses[0][2] == MIB


@settings(max_examples=150, deadline=None)
@given(st.integers(2, 8).flatmap(lambda n: st.tuples(
    st.just(n),
    st.sets(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)).filter(lambda e: e[0] != e[1])),
    st.sets(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)).filter(lambda e: e[0] != e[1])),
    st.permutations(range(n)))))
def test_relabelling_preserves_scores(case):
    n, truth_edges, found, perm = case
    ids = [0x1000 + 0x20 * i for i in range(n)]
    relabelled = [0x9000 + 0x40 * p for p in perm]
    a = score(graph(ids, {(ids[d], ids[b]) for d, b in found}),
              gt(ids, {(ids[d], ids[b]) for d, b in truth_edges}))
    b = score(graph(relabelled, {(relabelled[d], relabelled[b]) for d, b in found}),
              gt(relabelled, {(relabelled[d], relabelled[b]) for d, b in truth_edges}))
    assert (a.tp, a.fp, a.fn, a.precision, a.recall) == (b.tp, b.fp, b.fn, b.precision, b.recall)
    assert 0 <= a.precision <= 1 and 0 <= a.recall <= 1


# -- type-info decoding ------------------------------------------------------------

# read off the class definitions in tests/fixtures/src/zoo.cpp
ZOO_EDGES = {("4Rect", "5Shape", "primary"), ("6Square", "4Rect", "primary"), ("5Label", "5Named", "primary"),
             ("6Widget", "4Rect", "primary"), ("6Widget", "5Named", "secondary"), ("4Temp", "5Plain", "primary")}


def test_parse_rtti_matches_source(fixtures):
    truth = parse_rtti(open_image(fixtures / "zoo_rtti"))
    by_id = {v: k for k, v in truth.name_to_vt.items()}
    names = {(by_id.get(d, d), by_id.get(b, b), k) for d, b, k in truth.edges}
    assert names == ZOO_EDGES
    assert set(truth.name_to_vt) == {"5Shape", "5Named", "4Rect", "6Square", "5Label", "6Widget", "5Plain",
                                     "4Temp"}


def test_parse_rtti_running_example(fixtures):
    truth = parse_rtti(open_image(fixtures / "running_example_O0"))
    by_id = {v: k for k, v in truth.name_to_vt.items()}
    assert {(by_id[d], by_id[b], k) for d, b, k in truth.edges} == {("1D", "1C", "primary"),
                                                                    ("1D", "1B", "secondary")}
    assert by_id.keys() == truth.classes


def test_rtti_fixture_gt_agrees(fixtures):
    """The frozen O0 ground truth was derived from the same source."""
    obj = json.loads((fixtures / "zoo_O0.gt.json").read_text())
    assert {(e["derived"], e["base"], e["kind"]) for e in obj["edges"]} == ZOO_EDGES


def test_no_rtti(fixtures):
    with pytest.raises(NoRttiFound):
        parse_rtti(open_image(fixtures / "zoo_O2"))
