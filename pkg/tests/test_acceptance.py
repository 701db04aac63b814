"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL ...`` line to the
terminal (outside pytest's capture) before asserting.
"""

import json
import subprocess
import sys
import time

import pytest

from declassify.cht import analyze, load_cht_json
from declassify.cli import run
from declassify.evaluation import ACTUAL_FALSE, falses_report, load_ground_truth, score
from declassify.generator import GenConfig, generate_corpus
from declassify.vtables import ClassTable


@pytest.fixture
def report(capsys):
    def _report(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
        assert ok, detail
    return _report


def cli(capsys, *argv):
    code = run([str(a) for a in argv])
    out, err = capsys.readouterr()
    assert code == 0, err
    return out


def _named_edges(obj, name_to_vt):
    by_id = {v: k for k, v in name_to_vt.items()}
    return {(by_id.get(e["derived"], e["derived"]), by_id.get(e["base"], e["base"]), e["kind"], e.get("offset"))
            for e in obj["edges"]}


def test_criterion_1_running_example(capsys, fixtures, report):
    t0 = time.perf_counter()
    out = cli(capsys, "analyze", "--facts", fixtures / "running_example.facts",
              "--vtables", fixtures / "running_example.vt", "--format", "json")
    elapsed = time.perf_counter() - t0
    names = json.loads((fixtures / "running_example.gt.json").read_text())["name_to_vt"]
    obj = json.loads(out)
    edges = _named_edges(obj, names)
    ok = (edges == {("D", "C", "primary", None), ("D", "B", "secondary", 16)}
          and names["A"] in obj["nodes"] and elapsed < 1.0)
    report(1, ok, f"edges={sorted(edges, key=str)} time={elapsed:.3f}s")


def test_criterion_2_marx(capsys, fixtures, report):
    out = cli(capsys, "analyze", "--facts", fixtures / "marx.facts", "--vtables", fixtures / "marx.vt",
              "--format", "json")
    names = json.loads((fixtures / "marx.gt.json").read_text())["name_to_vt"]
    pairs = {(d, b) for d, b, _, _ in _named_edges(json.loads(out), names)}
    want = {("B", "A"), ("B", "C"), ("E", "D"), ("E", "F")}
    left, right = set("ABC"), set("DEF")
    crossing = {p for p in pairs if (p[0] in left) != (p[1] in left) or (p[0] in right) != (p[1] in right)}
    ok = want <= pairs and not crossing
    report(2, ok, f"edges={sorted(pairs)} crossing={sorted(crossing)}")


def _oracle_run(**kw):
    worst, p_min, r_min, total_tp, total_surv = 0, 1.0, 1.0, 0, 0
    for seed in range(500):
        corpus = generate_corpus(GenConfig(classes=1 + seed % 20, seed=seed, **kw))
        graph = analyze(corpus.facts, ClassTable.from_tables(corpus.tables)).graph
        rep = score(graph, corpus.ground_truth)
        surv = corpus.survivor_count()
        worst = max(worst, abs(rep.tp - surv))
        p_min, r_min = min(p_min, rep.precision), min(r_min, rep.recall)
        total_tp += rep.tp
        total_surv += surv
    return worst, p_min, r_min, total_tp, total_surv


def test_criterion_3_oracle_equivalence(report):
    t0 = time.perf_counter()
    _, p0, r0, tp0, _ = _oracle_run()
    worst, p1, _, tp1, surv1 = _oracle_run(inlining=0.5, ctor_elision=0.3)
    elapsed = time.perf_counter() - t0
    ok = p0 == 1.0 and r0 == 1.0 and p1 >= 0.95 and worst <= 2 and elapsed < 60
    report(3, ok, f"plain P_min={p0} R_min={r0} tp={tp0}; inlined P_min={p1:.3f} "
                  f"max|tp-survivors|={worst} tp={tp1}/{surv1}; time={elapsed:.1f}s")


def test_criterion_4_ctor_vs_dtor(report):
    tp_ctor = tp_both = total = 0
    for seed in range(200):
        corpus = generate_corpus(GenConfig(classes=15, ctor_elision=0.8, dtor_elision=0.0, seed=seed))
        classes = ClassTable.from_tables(corpus.tables)
        a = score(analyze(corpus.facts, classes, mode="ctor").graph, corpus.ground_truth)
        b = score(analyze(corpus.facts, classes, mode="ctor-dtor").graph, corpus.ground_truth)
        tp_ctor += a.tp
        tp_both += b.tp
        total += a.tp + a.fn
    r_ctor, r_both = tp_ctor / total, tp_both / total
    ratio = r_both / r_ctor if r_ctor else float("inf")
    report(4, ratio >= 2.0, f"recall ctor={100 * r_ctor:.1f}% ctor+dtor={100 * r_both:.1f}% ratio={ratio:.2f}")


def test_criterion_5_metric_arithmetic(capsys, fixtures, report):
    out = cli(capsys, "eval", "--cht", fixtures / "score_19_of_22.cht.json",
              "--gt", fixtures / "score_19_of_22.gt.json")
    vals = dict(line.split("=") for line in out.splitlines())
    p, r = float(vals["precision"]) * 100, float(vals["recall"]) * 100
    ok = abs(p - 100.0) <= 0.05 and abs(r - 86.4) <= 0.05
    report(5, ok, f"precision={p:.2f}% recall={r:.2f}%")


def test_criterion_6_mib(capsys, fixtures, report):
    out = cli(capsys, "analyze", "--facts", fixtures / "mib_chain.facts", "--vtables", fixtures / "mib_chain.vt",
              "--format", "json")
    gt = load_ground_truth(fixtures / "mib_chain.gt.json")
    rep = score(load_cht_json(out), gt)
    grandparent = (gt.name_to_vt["X"], gt.name_to_vt["Z"])
    ok = grandparent in rep.mib_set and grandparent not in rep.tp_edges | rep.fp_edges and rep.precision == 1.0
    report(6, ok, f"tp={rep.tp} fp={rep.fp} mib={rep.mib_edges} precision={rep.precision}")


def _binary_score(capsys, fixtures, name):
    out = cli(capsys, "analyze", fixtures / name, "--format", "json")
    return score(load_cht_json(out), load_ground_truth(fixtures / f"{name}.gt.json"))


def test_criterion_7_real_binary(capsys, fixtures, report):
    o0 = _binary_score(capsys, fixtures, "zoo_O0")
    o2 = _binary_score(capsys, fixtures, "zoo_O2")
    gt2 = load_ground_truth(fixtures / "zoo_O2.gt.json")
    alive = sum(1 for d, b, _ in gt2.edges if gt2.name_to_vt[d] is not None and gt2.name_to_vt[b] is not None)
    bound = alive / len(gt2.edges)
    ok = o0.precision == 1.0 and o0.recall == 1.0 and o2.precision == 1.0 and o2.recall >= bound
    report(7, ok, f"O0 P={o0.precision:.3f} R={o0.recall:.3f}; O2 P={o2.precision:.3f} "
                  f"R={o2.recall:.3f} bound={bound:.3f}")


def _actual_falses(capsys, gt, *argv):
    out = cli(capsys, "analyze", *argv, "--format", "json")
    falses, _ = falses_report(load_cht_json(out), gt)
    return [f for f in falses if f[2] == ACTUAL_FALSE]


def test_criterion_8_aliasing(capsys, fixtures, report):
    gt = load_ground_truth(fixtures / "aliasing.gt.json")
    vt = fixtures / "aliasing.vt"
    from_bin = _actual_falses(capsys, gt, fixtures / "aliasing")
    from_facts = _actual_falses(capsys, gt, "--facts", fixtures / "aliasing.facts", "--vtables", vt)
    cfg_bin = _actual_falses(capsys, gt, fixtures / "aliasing", "--cfg-order")
    cfg_facts = _actual_falses(capsys, gt, "--facts", fixtures / "aliasing.cfg.facts", "--vtables", vt)
    overwrite = all(any(p.startswith("overwrite:") for p in f[3]) for f in from_bin + from_facts)
    ok = len(from_bin) == 1 and len(from_facts) == 1 and overwrite and not cfg_bin and not cfg_facts
    report(8, ok, f"default={[(f'{d:#x}', f'{b:#x}', p) for d, b, _, p in from_bin]} "
                  f"facts={len(from_facts)} cfg-order={len(cfg_bin)}/{len(cfg_facts)}")


def _subcommands(fx, out):
    facts, vt = fx / "running_example.facts", fx / "running_example.vt"
    return {
        "sections": ["sections", fx / "zoo_O2"],
        "vtables": ["vtables", fx / "zoo_O2", "-o", out / "t.vt"],
        "ingest": ["ingest", fx / "zoo_O2", "-o", out / "i.facts", "--vtables-out", out / "i.vt"],
        "ingest-cfg": ["ingest", fx / "zoo_O2", "--cfg-order"],
        "classify": ["classify", fx / "zoo_O2"],
        "ola": ["ola", "--facts", fx / "marx.facts", "--vtables", fx / "marx.vt"],
        "analyze-dot": ["analyze", fx / "zoo_O2"],
        "analyze-json": ["analyze", "--facts", facts, "--vtables", vt, "--format", "json", "-o", out / "a.json"],
        "eval": ["eval", "--cht", fx / "score_19_of_22.cht.json", "--gt", fx / "score_19_of_22.gt.json",
                 "--falses"],
        "gen": ["gen", "--classes", "12", "--inlining", "0.5", "-o", out / "g"],
    }


def test_criterion_9_determinism(fixtures, tmp_path, report):
    runs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        out.mkdir()
        results = {}
        for name, argv in _subcommands(fixtures, out).items():
            res = subprocess.run([sys.executable, "-m", "declassify.cli", *map(str, argv)],
                                 capture_output=True, check=False)
            results[name] = (res.returncode, res.stdout)
        files = {p.name: p.read_bytes() for p in sorted(out.iterdir())}
        runs.append((results, files))
    (r0, f0), (r1, f1) = runs
    differing = sorted(k for k in r0 if r0[k] != r1[k]) + sorted(k for k in f0 if f0[k] != f1.get(k))
    failed = sorted(k for k, (code, _) in r0.items() if code != 0)
    ok = not differing and not failed and f0.keys() == f1.keys()
    report(9, ok, f"{len(r0)} invocations, {len(f0)} files; differing={differing} failed={failed}")
