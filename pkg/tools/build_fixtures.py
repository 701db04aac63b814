#!/usr/bin/env python3
"""Regenerate everything under tests/fixtures.

Binaries are rebuilt only with ``--binaries`` (needs g++, gcc, as, ld and
strip); the checked-in ones are otherwise reused so that golden facts stay
tied to them. Hand-written corpora and golden outputs are always rewritten.
"""

from __future__ import annotations

import argparse
import json
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

from elftools.elf.elffile import ELFFile

from declassify.binary_image import open_image
from declassify.evaluation import GroundTruth, parse_rtti
from declassify.facts import FactEvent, FunctionFacts, ThisExpr, dump_facts
from declassify.ingest import CapstoneProvider, ingest_binary, vtable_candidates
from declassify.vtables import VTable, dump_vtables, extract_vtables

FIX = Path(__file__).resolve().parent.parent / "tests" / "fixtures"
SRC = FIX / "src"
GCC_FLAGS = ["-fno-pie", "-no-pie", "-fno-exceptions"]


def run(*cmd, cwd=None):
    subprocess.run(cmd, check=True, cwd=cwd)


# -- compiled fixtures ------------------------------------------------------------

def vtable_symbols(path):
    """``_ZTV<name>`` symbol values + 16, keyed by mangled type name."""
    out = {}
    with open(path, "rb") as fh:
        symtab = ELFFile(fh).get_section_by_name(".symtab")
        for sym in symtab.iter_symbols():
            if sym.name.startswith("_ZTV") and not sym.name.startswith("_ZTVN10__cxxabiv1"):
                out[sym.name[4:]] = sym["st_value"] + 16
    return out


def build_zoo(tmp):
    run("gcc", "-O2", "-c", str(SRC / "sink.c"), "-o", f"{tmp}/sink.o")
    # names and edges come from a build that keeps type info
    run("g++", "-O0", "-frtti", *GCC_FLAGS, str(SRC / "zoo.cpp"), f"{tmp}/sink.o", "-o", f"{tmp}/zoo_rtti")
    run("strip", f"{tmp}/zoo_rtti")
    shutil.copy(f"{tmp}/zoo_rtti", FIX / "zoo_rtti")
    rtti = parse_rtti(open_image(f"{tmp}/zoo_rtti"))
    name_of = {vt: name for name, vt in rtti.name_to_vt.items()}

    def named(c):
        return name_of.get(c, c)

    classes = sorted(named(c) for c in rtti.classes)
    edges = sorted((named(d), named(b), k) for d, b, k in rtti.edges)
    for opt in ("O0", "O2"):
        out = f"{tmp}/zoo_{opt}"
        run("g++", f"-{opt}", "-fno-rtti", *GCC_FLAGS, str(SRC / "zoo.cpp"), f"{tmp}/sink.o", "-o", out)
        symbols = vtable_symbols(out)
        run("strip", out)
        shutil.copy(out, FIX / f"zoo_{opt}")
        gt = GroundTruth(set(classes), set(edges), {c: symbols.get(c) for c in classes})
        (FIX / f"zoo_{opt}.gt.json").write_text(gt.dumps())


def build_running_example(tmp):
    # type info stays in: the loader and ground-truth tests read it, the analysis ignores it
    out = f"{tmp}/running_example_O0"
    run("g++", "-O0", "-frtti", *GCC_FLAGS, str(SRC / "running_example.cpp"), f"{tmp}/sink.o", "-o", out)
    run("strip", out)
    shutil.copy(out, FIX / "running_example_O0")
    rtti = parse_rtti(open_image(out))
    name_of = {vt: name for name, vt in rtti.name_to_vt.items()}
    gt = GroundTruth({name_of[c] for c in rtti.classes},
                     {(name_of[d], name_of[b], k) for d, b, k in rtti.edges}, dict(rtti.name_to_vt))
    (FIX / "running_example_O0.gt.json").write_text(gt.dumps())


def build_aliasing(tmp):
    run("as", str(SRC / "aliasing.s"), "-o", f"{tmp}/aliasing.o")
    run("ld", "-o", f"{tmp}/aliasing", f"{tmp}/aliasing.o")
    symbols = {}
    with open(f"{tmp}/aliasing", "rb") as fh:
        for sym in ELFFile(fh).get_section_by_name(".symtab").iter_symbols():
            symbols[sym.name] = sym["st_value"]
    run("strip", f"{tmp}/aliasing")
    shutil.copy(f"{tmp}/aliasing", FIX / "aliasing")
    gt = GroundTruth({"X", "Private"}, set(), {"X": symbols["vt_x"], "Private": symbols["vt_private"]})
    (FIX / "aliasing.gt.json").write_text(gt.dumps())


def golden_binary_outputs():
    for name in ("zoo_O0", "zoo_O2", "running_example_O0", "aliasing"):
        # independent section listing for the loader tests
        dump = subprocess.run(["readelf", "-SW", str(FIX / name)], check=True, capture_output=True, text=True)
        (FIX / f"{name}.readelf.txt").write_text(dump.stdout)
        image = open_image(FIX / name)
        provider = CapstoneProvider(image)
        tables, handler = extract_vtables(image, vtable_candidates(image, provider))
        (FIX / f"{name}.vt").write_text(dump_vtables(tables, handler))
        (FIX / f"{name}.facts").write_text(dump_facts(ingest_binary(image, tables)))
        (FIX / f"{name}.cfg.facts").write_text(dump_facts(ingest_binary(image, tables, cfg_order=True)))


# -- hand-written corpora ----------------------------------------------------------

class Corpus:
    """Lays out tables and functions at made-up link addresses."""

    def __init__(self, code=0x401000, data=0x402000):
        self.code = code
        self.data = data
        self.tables = []
        self.facts = {}
        self.vt = {}

    def fn(self, *events, at=None):
        addr = at if at is not None else self.code
        if at is None:
            self.code += 0x40
        evs = []
        for seq, ev in enumerate(events):
            evs.append(_event(addr, seq, ev))
        if evs:
            self.facts[addr] = FunctionFacts(addr, tuple(evs))
        return addr

    def table(self, name, fns, ott=0):
        addr = self.data
        self.tables.append(VTable(addr, ott, None, tuple(fns)))
        self.data = addr + 8 * len(fns) + 16
        self.vt[name] = addr
        return addr

    def write(self, stem, edges, classes=None, missing=()):
        classes = set(classes or self.vt) | set(missing)
        n2v = {c: self.vt.get(c) for c in classes}
        gt = GroundTruth(classes, set(edges), n2v)
        (FIX / f"{stem}.facts").write_text(dump_facts(self.facts))
        (FIX / f"{stem}.vt").write_text(dump_vtables(self.tables))
        (FIX / f"{stem}.gt.json").write_text(gt.dumps())


def _this(spec):
    origin, off = spec
    return ThisExpr(origin, off)


def _event(fn, seq, ev):
    kind = ev[0]
    if kind == "V":
        return FactEvent.vptr_write(fn, seq, _this(ev[1]), ev[2])
    if kind == "C":
        return FactEvent.call(fn, seq, ev[1], _this(ev[2]))
    if kind == "M":
        return FactEvent.member_access(fn, seq, _this(ev[1]), ev[2], ev[3] if len(ev) > 3 else "r")
    if kind == "D":
        return FactEvent.delete_call(fn, seq)
    raise ValueError(kind)


def running_example():
    """Classes A-D: D has primary base C, secondary base B at 16 and a
    composed A at 24. Only D's constructor survives, with every sub-object
    constructor inlined."""
    c = Corpus(data=0x401208)
    fns = [0x401100 + 0x10 * i for i in range(8)]
    c.table("C", fns[0:2])
    c.table("D", fns[2:4])
    c.table("D@16", fns[4:5], ott=-16)
    c.table("B", fns[5:6])
    c.table("A", fns[6:7])
    ctor = 0x401000
    events = [
        None,
        None,
        ("V", ("a0", 0), c.vt["C"]),      # 2: C-in-D
        ("V", ("a0", 16), c.vt["B"]),     # 3: B-in-D
        ("V", ("a0", 0), c.vt["D"]),      # 4: D overwrites C
        ("V", ("a0", 16), c.vt["D@16"]),  # 5: D's secondary overwrites B
        ("V", ("a0", 24), c.vt["A"]),     # 6: composed A
    ]
    # keep the instruction numbering as seq
    c.facts[ctor] = FunctionFacts(ctor, tuple(_event(ctor, i, e) for i, e in enumerate(events) if e))
    del c.vt["D@16"]
    c.write("running_example", [("D", "C", "primary"), ("D", "B", "secondary")])


def marx_example():
    """Two independent hierarchies, B: A, C and E: D, F.

    B is recovered from its constructor. E survives only inlined into a
    function that allocates it, so its edges come from overwrites that the
    layout signals must orient.
    """
    c = Corpus()
    a0 = c.fn(("M", ("a0", 8), "int64"))
    a1 = c.fn(("M", ("a0", 0), "vptr_slot"))
    c0 = c.fn(("M", ("a0", 8), "int64"))
    b1 = c.fn(("M", ("a0", 32), "int64"))
    b2 = c.fn(("M", ("a0", 8), "int64", "w"))
    d0 = c.fn(("M", ("a0", 8), "int64"))
    d1 = c.fn(("M", ("a0", 0), "vptr_slot"))
    f0 = c.fn(("M", ("a0", 8), "float64"))
    e1 = c.fn(("M", ("a0", 32), "int32"))
    e2 = c.fn(("M", ("a0", 0), "vptr_slot"), ("M", ("a0", 8), "int64"))
    c.table("A", [a0, a1])
    c.table("C", [c0])
    c.table("B", [a0, b1, b2])
    c.table("B@16", [c0], ott=-16)
    c.table("D", [d0, d1])
    c.table("F", [f0])
    c.table("E", [d0, e1, e2])
    c.table("E@16", [f0], ott=-16)
    vt = c.vt
    c.fn(("V", ("a0", 0), vt["A"]), ("M", ("a0", 8), "int64", "w"),
         ("V", ("a0", 16), vt["C"]), ("M", ("a0", 24), "int64", "w"),
         ("V", ("a0", 0), vt["B"]), ("V", ("a0", 16), vt["B@16"]),
         ("M", ("a0", 32), "int64", "w"))
    c.fn(("C", 0x401800, ("u", 0)),
         ("V", ("h0", 0), vt["D"]), ("V", ("h0", 16), vt["F"]),
         ("V", ("h0", 0), vt["E"]), ("V", ("h0", 16), vt["E@16"]),
         ("C", None, ("h0", 0)))
    del vt["B@16"], vt["E@16"]
    c.write("marx", [("B", "A", "primary"), ("B", "C", "secondary"),
                     ("E", "D", "primary"), ("E", "F", "secondary")])


def mib_chain():
    """X derives Y derives Z; Y's table was dropped by the compiler, so X's
    destructor goes straight from X's vptr to Z's. W derives X."""
    c = Corpus()
    z0 = c.fn(("M", ("a0", 8), "int64"))
    x0 = c.fn(("M", ("a0", 16), "int64"))
    w0 = c.fn(("M", ("a0", 24), "int64"))
    xdtor, wdtor = c.code, c.code + 0x40
    c.table("Z", [z0])
    c.table("X", [x0, xdtor])
    c.table("W", [w0, wdtor])
    vt = c.vt
    c.fn(("V", ("a0", 0), vt["X"]), ("M", ("a0", 16), "int64"), ("V", ("a0", 0), vt["Z"]),
         ("M", ("a0", 8), "int64"))
    c.fn(("V", ("a0", 0), vt["W"]), ("M", ("a0", 24), "int64"), ("V", ("a0", 0), vt["X"]),
         ("M", ("a0", 16), "int64"), ("V", ("a0", 0), vt["Z"]))
    c.write("mib_chain", [("X", "Y", "primary"), ("Y", "Z", "primary"), ("W", "X", "primary")],
            missing=("Y",))


def score_19_of_22():
    """A 22-edge truth of which a recovered graph holds 19 and nothing else."""
    ids = [0x600010 + 0x20 * i for i in range(23)]
    edges = [(ids[i], ids[(i - 1) // 2]) for i in range(1, 23)]
    gt = {"classes": [f"{x:#x}" for x in ids],
          "edges": [{"derived": f"{d:#x}", "base": f"{b:#x}", "kind": "primary"} for d, b in edges]}
    cht = {"nodes": [f"{x:#x}" for x in ids],
           "edges": [{"derived": f"{d:#x}", "base": f"{b:#x}", "kind": "primary", "provenance": ["fixture"]}
                     for d, b in edges[:19]]}
    (FIX / "score_19_of_22.gt.json").write_text(json.dumps(gt, sort_keys=True, indent=1) + "\n")
    (FIX / "score_19_of_22.cht.json").write_text(json.dumps(cht, sort_keys=True, separators=(",", ":")) + "\n")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--binaries", action="store_true", help="recompile the binary fixtures")
    args = ap.parse_args(argv)
    FIX.mkdir(parents=True, exist_ok=True)
    if args.binaries:
        with tempfile.TemporaryDirectory() as tmp:
            build_zoo(tmp)
            build_running_example(tmp)
            build_aliasing(tmp)
    golden_binary_outputs()
    running_example()
    marx_example()
    mib_chain()
    score_19_of_22()
    return 0


if __name__ == "__main__":
    sys.exit(main())
