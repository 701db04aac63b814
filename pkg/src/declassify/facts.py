"""Normalized per-function event streams ("facts") and their text format.

Record grammar, one per line::

    V <fn> <seq> <origin> <offset> <vtable>          vptr write
    C <fn> <seq> <target|u> <origin> <offset>        call
    M <fn> <seq> <origin> <offset> <type> <r|w>      member access
    D <fn> <seq>                                     delete call

``origin`` is ``a<k>`` (argument k), ``h<k>`` (fresh allocation k) or ``u``.
Addresses are hexadecimal, offsets signed decimal. ``#`` starts a comment.
"""

from __future__ import annotations

import re
from collections import defaultdict
from dataclasses import dataclass

from .errors import DuplicateSeq, ParseError

VPTR_WRITE = "vptr_write"
CALL = "call"
MEMBER_ACCESS = "member_access"
DELETE_CALL = "delete_call"

COARSE_TYPES = ("int8", "int16", "int32", "int64", "float32", "float64",
                "data_ptr", "code_ptr", "vptr_slot", "unknown")
TYPE_WIDTH = {"int8": 1, "int16": 2, "int32": 4, "int64": 8, "float32": 4, "float64": 8,
              "data_ptr": 8, "code_ptr": 8, "vptr_slot": 8, "unknown": 1}

_ORIGIN_RE = re.compile(r"^(?:[ah]\d+|u)$")


@dataclass(frozen=True, order=True)
class ThisExpr:
    """A pointer expressed as ``origin + offset``."""

    origin: str = "u"
    offset: int = 0

    def __post_init__(self):
        if not _ORIGIN_RE.match(self.origin):
            raise ValueError(f"bad origin {self.origin!r}")

    @classmethod
    def arg(cls, index=0, offset=0):
        return cls(f"a{index}", offset)

    @classmethod
    def alloc(cls, index, offset=0):
        return cls(f"h{index}", offset)

    @property
    def known(self):
        return self.origin != "u"

    @property
    def is_arg0(self):
        return self.origin == "a0"

    @property
    def is_fresh(self):
        return self.origin.startswith("h")

    def shifted(self, delta):
        return ThisExpr(self.origin, self.offset + delta) if self.known else self

    def __str__(self):
        return f"{self.origin}{self.offset:+d}"


UNKNOWN = ThisExpr()


@dataclass(frozen=True)
class FactEvent:
    function: int
    seq: int
    kind: str
    base: ThisExpr | None = None  # vptr_write/member_access base, call this-argument
    vtable: int | None = None
    target: int | None = None
    coarse_type: str | None = None
    mode: str | None = None

    @classmethod
    def vptr_write(cls, function, seq, base, vtable):
        return cls(function, seq, VPTR_WRITE, base=base, vtable=vtable)

    @classmethod
    def call(cls, function, seq, target, this_arg=UNKNOWN):
        return cls(function, seq, CALL, base=this_arg, target=target)

    @classmethod
    def member_access(cls, function, seq, base, coarse_type, mode="r"):
        if coarse_type not in COARSE_TYPES:
            raise ValueError(f"bad coarse type {coarse_type!r}")
        if mode not in ("r", "w"):
            raise ValueError(f"bad access mode {mode!r}")
        return cls(function, seq, MEMBER_ACCESS, base=base, coarse_type=coarse_type, mode=mode)

    @classmethod
    def delete_call(cls, function, seq):
        return cls(function, seq, DELETE_CALL)

    @property
    def this_arg(self):
        return self.base


@dataclass(frozen=True)
class FunctionFacts:
    address: int
    events: tuple = ()

    def __post_init__(self):
        seqs = [e.seq for e in self.events]
        if any(b <= a for a, b in zip(seqs, seqs[1:])):
            raise ValueError(f"function {self.address:#x}: seq not strictly increasing")

    @property
    def max_this_offset(self):
        return compute_max_this_offset(self)

    def of_kind(self, kind):
        return [e for e in self.events if e.kind == kind]


def compute_max_this_offset(facts: FunctionFacts) -> int:
    """Largest constant displacement from argument 0 that the function
    touches through a member access or a vptr store (0 when none)."""
    best = 0
    for ev in facts.events:
        if ev.kind in (MEMBER_ACCESS, VPTR_WRITE) and ev.base is not None and ev.base.is_arg0:
            best = max(best, ev.base.offset)
    return best


# -- serialization ----------------------------------------------------------

def _fmt_origin(expr):
    return f"{expr.origin} {expr.offset}"


def format_event(ev: FactEvent) -> str:
    head = f"{ev.function:#x} {ev.seq}"
    if ev.kind == VPTR_WRITE:
        return f"V {head} {_fmt_origin(ev.base)} {ev.vtable:#x}"
    if ev.kind == CALL:
        target = "u" if ev.target is None else f"{ev.target:#x}"
        return f"C {head} {target} {_fmt_origin(ev.base)}"
    if ev.kind == MEMBER_ACCESS:
        return f"M {head} {_fmt_origin(ev.base)} {ev.coarse_type} {ev.mode}"
    if ev.kind == DELETE_CALL:
        return f"D {head}"
    raise ValueError(ev.kind)


def dump_facts(facts) -> str:
    """Canonical serialization: functions by address, events by seq."""
    lines = []
    for addr in sorted(facts):
        lines.extend(format_event(ev) for ev in facts[addr].events)
    return "\n".join(lines) + ("\n" if lines else "")


def _parse_line(tokens):
    tag = tokens[0]
    fn = int(tokens[1], 16)
    seq = int(tokens[2])
    if seq < 0:
        raise ValueError("negative seq")
    if tag == "V" and len(tokens) == 6:
        return FactEvent.vptr_write(fn, seq, ThisExpr(tokens[3], int(tokens[4])), int(tokens[5], 16))
    if tag == "C" and len(tokens) == 6:
        target = None if tokens[3] == "u" else int(tokens[3], 16)
        return FactEvent.call(fn, seq, target, ThisExpr(tokens[4], int(tokens[5])))
    if tag == "M" and len(tokens) == 7:
        return FactEvent.member_access(fn, seq, ThisExpr(tokens[3], int(tokens[4])), tokens[5], tokens[6])
    if tag == "D" and len(tokens) == 3:
        return FactEvent.delete_call(fn, seq)
    raise ValueError(f"malformed {tag!r} record")


def parse_facts(text) -> dict[int, FunctionFacts]:
    events = defaultdict(dict)
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        try:
            ev = _parse_line(line.split())
        except (ValueError, IndexError) as exc:
            raise ParseError(no, f"{exc}: {line!r}") from None
        per_fn = events[ev.function]
        if ev.seq in per_fn:
            raise DuplicateSeq(ev.function, ev.seq)
        per_fn[ev.seq] = ev
    return {fn: FunctionFacts(fn, tuple(evs[s] for s in sorted(evs))) for fn, evs in events.items()}


def load_facts(path) -> dict[int, FunctionFacts]:
    with open(path, encoding="utf-8") as fh:
        return parse_facts(fh.read())


def check_vtable_refs(facts, known_tables, log=None):
    """Warn about vptr writes whose value is not a validated VTable."""
    bad = [(ev.function, ev.seq, ev.vtable)
           for ff in facts.values() for ev in ff.events
           if ev.kind == VPTR_WRITE and ev.vtable not in known_tables]
    if log is not None:
        for fn, seq, vt in bad:
            log.warning("vptr write %#x/%d references unknown vtable %#x", fn, seq, vt)
    return bad
