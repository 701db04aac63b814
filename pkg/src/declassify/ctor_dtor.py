"""Constructor/destructor identification and the two call-order analyses."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from .facts import CALL, DELETE_CALL, VPTR_WRITE

log = logging.getLogger(__name__)

CTOR = "ctor"
DTOR = "dtor"
INLINED_HOST = "inlined_host"
OTHER = "other"

CTOR_CALL = "ctor_call"
CTOR_INLINE = "ctor_inline"
DTOR_CALL = "dtor_call"
DTOR_INLINE = "dtor_inline"
OVERWRITE = "overwrite"


@dataclass(frozen=True)
class ClassifiedFunction:
    address: int
    kind: str
    owner_primary_vt: int | None = None
    coi_seq: int | None = None
    own_vptr_writes: tuple = ()
    note: str = ""


@dataclass(frozen=True)
class InheritanceCandidate:
    derived: int
    base: int
    source: str
    secondary_offset: int | None = None
    provenance: tuple = ()  # ((function, seq), ...)
    ambiguous: bool = False

    def __post_init__(self):
        if self.derived == self.base:
            raise ValueError(f"self candidate {self.derived:#x}")


def _zero_primary_writes(ff, classes):
    return [ev for ev in ff.events
            if ev.kind == VPTR_WRITE and ev.base.is_arg0 and ev.base.offset == 0
            and classes.is_primary(ev.vtable)]


def classify_function(ff, classes, vfptr_targets=None) -> ClassifiedFunction:
    writes = ff.of_kind(VPTR_WRITE)
    if not writes:
        return ClassifiedFunction(ff.address, OTHER)
    if any(ev.base.is_fresh for ev in writes):
        return ClassifiedFunction(ff.address, INLINED_HOST, note="writes into a fresh allocation")
    zero = _zero_primary_writes(ff, classes)
    if not zero:
        return ClassifiedFunction(ff.address, INLINED_HOST, note="no primary write at this+0")

    if vfptr_targets is None:
        vfptr_targets = classes.vfptr_targets()
    is_dtor = ff.address in vfptr_targets or bool(ff.of_kind(DELETE_CALL))
    if not is_dtor:
        first_write = writes[0].seq
        early_calls = [ev for ev in ff.of_kind(CALL) if ev.seq < first_write and ev.target is not None]
        if early_calls:
            log.debug("%#x: calls before first vptr write; kept as ctor", ff.address)

    coi = zero[0] if is_dtor else zero[-1]
    owner = coi.vtable
    own = tuple((ev.seq, ev.base, ev.vtable) for ev in writes
                if classes.owner_of.get(ev.vtable) == owner)
    return ClassifiedFunction(ff.address, DTOR if is_dtor else CTOR, owner, coi.seq, own)


def classify_functions(facts, classes) -> dict[int, ClassifiedFunction]:
    targets = classes.vfptr_targets()
    return {addr: classify_function(facts[addr], classes, targets) for addr in sorted(facts)}


def _known(classified, kind):
    return {addr: c.owner_primary_vt for addr, c in classified.items() if c.kind == kind}


@dataclass
class _Unit:
    """One piece of base-class evidence at a this-relative location."""

    seq: int
    location: tuple | None
    cls: int
    offset: int | None
    source: str
    provenance: list = field(default_factory=list)


def _units(ff, cf, classes, callees, call_source, inline_source, keep):
    """Collect foreign evidence units from *ff*; *keep(seq)* selects the
    relevant side of the COI write."""
    owner = cf.owner_primary_vt
    units = []
    for ev in ff.events:
        if not keep(ev.seq):
            continue
        if ev.kind == VPTR_WRITE:
            cls = classes.owner_of.get(ev.vtable)
            if cls is None or cls == owner or not ev.base.is_arg0:
                continue
            ott = classes.table_at[ev.vtable].offset_to_top
            units.append(_Unit(ev.seq, (ev.base.origin, ev.base.offset), cls,
                               ev.base.offset + ott, inline_source, [(ff.address, ev.seq)]))
        elif ev.kind == CALL and ev.target in callees:
            cls = callees[ev.target]
            if cls == owner:
                continue
            if ev.base.is_arg0:
                units.append(_Unit(ev.seq, (ev.base.origin, ev.base.offset), cls,
                                   ev.base.offset, call_source, [(ff.address, ev.seq)]))
            elif not ev.base.known:
                units.append(_Unit(ev.seq, None, cls, None, call_source, [(ff.address, ev.seq)]))
    return units


def _pick_per_location(units, last):
    chosen = {}
    free = []
    for u in units:
        if u.location is None:
            free.append(u)
        elif last or u.location not in chosen:
            chosen[u.location] = u
    return sorted(free + list(chosen.values()), key=lambda u: u.seq)


def _merge_by_class(units):
    """Collapse units that name the same (class, sub-object offset)."""
    merged = {}
    order = []
    for u in units:
        key = (u.cls, u.offset)
        if key in merged:
            merged[key].provenance.extend(u.provenance)
            continue
        merged[key] = _Unit(u.seq, u.location, u.cls, u.offset, u.source, list(u.provenance))
        order.append(key)
    return [merged[k] for k in order]


def _candidate(owner, unit, ambiguous=False):
    off = unit.offset if unit.offset else None
    return InheritanceCandidate(owner, unit.cls, unit.source, off,
                                tuple(sorted(set(unit.provenance))), ambiguous)


def ctor_analysis(facts, classified, classes) -> list[InheritanceCandidate]:
    """Bases of each constructor's owner, from evidence before COI.

    Per this-relative location only the last foreign vptr store or known
    constructor call before COI counts: nested inlining leaves a chain of
    ancestor stores at the same slot and only the final one names the direct
    base.
    """
    known_ctors = _known(classified, CTOR)
    out = []
    for addr, cf in sorted(classified.items()):
        if cf.kind != CTOR:
            continue
        units = _units(facts[addr], cf, classes, known_ctors, CTOR_CALL, CTOR_INLINE,
                       lambda s, k=cf.coi_seq: s <= k)
        units = _merge_by_class(_pick_per_location(units, last=True))
        out.extend(_candidate(cf.owner_primary_vt, u) for u in units
                   if u.offset is None or u.offset >= 0)
    return out


def dtor_analysis(facts, classified, classes, literal=False) -> list[InheritanceCandidate]:
    """Bases of each destructor's owner, walking evidence after COI backwards
    against the owner's VTable budget.

    With *literal* the call list is taken from events at or before COI, as
    the published pseudo-code reads.
    """
    known_dtors = _known(classified, DTOR)
    out = []
    for addr, cf in sorted(classified.items()):
        if cf.kind != DTOR:
            continue
        owner = cf.owner_primary_vt
        if literal:
            units = _units(facts[addr], cf, classes, known_dtors, DTOR_CALL, DTOR_INLINE,
                           lambda s, k=cf.coi_seq: s <= k)
            units = [u for u in units if u.source == DTOR_CALL]
        else:
            units = _units(facts[addr], cf, classes, known_dtors, DTOR_CALL, DTOR_INLINE,
                           lambda s, k=cf.coi_seq: s > k)
            units = _pick_per_location(units, last=False)
        units = _merge_by_class(units)

        group = classes.group(owner)
        positions = {0} | {-t.offset_to_top for t in group.secondaries}
        remaining = group.group_size
        for u in reversed(units):
            if u.cls not in classes:
                continue
            if not literal and u.offset is not None and u.offset not in positions:
                # cannot be a base sub-object: a member of an inlined base
                continue
            cost = classes.budget(u.cls)
            ambiguous = remaining - cost < 0
            if u.offset is None or u.offset >= 0:
                out.append(_candidate(owner, u, ambiguous))
            remaining -= cost
            if remaining <= 0:
                break
    return out


def format_classification(classified) -> str:
    lines = []
    for addr in sorted(classified):
        c = classified[addr]
        owner = f"{c.owner_primary_vt:#x}" if c.owner_primary_vt is not None else "-"
        coi = str(c.coi_seq) if c.coi_seq is not None else "-"
        lines.append(f"{addr:#x} {c.kind} owner={owner} coi={coi}")
    return "\n".join(lines) + ("\n" if lines else "")
