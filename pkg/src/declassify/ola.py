"""Object layout analysis: per-class profiles and relationship orientation."""

from __future__ import annotations

import logging
from dataclasses import dataclass

from .errors import UnknownClass
from .facts import MEMBER_ACCESS, TYPE_WIDTH, VPTR_WRITE
from .vtables import PTR, PURE, pure_virtual_profile

log = logging.getLogger(__name__)

A_DERIVES_B = "a_derives_b"
B_DERIVES_A = "b_derives_a"
UNORIENTED = "unoriented"
CONTRADICTION = "contradiction"

UNKNOWN_TYPE = "unknown"


def compatible(t1, t2):
    return t1 == t2 or t1 == UNKNOWN_TYPE or t2 == UNKNOWN_TYPE


@dataclass(frozen=True)
class ObjectProfile:
    class_id: int
    layout: dict
    min_object_size: int
    table_sizes: tuple
    pure_profiles: tuple
    secondary_offsets: frozenset
    complete: bool = True

    @property
    def primary_size(self):
        return self.table_sizes[0]


def _accesses(ff, shift):
    for ev in ff.events:
        if ev.base is None or not ev.base.is_arg0:
            continue
        if ev.kind == MEMBER_ACCESS:
            yield ev.base.offset + shift, ev.coarse_type
        elif ev.kind == VPTR_WRITE:
            yield ev.base.offset + shift, "vptr_slot"


def derive_object_profile(group, facts) -> ObjectProfile:
    """Union the this-relative accesses of every virtual function in *group*.

    Functions reached through a secondary table receive a sub-object pointer,
    so their offsets are shifted by that table's displacement.
    """
    layout = {}
    conflicts = set()
    size = PTR
    complete = True
    seen = set()
    # whatever a function loads from a vptr position is the vptr itself
    slots = {-t.offset_to_top for t in group.tables}
    for table in group.tables:
        shift = -table.offset_to_top
        for fn in table.functions():
            if (fn, shift) in seen:
                continue
            seen.add((fn, shift))
            ff = facts.get(fn)
            if ff is None or not ff.events:
                # the facts format cannot tell an empty function from a missing one
                complete = False
                continue
            for off, typ in _accesses(ff, shift):
                if off < 0:
                    continue
                if off in slots:
                    typ = "vptr_slot"
                size = max(size, off + TYPE_WIDTH.get(typ, 1))
                prev = layout.get(off)
                if prev is None or prev == typ:
                    layout[off] = typ
                elif prev == UNKNOWN_TYPE:
                    layout[off] = typ
                elif typ != UNKNOWN_TYPE:
                    conflicts.add(off)
    for off in conflicts:
        log.debug("class %#x: conflicting types at +%d", group.id, off)
        layout[off] = UNKNOWN_TYPE
    return ObjectProfile(
        class_id=group.id,
        layout=dict(sorted(layout.items())),
        min_object_size=size,
        table_sizes=tuple(t.function_count for t in group.tables),
        pure_profiles=tuple(pure_virtual_profile(t) for t in group.tables),
        secondary_offsets=frozenset(-t.offset_to_top for t in group.secondaries),
        complete=complete,
    )


def derive_profiles(classes, facts) -> dict[int, ObjectProfile]:
    return {g.id: derive_object_profile(g, facts) for g in classes.groups}


# -- orientation -----------------------------------------------------------

def _abstract(entry):
    return entry is None or entry == PURE


def _pure_signal(ta, tb):
    """+1: a derives b, -1: b derives a, 0: neutral, None: both ways."""
    a_abs = b_abs = False
    for ea, eb in zip(ta.vfptrs, tb.vfptrs):
        if _abstract(ea) and not _abstract(eb):
            a_abs = True
        elif _abstract(eb) and not _abstract(ea):
            b_abs = True
    if a_abs and b_abs:
        return None
    if b_abs:
        return 1
    if a_abs:
        return -1
    return 0


def _cmp(x, y):
    return (x > y) - (x < y)


def layout_congruent(derived, base, offset=0):
    """True when every typed member of *base* agrees with *derived* at
    ``offset + member offset``."""
    for off, typ in base.layout.items():
        other = derived.layout.get(offset + off)
        if other is not None and not compatible(other, typ):
            return False
    return True


def _profile(profiles, cid):
    try:
        return profiles[cid]
    except KeyError:
        raise UnknownClass(cid) from None


def orient(a, b, profiles, classes=None, table_a=None, table_b=None) -> str:
    """Decide the direction of an undirected relationship between *a* and *b*.

    *table_a*/*table_b* are the VTables through which the relationship was
    observed (defaults: the primaries). Signals in precedence order:
    pure-virtual asymmetry, relevant table size, minimum object size; then a
    layout veto on the chosen direction.
    """
    pa, pb = _profile(profiles, a), _profile(profiles, b)
    if classes is not None:
        ta = table_a or classes.group(a).primary
        tb = table_b or classes.group(b).primary
    else:
        ta, tb = table_a, table_b

    signals = []
    if ta is not None and tb is not None:
        pure = _pure_signal(ta, tb)
        if pure is None:
            return CONTRADICTION
        signals.append(pure)
        signals.append(_cmp(ta.function_count, tb.function_count))
    else:
        signals.append(_cmp(pa.primary_size, pb.primary_size))
    code_ok = pa.complete and pb.complete
    if code_ok:
        signals.append(_cmp(pa.min_object_size, pb.min_object_size))

    votes = {s for s in signals if s}
    if not votes:
        return UNORIENTED
    if len(votes) > 1:
        return CONTRADICTION
    direction = votes.pop()

    da = -ta.offset_to_top if ta is not None else 0
    db = -tb.offset_to_top if tb is not None else 0
    if direction > 0:
        ok = layout_congruent(pa, pb, da - db)
    else:
        ok = layout_congruent(pb, pa, db - da)
    if code_ok and not ok:
        return CONTRADICTION
    return A_DERIVES_B if direction > 0 else B_DERIVES_A


def check_secondary_offset(derived, offset, base, profiles) -> bool:
    _profile(profiles, base)
    return offset in _profile(profiles, derived).secondary_offsets


def veto_reason(derived, base, profiles, classes, offset=0):
    """Return why a directed edge violates a necessary condition, or None.

    Conditions derived from code (object size, layout) are skipped when
    either profile lacks facts for some virtual function.
    """
    pd, pb = _profile(profiles, derived), _profile(profiles, base)
    offset = offset or 0
    if classes is not None:
        td = classes.group(derived).primary
        if offset:
            sec = [t for t in classes.group(derived).secondaries if -t.offset_to_top == offset]
            td = sec[0] if sec else None
        tb = classes.group(base).primary
        if td is not None:
            if td.function_count < tb.function_count:
                return "table_size"
            if _pure_signal(td, tb) in (None, -1):
                return "pure_virtual"
    if pd.complete and pb.complete:
        if pd.min_object_size < pb.min_object_size:
            return "object_size"
        if not layout_congruent(pd, pb, offset):
            return "layout"
    return None


def format_profiles(profiles) -> str:
    lines = []
    for cid in sorted(profiles):
        p = profiles[cid]
        pure = ";".join(",".join(str(i) for i in prof) or "-" for prof in p.pure_profiles)
        layout = ",".join(f"{off}:{typ}" for off, typ in p.layout.items()) or "-"
        sizes = ",".join(str(s) for s in p.table_sizes)
        lines.append(f"class {cid:#x} size>={p.min_object_size} tables={sizes} pure={pure} layout={layout}")
    return "\n".join(lines) + ("\n" if lines else "")
