"""VTable validation and grouping into complete-object VTables.

A VTable address here is the address of its first virtual-function slot,
i.e. the value a constructor stores into an object's vptr. The two
mandatory header slots (offset-to-top, RTTI) sit immediately below it.
"""

from __future__ import annotations

import enum
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field

from .binary_image import PURE_VIRTUAL_NAMES, BinaryImage, ImmediateHit, scan_immediates
from .errors import ParseError, UnknownClass

log = logging.getLogger(__name__)

PTR = 8
MAX_OBJECT_SPAN = 1 << 20
MAX_NULL_RUN = 2

#: marker stored in ``VTable.vfptrs`` for a pure-virtual slot
PURE = "pure"


class RejectReason(enum.Enum):
    BadOffsetToTop = "BadOffsetToTop"
    BadRttiSlot = "BadRttiSlot"
    NoFunctionEntries = "NoFunctionEntries"


class Rejected(Exception):
    def __init__(self, candidate, reason):
        super().__init__(f"{candidate:#x}: {reason.value}")
        self.candidate = candidate
        self.reason = reason


@dataclass(frozen=True)
class VTable:
    address: int
    offset_to_top: int
    rtti_slot: int | None
    vfptrs: tuple

    def __post_init__(self):
        if self.offset_to_top > 0:
            raise ValueError(f"vtable {self.address:#x}: positive offset-to-top")
        if not self.vfptrs:
            raise ValueError(f"vtable {self.address:#x}: no entries")

    @property
    def function_count(self):
        return len(self.vfptrs)

    @property
    def is_primary(self):
        return self.offset_to_top == 0

    def functions(self):
        """Concrete function addresses held by this table, in slot order."""
        return [e for e in self.vfptrs if isinstance(e, int)]


@dataclass(frozen=True)
class CompleteObjectVTable:
    primary: VTable
    secondaries: tuple = ()

    @property
    def id(self):
        return self.primary.address

    @property
    def group_size(self):
        return 1 + len(self.secondaries)

    @property
    def tables(self):
        return (self.primary, *self.secondaries)


def pure_virtual_profile(table: VTable) -> tuple:
    """Slot indices that hold the pure-virtual marker."""
    return tuple(i for i, e in enumerate(table.vfptrs) if e == PURE)


def _image(sections):
    if isinstance(sections, BinaryImage):
        return sections
    return BinaryImage(path="", entry=0, sections=list(sections))


def validate_vtable(candidate, sections, claimed=(), pure_handler=None) -> VTable:
    """Check the mandatory-field signature below *candidate*.

    *claimed* holds addresses of other candidates; a vfptr run stops before
    the offset-to-top slot of any of them. Raises :class:`Rejected`.
    """
    image = _image(sections)
    home = image.section_at(candidate)
    if home is None or not home.read_only or home.executable:
        raise Rejected(candidate, RejectReason.BadOffsetToTop)

    ott_slot = candidate - 2 * PTR
    ott = image.read_i64(ott_slot) if home.contains(ott_slot) else None
    if ott is None or ott > 0 or ott < -MAX_OBJECT_SPAN:
        raise Rejected(candidate, RejectReason.BadOffsetToTop)

    rtti = image.read_u64(candidate - PTR)
    if rtti is None or (rtti != 0 and not image.is_read_only(rtti)):
        raise Rejected(candidate, RejectReason.BadRttiSlot)

    stops = {c - 2 * PTR for c in claimed if c > candidate}
    entries = []
    nulls = 0
    addr = candidate
    while home.contains(addr + PTR - 1) and addr not in stops:
        value = image.read_u64(addr)
        if pure_handler is not None and value == pure_handler:
            entries.append(PURE)
            nulls = 0
        elif value == 0:
            nulls += 1
            if nulls > MAX_NULL_RUN:
                break
            entries.append(None)
        elif image.is_executable(value):
            entries.append(value)
            nulls = 0
        else:
            break
        addr += PTR
    while entries and entries[-1] is None:
        entries.pop()
    if not entries:
        raise Rejected(candidate, RejectReason.NoFunctionEntries)
    return VTable(candidate, ott, rtti or None, tuple(entries))


def _plausible(candidates, image, pure_handler):
    ok = []
    for cand in candidates:
        try:
            validate_vtable(cand, image, (), pure_handler)
        except Rejected:
            continue
        ok.append(cand)
    return ok


def find_pure_handler(image: BinaryImage, tables) -> int | None:
    """Locate the pure-virtual handler in a stripped binary.

    An imported ``__cxa_pure_virtual`` wins. Otherwise the handler is the
    most frequent vfptr target that shows up at more than one slot index
    (inherited functions keep their slot index; the handler does not).
    """
    imported = sorted(image.import_addresses(PURE_VIRTUAL_NAMES))
    if imported:
        return imported[0]
    positions = defaultdict(set)
    counts = Counter()
    for table in tables:
        for i, entry in enumerate(table.vfptrs):
            if isinstance(entry, int):
                positions[entry].add(i)
                counts[entry] += 1
    shared = [(counts[t], -t) for t, idx in positions.items() if len(idx) > 1 and counts[t] > 1]
    if not shared:
        return None
    return -max(shared)[1]


def _apply_pure(table, handler):
    if handler is None or handler not in table.vfptrs:
        return table
    return VTable(table.address, table.offset_to_top, table.rtti_slot,
                  tuple(PURE if e == handler else e for e in table.vfptrs))


def extract_vtables(image: BinaryImage, hits=None, pure_handler=None):
    """Validate immediate-derived candidates and walk forward to adjacent
    secondary tables that no instruction references directly.

    Returns ``(tables, handler)`` with tables sorted by address.
    """
    if hits is None:
        hits = scan_immediates(image.sections)
    candidates = sorted({h.value for h in hits if h.value % PTR == 0})
    claims = _plausible(candidates, image, pure_handler)

    found = {}
    pending = list(claims)
    while pending:
        cand = pending.pop()
        if cand in found:
            continue
        try:
            table = validate_vtable(cand, image, claims, pure_handler)
        except Rejected:
            continue
        found[cand] = table
        # an unreferenced secondary directly after this one shares its RTTI slot
        nxt = cand + PTR * table.function_count + 2 * PTR
        if nxt in found:
            continue
        ott = image.read_i64(nxt - 2 * PTR)
        rtti = image.read_u64(nxt - PTR)
        if ott is not None and -MAX_OBJECT_SPAN <= ott < 0 and rtti == (table.rtti_slot or 0):
            pending.append(nxt)
            claims = sorted(set(claims) | {nxt})

    tables = sorted(found.values(), key=lambda t: t.address)
    handler = pure_handler
    if handler is None:
        handler = find_pure_handler(image, tables)
    return [_apply_pure(t, handler) for t in tables], handler


def group_vtables(tables):
    """Merge each primary with the secondaries that follow it in address order.

    Returns ``(groups, orphans)``; orphans are secondaries seen before any
    primary.
    """
    groups = []
    orphans = []
    current = None
    for table in sorted({t.address: t for t in tables}.values(), key=lambda t: t.address):
        if table.is_primary:
            if current is not None:
                groups.append(CompleteObjectVTable(current[0], tuple(current[1:])))
            current = [table]
        elif current is None:
            orphans.append(table)
        else:
            current.append(table)
    if current is not None:
        groups.append(CompleteObjectVTable(current[0], tuple(current[1:])))
    if orphans:
        log.warning("%d secondary vtable(s) precede every primary: %s",
                    len(orphans), ", ".join(f"{t.address:#x}" for t in orphans))
    return groups, orphans


@dataclass
class ClassTable:
    """Lookup structure over the complete-object VTables of one program."""

    groups: list
    by_id: dict = field(init=False)
    owner_of: dict = field(init=False)
    table_at: dict = field(init=False)

    def __post_init__(self):
        self.by_id = {g.id: g for g in self.groups}
        self.owner_of = {}
        self.table_at = {}
        for g in self.groups:
            for t in g.tables:
                self.owner_of[t.address] = g.id
                self.table_at[t.address] = t

    @classmethod
    def from_tables(cls, tables):
        groups, _ = group_vtables(tables)
        return cls(groups)

    def __contains__(self, class_id):
        return class_id in self.by_id

    def __iter__(self):
        return iter(self.by_id)

    def __len__(self):
        return len(self.by_id)

    def group(self, class_id) -> CompleteObjectVTable:
        try:
            return self.by_id[class_id]
        except KeyError:
            raise UnknownClass(class_id) from None

    def budget(self, class_id) -> int:
        return self.group(class_id).group_size

    def is_primary(self, address):
        return address in self.by_id

    def vfptr_targets(self):
        return {f for g in self.groups for t in g.tables for f in t.functions()}


def budget(classes: ClassTable, class_id) -> int:
    """Number of VTables in the class's complete-object group."""
    return classes.budget(class_id)


# -- text formats -----------------------------------------------------------

def _fmt_entry(entry):
    if entry is None:
        return "0"
    if entry == PURE:
        return "p"
    return f"{entry:#x}"


def dump_vtables(tables, pure_handler=None) -> str:
    lines = ["# declassify vtables: T <addr> <offset-to-top> <rtti|0> <entries>"]
    if pure_handler is not None:
        lines.append(f"P {pure_handler:#x}")
    for t in sorted(tables, key=lambda t: t.address):
        entries = ",".join(_fmt_entry(e) for e in t.vfptrs)
        lines.append(f"T {t.address:#x} {t.offset_to_top} {t.rtti_slot or 0:#x} {entries}")
    return "\n".join(lines) + "\n"


def parse_vtables(text):
    """Parse the table dump format; returns ``(tables, pure_handler)``."""
    tables = []
    handler = None
    for no, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            if parts[0] == "P" and len(parts) == 2:
                handler = int(parts[1], 16)
            elif parts[0] == "T" and len(parts) == 5:
                entries = []
                for tok in parts[4].split(","):
                    if tok == "p":
                        entries.append(PURE)
                    elif tok == "0":
                        entries.append(None)
                    else:
                        entries.append(int(tok, 16))
                rtti = int(parts[3], 16)
                tables.append(VTable(int(parts[1], 16), int(parts[2]), rtti or None, tuple(entries)))
            else:
                raise ValueError("unrecognised record")
        except ValueError as exc:
            raise ParseError(no, f"{exc}: {line!r}") from None
    return tables, handler


def load_vtables(path):
    with open(path, encoding="utf-8") as fh:
        return parse_vtables(fh.read())


def format_groups(groups) -> str:
    lines = []
    for g in groups:
        pure = ",".join(str(i) for i in pure_virtual_profile(g.primary)) or "-"
        lines.append(f"class {g.id:#x} tables={g.group_size} fns={g.primary.function_count} pure={pure}")
    return "\n".join(lines) + ("\n" if lines else "")
