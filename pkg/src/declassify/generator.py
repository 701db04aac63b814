"""Synthetic corpus generator: random class forests lowered to facts.

Emission follows Itanium construction and destruction order. Constructors
run base constructors (called or inlined), then store the class's own vptrs,
then build composed members. Destructors store their own vptrs, destroy
members in reverse, then run base destructors in reverse declaration order.

Besides the facts and VTables, the generator keeps a record of what
evidence each true edge left behind, which serves as an oracle for recall.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .errors import InvalidConfig
from .evaluation import GroundTruth
from .facts import FactEvent, FunctionFacts, ThisExpr
from .vtables import PURE, VTable

DEFAULT_SEED = 0x5EED

CODE_BASE = 0x401000
FUNC_STRIDE = 0x40
DATA_BASE = 0x500000
PURE_HANDLER = 0x400f00

FIELD_TYPES = ("int8", "int32", "int64", "float32", "float64", "data_ptr")
WIDTH = {"int8": 1, "int32": 4, "int64": 8, "float32": 4, "float64": 8, "data_ptr": 8, "vptr_slot": 8}

D1, D0 = "D1", "D0"


@dataclass
class GenConfig:
    classes: int = 10
    single: float = 0.5        # probability a class has exactly one base
    multiple: float = 0.2      # probability it has two or three bases
    composition: float = 0.3   # probability it holds a polymorphic member
    inlining: float = 0.0
    ctor_elision: float = 0.0
    dtor_elision: float = 0.0
    vtable_elision: float = 0.0
    seed: int = DEFAULT_SEED

    def validate(self):
        if self.classes < 0:
            raise InvalidConfig("class count must be non-negative")
        for name in ("single", "multiple", "composition", "inlining", "ctor_elision",
                     "dtor_elision", "vtable_elision"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidConfig(f"{name}={v} outside [0, 1]")
        if self.single + self.multiple > 1.0:
            raise InvalidConfig("single + multiple exceeds 1")


@dataclass
class GenClass:
    idx: int
    bases: list = field(default_factory=list)      # [(class idx, offset)]
    members: list = field(default_factory=list)    # [(class idx, offset)]
    fields: list = field(default_factory=list)     # [(offset, type)]
    size: int = 8
    positions: tuple = (0,)                        # vptr offsets, ascending
    new_slots: list = field(default_factory=list)  # slot ids introduced here
    pure_new: set = field(default_factory=set)
    overrides: set = field(default_factory=set)    # slot ids overridden here
    tables: dict = field(default_factory=dict)     # position -> [slot id]
    entries: dict = field(default_factory=dict)    # position -> [function addr | PURE]
    impl: dict = field(default_factory=dict)       # slot id -> (function, owner-relative shift) | PURE
    virtual_dtor: bool = True
    has_vtable: bool = True
    ctor_standalone: bool = True
    instantiated: bool = False

    @property
    def name(self):
        return f"K{self.idx}"

    @property
    def concrete(self):
        return all(v != PURE for v in self.impl.values())


@dataclass
class Corpus:
    config: GenConfig
    classes: list
    facts: dict
    tables: list
    pure_handler: int
    ground_truth: GroundTruth
    ctor_of: dict        # class idx -> ctor address
    dtor_of: dict        # class idx -> D1 address
    vt_of: dict          # class idx -> primary table address (None when elided)
    evidence: dict       # (derived idx, base idx) -> set of evidence kinds
    survives: dict       # (derived idx, base idx) -> bool
    accesses: dict       # function address -> [(offset, type)]

    def survivor_count(self):
        return sum(1 for v in self.survives.values() if v)


class _Body:
    """Event buffer for one function, tracking per-slot write history."""

    def __init__(self, gen, address):
        self.gen = gen
        self.address = address
        self.events = []
        self.last = {}

    def _touch(self, origin, off, cls, pos, is_write):
        loc = (origin, off)
        prev = self.last.get(loc)
        if prev is not None and prev[0] != cls and (is_write or prev[2]):
            self.gen.pairs.append((prev[0], prev[1], cls, pos))
        self.last[loc] = (cls, pos, is_write)

    def vptr(self, origin, off, cls, pos):
        self.events.append(FactEvent.vptr_write(self.address, len(self.events),
                                                ThisExpr(origin, off), self.gen.table_addr[(cls, pos)]))
        self._touch(origin, off, cls, pos, True)

    def call(self, target, origin, off, cls=None):
        self.events.append(FactEvent.call(self.address, len(self.events), target, ThisExpr(origin, off)))
        if cls is not None:
            self._touch(origin, off, cls, 0, False)

    def access(self, origin, off, typ, mode="r"):
        self.events.append(FactEvent.member_access(self.address, len(self.events),
                                                   ThisExpr(origin, off), typ, mode))

    def delete(self):
        self.events.append(FactEvent.delete_call(self.address, len(self.events)))


def _align(x, a):
    return (x + a - 1) // a * a


class Generator:
    def __init__(self, config: GenConfig, shape=None):
        config.validate()
        self.cfg = config
        # class idx -> (bases, members) overriding the random draw
        self.shape = dict(shape or {})
        self.rng = random.Random(config.seed)
        self.cls = []
        self.next_fn = CODE_BASE
        self.facts = {}
        self.accesses = {}
        self.table_addr = {}
        self.pairs = []
        self.ctor_of = {}
        self.dtor_of = {}
        self.d0_of = {}

    # -- shape ---------------------------------------------------------

    def _ancestors(self, i):
        out = {i}
        for b, _ in self.cls[i].bases:
            out |= self._ancestors(b)
        return out

    def _pick_bases(self, i):
        r = self.rng.random()
        if i == 0 or r >= self.cfg.single + self.cfg.multiple:
            return []
        want = 1 if r < self.cfg.single else self.rng.choice((2, 3))
        chosen, taken = [], set()
        for cand in self.rng.sample(range(i), min(i, 6)):
            anc = self._ancestors(cand)
            if anc & taken:
                continue
            if chosen and self.cls[cand].virtual_dtor != self.cls[chosen[0]].virtual_dtor:
                continue
            chosen.append(cand)
            taken |= anc
            if len(chosen) == want:
                break
        return chosen

    def _add_class(self, i):
        c = GenClass(i)
        self.cls.append(c)
        forced = self.shape.get(i)
        bases = list(forced[0]) if forced else self._pick_bases(i)
        c.virtual_dtor = (self.cls[bases[0]].virtual_dtor if bases
                          else self.rng.random() >= self.cfg.dtor_elision)
        off = 0
        positions = set()
        for b in bases:
            bc = self.cls[b]
            off = _align(off, 8)
            c.bases.append((b, off))
            positions |= {off + p for p in bc.positions}
            off += bc.size
        if not bases:
            off = 8
            positions = {0}
        c.positions = tuple(sorted(positions))
        for _ in range(self.rng.randint(0, 3)):
            typ = self.rng.choice(FIELD_TYPES)
            off = _align(off, WIDTH[typ])
            c.fields.append((off, typ))
            off += WIDTH[typ]
        if forced:
            for m in forced[1]:
                off = _align(off, 8)
                c.members.append((m, off))
                off += self.cls[m].size
        elif self.rng.random() < self.cfg.composition:
            anc = self._ancestors(i)
            pool = [d.idx for d in self.cls[:i] if d.concrete and d.idx not in anc]
            if pool:
                m = self.rng.choice(pool)
                off = _align(off, 8)
                c.members.append((m, off))
                off += self.cls[m].size
        c.size = _align(max(off, 8), 8)
        self._slots(c)
        self._functions(c)
        self._tables_for(c)

    # -- virtual slots ---------------------------------------------------

    def _slots(self, c):
        inherited = {}  # slot -> (impl fn, this shift) or PURE
        for b, boff in c.bases:
            for slot, imp in self.cls[b].impl.items():
                if imp == PURE:
                    inherited.setdefault(slot, PURE)
                else:
                    inherited.setdefault(slot, (imp[0], imp[1] + boff))
        for slot, imp in sorted(inherited.items(), key=lambda kv: str(kv[0])):
            if self.rng.random() < (0.5 if imp == PURE else 0.3):
                c.overrides.add(slot)
        c.new_slots = [("touch", c.idx)] + [("f", c.idx, k) for k in range(self.rng.randint(0, 2))]
        if not c.bases:
            c.pure_new = {s for s in c.new_slots[1:] if self.rng.random() < 0.3}
        c.inherited = inherited

    def _tables_for(self, c):
        tables = {}
        if c.bases:
            primary = list(self.cls[c.bases[0][0]].tables[0])
        else:
            primary = [D1, D0] if c.virtual_dtor else []
        for b, boff in c.bases:
            for pos, slots in self.cls[b].tables.items():
                p = boff + pos
                if p == 0:
                    continue
                tables[p] = list(slots)
                for s in slots:
                    if s in c.overrides and s not in primary:
                        primary.append(s)
        primary.extend(c.new_slots)
        tables[0] = primary
        c.tables = dict(sorted(tables.items()))

    # -- functions -------------------------------------------------------

    def _new_fn(self):
        addr = self.next_fn
        self.next_fn += FUNC_STRIDE
        return addr

    def _emit_plain(self, addr, accesses):
        # every virtual function loads its own vptr first, so none is empty
        accesses = sorted(set(accesses) | {(0, "vptr_slot")})
        body = _Body(self, addr)
        for off, typ in accesses:
            body.access("a0", off, typ, "r")
        self.facts[addr] = FunctionFacts(addr, tuple(body.events))
        self.accesses[addr] = list(accesses)

    def _object_vptrs(self, c):
        """Every vptr slot in a complete object, members included."""
        out = set(c.positions)
        for sub, off in c.members + c.bases:
            out |= {off + p for p in self._object_vptrs(self.cls[sub])}
        return out

    def _touch_accesses(self, c):
        acc = [(p, "vptr_slot") for p in self._object_vptrs(c)]
        acc += list(c.fields)
        return sorted(set(acc))

    def _functions(self, c):
        """Overrides touch what the overridden function touched plus some of
        the class's own fields, which keeps object sizes monotone."""
        impl = {}
        for slot, imp in sorted(c.inherited.items(), key=lambda kv: str(kv[0])):
            if slot in (D1, D0):
                impl[slot] = imp
                continue
            if slot not in c.overrides:
                impl[slot] = imp
                continue
            base_acc = []
            if imp != PURE:
                fn, shift = imp
                base_acc = [(o + shift, t) for o, t in self.accesses[fn]]
            own = [f for f in c.fields if self.rng.random() < 0.5]
            addr = self._new_fn()
            self._emit_plain(addr, sorted(set(base_acc + own)))
            impl[slot] = (addr, 0)
        for slot in c.new_slots:
            if slot in c.pure_new:
                impl[slot] = PURE
                continue
            addr = self._new_fn()
            if slot[0] == "touch":
                acc = self._touch_accesses(c)
            else:
                acc = sorted({f for f in c.fields if self.rng.random() < 0.6})
            self._emit_plain(addr, acc)
            impl[slot] = (addr, 0)
        c.impl = impl

    # -- lifecycle bodies ------------------------------------------------

    def _inline(self):
        return self.rng.random() < self.cfg.inlining

    def _construct(self, body, idx, origin, off):
        c = self.cls[idx]
        if c.ctor_standalone and not self._inline():
            body.call(self.ctor_of[idx], origin, off, idx)
        else:
            self._ctor_body(body, idx, origin, off)

    def _ctor_body(self, body, idx, origin, off):
        c = self.cls[idx]
        for b, boff in c.bases:
            self._construct(body, b, origin, off + boff)
        if c.has_vtable:
            for pos in c.positions:
                body.vptr(origin, off + pos, idx, pos)
        for m, moff in c.members:
            self._construct(body, m, origin, off + moff)
        for foff, typ in c.fields:
            body.access(origin, off + foff, typ, "w")

    def _destroy(self, body, idx, origin, off):
        c = self.cls[idx]
        if idx in self.dtor_of and not self._inline():
            body.call(self.dtor_of[idx], origin, off, idx)
        else:
            self._dtor_body(body, idx, origin, off)

    def _dtor_body(self, body, idx, origin, off):
        c = self.cls[idx]
        if c.has_vtable:
            for pos in c.positions:
                body.vptr(origin, off + pos, idx, pos)
        for m, moff in reversed(c.members):
            self._destroy(body, m, origin, off + moff)
        for b, boff in reversed(c.bases):
            self._destroy(body, b, origin, off + boff)

    def _finish(self, body):
        self.facts[body.address] = FunctionFacts(body.address, tuple(body.events))

    def _lifecycle(self):
        # addresses first so calls can refer forward
        for c in self.cls:
            if c.has_vtable and c.ctor_standalone:
                self.ctor_of[c.idx] = self._new_fn()
            if c.has_vtable and c.virtual_dtor:
                self.dtor_of[c.idx] = self._new_fn()
                self.d0_of[c.idx] = self._new_fn()
        for c in self.cls:
            if c.idx in self.ctor_of:
                body = _Body(self, self.ctor_of[c.idx])
                self._ctor_body(body, c.idx, "a0", 0)
                self._finish(body)
            if c.idx in self.dtor_of:
                body = _Body(self, self.dtor_of[c.idx])
                self._dtor_body(body, c.idx, "a0", 0)
                self._finish(body)
                d0 = _Body(self, self.d0_of[c.idx])
                if self._inline():
                    self._dtor_body(d0, c.idx, "a0", 0)
                else:
                    d0.call(self.dtor_of[c.idx], "a0", 0, c.idx)
                d0.delete()
                self._finish(d0)

    def _hosts(self):
        live = [c.idx for c in self.cls if c.instantiated]
        self.rng.shuffle(live)
        while live:
            k = min(len(live), self.rng.randint(1, 3))
            group, live = live[:k], live[k:]
            body = _Body(self, self._new_fn())
            for h, idx in enumerate(group):
                self._construct(body, idx, f"h{h}", 0)
            for h, idx in enumerate(group):
                c = self.cls[idx]
                if c.virtual_dtor:
                    body.call(None, f"h{h}", 0)  # virtual delete through the vtable
                else:
                    self._dtor_body(body, idx, f"h{h}", 0)
                    body.delete()
            self._finish(body)

    # -- vtables ---------------------------------------------------------

    def _layout_tables(self):
        addr = DATA_BASE
        for c in self.cls:
            if not c.has_vtable:
                continue
            for pos in c.positions:
                addr += 16
                self.table_addr[(c.idx, pos)] = addr
                addr += 8 * len(c.tables[pos])

    def _materialize_tables(self):
        tables = []
        thunks = {}
        for c in self.cls:
            if not c.has_vtable:
                continue
            for pos in c.positions:
                entries = []
                for slot in c.tables[pos]:
                    if slot == D1 or slot == D0:
                        target = self.dtor_of[c.idx] if slot == D1 else self.d0_of[c.idx]
                        shift = 0
                    else:
                        imp = c.impl[slot]
                        if imp == PURE:
                            entries.append(PURE)
                            continue
                        target, shift = imp
                    if shift == pos:
                        entries.append(target)
                    else:
                        key = (target, pos - shift)
                        if key not in thunks:
                            t = self._new_fn()
                            body = _Body(self, t)
                            body.call(target, "a0", shift - pos)
                            self._finish(body)
                            self.accesses[t] = []
                            thunks[key] = t
                        entries.append(thunks[key])
                c.entries[pos] = entries
                tables.append(VTable(self.table_addr[(c.idx, pos)], -pos, None, tuple(entries)))
        return tables

    # -- oracle ----------------------------------------------------------

    def _min_size(self, c):
        size = 8
        for pos, entries in c.entries.items():
            for e in entries:
                if e == PURE:
                    continue
                for off, typ in self.accesses.get(e, ()):
                    if off + pos >= 0:
                        size = max(size, off + pos + WIDTH.get(typ, 1))
        return size

    def _orientable(self, d, b, pos_d, pos_b):
        cd, cb = self.cls[d], self.cls[b]
        ed, eb = cd.entries[pos_d], cb.entries[pos_b]
        pure = any(y == PURE and x != PURE for x, y in zip(ed, eb))
        return pure or len(ed) > len(eb) or self.min_size[d] > self.min_size[b]

    def build(self) -> Corpus:
        for i in range(self.cfg.classes):
            self._add_class(i)

        for c in self.cls:
            c.instantiated = c.concrete and self.rng.random() < 0.7
        changed = True
        while changed:
            changed = False
            for c in self.cls:
                if not c.instantiated:
                    continue
                for anc in self._ancestors(c.idx):
                    for m, _ in self.cls[anc].members:
                        if not self.cls[m].instantiated:
                            self.cls[m].instantiated = True
                            changed = True
        for c in self.cls:
            if not c.instantiated and self.rng.random() < self.cfg.vtable_elision:
                c.has_vtable = False
            c.ctor_standalone = c.has_vtable and self.rng.random() >= self.cfg.ctor_elision

        self._layout_tables()
        self._lifecycle()
        self._hosts()
        tables = self._materialize_tables()
        for fn in list(self.dtor_of.values()) + list(self.d0_of.values()):
            self.accesses[fn] = [(ev.base.offset, "vptr_slot") for ev in self.facts[fn].events
                                 if ev.kind == "vptr_write" and ev.base.origin == "a0"]
        self.min_size = {c.idx: self._min_size(c) for c in self.cls if c.has_vtable}
        return self._corpus(tables)

    def _corpus(self, tables):
        vt_of = {c.idx: self.table_addr.get((c.idx, 0)) for c in self.cls}
        evidence = {}
        for c in self.cls:
            for b, _ in c.bases:
                ev = set()
                if c.idx in self.ctor_of:
                    ev.add("ctor")
                if c.idx in self.dtor_of:
                    ev.add("dtor")
                evidence[(c.idx, b)] = ev
        for x, px, y, py in self.pairs:
            for d, pd, b, pb in ((x, px, y, py), (y, py, x, px)):
                if (d, b) in evidence and self.cls[d].has_vtable and self.cls[b].has_vtable:
                    if pd - pb >= 0 and self._orientable(d, b, pd, pb):
                        evidence[(d, b)].add("overwrite")
        survives = {}
        for (d, b), ev in evidence.items():
            survives[(d, b)] = bool(self.cls[d].has_vtable and self.cls[b].has_vtable and ev)

        names = {c.idx: c.name for c in self.cls}
        edges = set()
        extra = {}
        for c in self.cls:
            for b, boff in c.bases:
                kind = "secondary" if boff else "primary"
                edges.add((names[c.idx], names[b], kind))
                info = {"survives": survives[(c.idx, b)], "evidence": sorted(evidence[(c.idx, b)])}
                if boff:
                    info["offset"] = boff
                extra[(names[c.idx], names[b])] = info
        gt = GroundTruth(classes={c.name for c in self.cls}, edges=edges,
                         name_to_vt={c.name: vt_of[c.idx] for c in self.cls}, extra=extra)
        return Corpus(self.cfg, self.cls, dict(self.facts), tables, PURE_HANDLER, gt,
                      dict(self.ctor_of), dict(self.dtor_of), vt_of, evidence, survives,
                      dict(self.accesses))


def generate_corpus(config: GenConfig | None = None, shape=None, **kw) -> Corpus:
    """Build a corpus; *shape* maps class index to ``(bases, members)``
    for classes whose structure should not be drawn at random."""
    if config is None:
        config = GenConfig(**kw)
    return Generator(config, shape).build()
