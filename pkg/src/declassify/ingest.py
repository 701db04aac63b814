"""Lowering x86-64 machine code to per-function facts.

The normalizer is disassembler independent: it consumes :class:`Instr`
records from a provider. :class:`CapstoneProvider` is the bundled one.
Register and stack-slot copies are propagated along one forward sweep in
address order, so a value reaching a join from two paths is simply whichever
definition was seen last. ``cfg_order=True`` instead joins block entry states
over the intra-function control-flow graph.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from .binary_image import ALLOCATOR_NAMES, DELETE_NAMES, BinaryImage, ImmediateHit
from .errors import ProviderError
from .facts import UNKNOWN, FactEvent, FunctionFacts, ThisExpr

log = logging.getLogger(__name__)

ARG_REGS = ("rdi", "rsi", "rdx", "rcx", "r8", "r9")
CALLER_SAVED = ("rax", "rcx", "rdx", "rsi", "rdi", "r8", "r9", "r10", "r11")
FRAME = "F"
INT_TYPE = {1: "int8", 2: "int16", 4: "int32", 8: "int64"}


@dataclass(frozen=True)
class Operand:
    """A decoded operand. Registers are named by their 64-bit parent.

    Memory operands with a rip-relative base carry the absolute address in
    ``disp`` and no base.
    """

    kind: str  # reg | imm | mem
    size: int
    reg: str | None = None
    imm: int | None = None
    base: str | None = None
    index: str | None = None
    scale: int = 1
    disp: int = 0
    xmm: bool = False


@dataclass(frozen=True)
class Instr:
    address: int
    size: int
    mnemonic: str
    operands: tuple = ()
    writes: tuple = ()  # 64-bit parents of every register the instruction writes

    @property
    def next(self):
        return self.address + self.size


def reg(name, size=8):
    return Operand("reg", size, reg=name)


def imm(value, size=8):
    return Operand("imm", size, imm=value)


def mem(base=None, disp=0, size=8, index=None):
    return Operand("mem", size, base=base, disp=disp, index=index)


# -- capstone provider -------------------------------------------------------

_GPR = {}
for _p, _d, _w, _b in (("rax", "eax", "ax", "al"), ("rbx", "ebx", "bx", "bl"), ("rcx", "ecx", "cx", "cl"),
                       ("rdx", "edx", "dx", "dl"), ("rsi", "esi", "si", "sil"), ("rdi", "edi", "di", "dil"),
                       ("rbp", "ebp", "bp", "bpl"), ("rsp", "esp", "sp", "spl")):
    _GPR.update({_p: _p, _d: _p, _w: _p, _b: _p})
_GPR.update({"ah": "rax", "bh": "rbx", "ch": "rcx", "dh": "rdx"})
for _i in range(8, 16):
    for _suffix in ("", "d", "w", "b"):
        _GPR[f"r{_i}{_suffix}"] = f"r{_i}"


def _parent(name):
    if name in _GPR:
        return _GPR[name]
    if name.startswith(("xmm", "ymm", "zmm")):
        return "xmm" + name[3:]
    return name


class CapstoneProvider:
    """Function discovery and decoding with capstone.

    Function starts are the entry point, init/fini array entries, VTable
    function pointers, direct call targets and code addresses that appear as
    instruction immediates. A function spans up to the next start.
    """

    def __init__(self, image: BinaryImage, tables=()):
        try:
            import capstone
            from capstone import x86
        except ImportError as exc:  # pragma: no cover
            raise ProviderError(f"capstone unavailable: {exc}") from None
        self._cs = capstone
        self._x86 = x86
        self.image = image
        self.md = capstone.Cs(capstone.CS_ARCH_X86, capstone.CS_MODE_64)
        self.md.detail = True
        self.text = [s for s in image.sections if s.executable and s.name not in (".plt", ".plt.got", ".plt.sec",
                                                                                   ".init", ".fini")]
        self._starts = self._discover(tables)

    def _in_text(self, addr):
        return any(s.contains(addr) for s in self.text)

    def _discover(self, tables):
        starts = set()
        if self._in_text(self.image.entry):
            starts.add(self.image.entry)
        starts.update(a for a in self.image.init_functions if self._in_text(a))
        for t in tables:
            starts.update(f for f in t.functions() if self._in_text(f))
        for sec in self.text:
            for ins in self.md.disasm(sec.data, sec.virtual_address):
                for op in ins.operands:
                    if op.type == self._x86.X86_OP_IMM and self._in_text(op.imm):
                        if ins.group(self._cs.CS_GRP_JUMP) and not ins.group(self._cs.CS_GRP_CALL):
                            continue
                        starts.add(op.imm)
                    elif (op.type == self._x86.X86_OP_MEM and op.mem.base == self._x86.X86_REG_RIP
                          and ins.mnemonic == "lea"):
                        target = ins.address + ins.size + op.mem.disp
                        if self._in_text(target):
                            starts.add(target)
        return sorted(starts)

    def functions(self):
        return list(self._starts)

    def _end(self, start):
        sec = next(s for s in self.text if s.contains(start))
        later = [a for a in self._starts if a > start and sec.contains(a)]
        return min(later) if later else sec.end

    def _operand(self, ins, op):
        x86 = self._x86
        if op.type == x86.X86_OP_REG:
            name = ins.reg_name(op.reg)
            return Operand("reg", op.size, reg=_parent(name), xmm=name.startswith(("xmm", "ymm", "zmm")))
        if op.type == x86.X86_OP_IMM:
            return Operand("imm", op.size, imm=op.imm)
        m = op.mem
        if m.base == x86.X86_REG_RIP:
            return Operand("mem", op.size, disp=ins.address + ins.size + m.disp)
        return Operand("mem", op.size,
                       base=_parent(ins.reg_name(m.base)) if m.base else None,
                       index=_parent(ins.reg_name(m.index)) if m.index else None,
                       scale=m.scale, disp=m.disp)

    def instructions(self, start):
        end = self._end(start)
        sec = next(s for s in self.text if s.contains(start))
        lo = start - sec.virtual_address
        data = sec.data[lo:end - sec.virtual_address]
        out = []
        pos = 0
        while pos < len(data):
            decoded = False
            for ins in self.md.disasm(data[pos:], start + pos):
                decoded = True
                try:
                    _, written = ins.regs_access()
                except self._cs.CsError:
                    written = ()
                out.append(Instr(ins.address, ins.size, ins.mnemonic,
                                 tuple(self._operand(ins, op) for op in ins.operands),
                                 tuple(sorted({_parent(ins.reg_name(r)) for r in written}))))
                pos = ins.address + ins.size - start
            if not decoded:
                pos += 1  # undecodable byte
        return out

    def _read_only(self, addr):
        sec = self.image.section_at(addr)
        return sec if sec is not None and sec.read_only and not sec.executable else None

    def code_references(self):
        """Read-only addresses formed by rip-relative operands."""
        hits = []
        for sec in self.text:
            for ins in self.md.disasm(sec.data, sec.virtual_address):
                for op in ins.operands:
                    if op.type == self._x86.X86_OP_MEM and op.mem.base == self._x86.X86_REG_RIP:
                        target = ins.address + ins.size + op.mem.disp
                        tsec = self._read_only(target)
                        if tsec is not None:
                            hits.append(ImmediateHit(ins.address, target, tsec.name))
        return hits

    def indexed_tables(self):
        """Read-only addresses used as the base of an indexed load, the
        dispatch pattern of switch jump tables."""
        out = set()
        for sec in self.text:
            for ins in self.md.disasm(sec.data, sec.virtual_address):
                for op in ins.operands:
                    if op.type == self._x86.X86_OP_MEM and op.mem.index and not op.mem.base:
                        disp = op.mem.disp & 0xFFFFFFFFFFFFFFFF
                        if self._read_only(disp) is not None:
                            out.add(disp)
        return out


# -- normalization -----------------------------------------------------------

@dataclass
class _State:
    regs: dict = field(default_factory=dict)
    stack: dict = field(default_factory=dict)  # frame offset -> value of an 8-byte slot

    def copy(self):
        return _State(dict(self.regs), dict(self.stack))

    def join(self, other):
        regs = {k: v for k, v in self.regs.items() if other.regs.get(k) == v}
        stack = {k: v for k, v in self.stack.items() if other.stack.get(k) == v}
        return _State(regs, stack)

    def __eq__(self, other):
        return self.regs == other.regs and self.stack == other.stack


def _initial_state():
    regs = {r: ("p", f"a{i}", 0) for i, r in enumerate(ARG_REGS)}
    regs["rsp"] = ("p", FRAME, 0)
    return _State(regs)


@dataclass
class _Context:
    """Binary-wide lookups the normalizer needs."""

    vtables: frozenset
    allocators: frozenset = frozenset()
    deletes: frozenset = frozenset()
    is_read_only: object = None
    is_code: object = None


class _Sweep:
    def __init__(self, fn, ctx: _Context, alloc_ids, frame_id):
        self.fn = fn
        self.ctx = ctx
        self.alloc_ids = alloc_ids
        self.frame_origin = f"h{frame_id}"
        self.events = []  # mutable [kind, base, vtable, target, type, mode]
        self.pending = {}  # register -> index of the load event that defined it
        self.emit = True

    # values are ("p", origin, offset), ("c", int) or None
    def _this(self, value):
        if value is None or value[0] != "p":
            return UNKNOWN
        origin = self.frame_origin if value[1] == FRAME else value[1]
        return ThisExpr(origin, value[2])

    def _event(self, *rec):
        if self.emit:
            self.events.append(list(rec))
            return len(self.events) - 1
        return None

    def _get(self, st, op):
        if op.kind == "imm":
            return ("c", op.imm & 0xFFFFFFFFFFFFFFFF)
        if op.kind == "reg":
            v = st.regs.get(op.reg)
            if op.size == 8 or v is None:
                return v
            if v[0] == "c":
                return ("c", v[1] & ((1 << (8 * op.size)) - 1))
            return None
        return None

    def _set(self, st, name, value, size=8):
        self.pending.pop(name, None)
        if size < 8 and value is not None and value[0] != "c":
            value = None
        if size < 4:
            value = None
        if value is None:
            st.regs.pop(name, None)
        else:
            st.regs[name] = value

    def _addr(self, st, op):
        if op.base is None and op.index is None:
            return ("c", op.disp & 0xFFFFFFFFFFFFFFFF)
        if op.index is not None:
            return None
        b = st.regs.get(op.base)
        if b is None:
            return None
        if b[0] == "c":
            return ("c", (b[1] + op.disp) & 0xFFFFFFFFFFFFFFFF)
        return ("p", b[1], b[2] + op.disp)

    def _touch_base(self, op):
        """A register dereferenced as an address was loaded from a member:
        that member holds a pointer."""
        if op.kind != "mem" or op.base is None:
            return
        idx = self.pending.get(op.base)
        if idx is not None and self.events[idx][4] == "int64":
            self.events[idx][4] = "data_ptr"

    @staticmethod
    def _is_member(addr):
        return addr is not None and addr[0] == "p" and addr[1] == "a0"

    def _load(self, st, op, dest=None, ctype=None):
        self._touch_base(op)
        addr = self._addr(st, op)
        if addr is not None and addr[0] == "p" and addr[1] == FRAME:
            return st.stack.get(addr[2]) if op.size == 8 else None
        if self._is_member(addr):
            if ctype is None:
                ctype = "vptr_slot" if addr[2] == 0 and op.size == 8 else INT_TYPE.get(op.size, "unknown")
            idx = self._event("M", self._this(addr), None, None, ctype, "r")
            if dest is not None and idx is not None and ctype == "int64":
                self._pending_after = (dest, idx)
        return None

    def _store(self, st, op, value, ctype=None):
        self._touch_base(op)
        addr = self._addr(st, op)
        if addr is not None and addr[0] == "p" and addr[1] == FRAME:
            for k in [k for k in st.stack if addr[2] - 8 < k < addr[2] + op.size]:
                del st.stack[k]
            if op.size == 8 and value is not None:
                st.stack[addr[2]] = value
        if op.size == 8 and value is not None and value[0] == "c" and value[1] in self.ctx.vtables:
            self._event("V", self._this(addr), value[1], None, None, None)
            return
        if self._is_member(addr):
            if ctype is None:
                ctype = INT_TYPE.get(op.size, "unknown")
                if value is not None and op.size == 8:
                    if value[0] == "p":
                        ctype = "data_ptr"
                    elif self.ctx.is_code and self.ctx.is_code(value[1]):
                        ctype = "code_ptr"
                    elif self.ctx.is_read_only and self.ctx.is_read_only(value[1]):
                        ctype = "data_ptr"
            self._event("M", self._this(addr), None, None, ctype, "w")

    def _call(self, st, ins):
        target = ins.operands[0] if ins.operands else None
        dest = None
        if target is not None and target.kind == "imm":
            dest = target.imm
        elif target is not None and target.kind == "reg":
            idx = self.pending.get(target.reg)
            if idx is not None:
                self.events[idx][4] = "code_ptr"
        elif target is not None and target.kind == "mem":
            self._load(st, target, ctype="code_ptr")
        this = self._this(st.regs.get("rdi"))
        if dest in self.ctx.deletes:
            self._event("D", None, None, None, None, None)
        else:
            self._event("C", this, None, dest, None, None)
        for r in CALLER_SAVED:
            self._set(st, r, None)
        if dest in self.ctx.allocators:
            st.regs["rax"] = ("p", f"h{self.alloc_ids[ins.address]}", 0)

    def step(self, st: _State, ins: Instr):
        self._pending_after = None
        mn = ins.mnemonic
        ops = ins.operands
        written = set(ins.writes)

        if mn in ("mov", "movabs") and len(ops) == 2:
            dst, src = ops
            if src.kind == "mem":
                value = self._load(st, src, dest=dst.reg if dst.kind == "reg" else None)
            else:
                value = self._get(st, src)
            if dst.kind == "reg":
                self._set(st, dst.reg, value, dst.size)
                if dst.size == 8 and src.kind == "reg" and src.reg in self.pending:
                    self.pending[dst.reg] = self.pending[src.reg]
            else:
                self._store(st, dst, value)
            written.discard(dst.reg)
        elif mn == "lea" and len(ops) == 2:
            self._set(st, ops[0].reg, self._addr(st, ops[1]) if ops[0].size == 8 else None)
            written.discard(ops[0].reg)
        elif mn == "push" and ops:
            value = self._get(st, ops[0]) if ops[0].kind != "mem" else self._load(st, ops[0])
            sp = st.regs.get("rsp")
            if sp is not None and sp[0] == "p":
                sp = ("p", sp[1], sp[2] - 8)
                st.regs["rsp"] = sp
                self._store(st, mem("rsp", 0, 8), value)
            written.discard("rsp")
        elif mn == "pop" and ops:
            sp = st.regs.get("rsp")
            value = None
            if sp is not None and sp[0] == "p":
                value = self._load(st, mem("rsp", 0, 8))
                st.regs["rsp"] = ("p", sp[1], sp[2] + 8)
            if ops[0].kind == "reg":
                self._set(st, ops[0].reg, value)
                written.discard(ops[0].reg)
            written.discard("rsp")
        elif mn in ("add", "sub") and len(ops) == 2 and ops[0].kind == "reg" and ops[1].kind == "imm":
            v = st.regs.get(ops[0].reg)
            delta = ops[1].imm if mn == "add" else -ops[1].imm
            if ops[0].size == 8 and v is not None:
                v = ("p", v[1], v[2] + delta) if v[0] == "p" else ("c", (v[1] + delta) & 0xFFFFFFFFFFFFFFFF)
            else:
                v = None
            self._set(st, ops[0].reg, v)
            written.discard(ops[0].reg)
        elif mn == "xor" and len(ops) == 2 and ops[0].kind == "reg" and ops[1].kind == "reg" \
                and ops[0].reg == ops[1].reg and ops[0].size >= 4:
            self._set(st, ops[0].reg, ("c", 0))
            written.discard(ops[0].reg)
        elif mn == "call":
            self._call(st, ins)
            written -= set(CALLER_SAVED) | {"rsp"}
        elif mn == "jmp":
            if ops and ops[0].kind == "imm" and ops[0].imm in self.ctx.deletes:
                self._event("D", None, None, None, None, None)
        elif mn in ("ret", "nop", "endbr64", "leave", "hlt", "int3", "ud2") or mn.startswith("j"):
            if mn == "leave":
                bp = st.regs.get("rbp")
                if bp is not None and bp[0] == "p":
                    st.regs["rsp"] = bp
                    value = self._load(st, mem("rsp", 0, 8))
                    st.regs["rsp"] = ("p", bp[1], bp[2] + 8)
                    self._set(st, "rbp", value)
                else:
                    st.regs.pop("rsp", None)
                    st.regs.pop("rbp", None)
                written -= {"rsp", "rbp"}
        elif mn in ("movss", "movsd", "movq", "movd") and len(ops) == 2:
            ctype = {"movss": "float32", "movsd": "float64"}.get(mn)
            dst, src = ops
            if ctype is None:
                xmm_side = dst if dst.kind == "reg" and dst.xmm else src
                ctype = ("float64" if xmm_side.size >= 8 else "float32") if xmm_side.xmm else None
                if dst.kind == "mem" and src.kind == "reg" and not src.xmm or \
                        src.kind == "mem" and dst.kind == "reg" and not dst.xmm:
                    ctype = INT_TYPE.get((dst if dst.kind == "mem" else src).size)
            if src.kind == "mem":
                self._load(st, src, ctype=ctype)
            elif dst.kind == "mem":
                self._store(st, dst, None if src.xmm else self._get(st, src), ctype=ctype)
        else:
            self._generic(st, ins)

        if self._pending_after is not None:
            dest, idx = self._pending_after
            self.pending[dest] = idx
        for r in written:
            self._set(st, r, None)

    def _generic(self, st, ins):
        mems = [op for op in ins.operands if op.kind == "mem"]
        if not mems:
            return
        op = mems[0]
        float_op = any(o.kind == "reg" and o.xmm for o in ins.operands)
        ctype = None
        if float_op:
            ctype = {4: "float32", 8: "float64"}.get(op.size, "unknown")
        if ins.mnemonic.startswith(("movzx", "movsx")) or ins.mnemonic == "movsxd":
            ctype = INT_TYPE.get(op.size, "unknown")
        self._load(st, op, ctype=ctype)
        writes_mem = ins.operands[0] is op and ins.mnemonic not in ("cmp", "test", "ucomiss", "ucomisd",
                                                                     "comiss", "comisd", "bt")
        if writes_mem:
            self._store(st, op, None, ctype=ctype)


def _blocks(instrs):
    """Split a linear instruction list into basic blocks."""
    addrs = {i.address for i in instrs}
    leaders = {instrs[0].address} if instrs else set()
    for ins in instrs:
        if ins.mnemonic.startswith("j") or ins.mnemonic in ("ret", "ud2", "hlt"):
            leaders.add(ins.next)
            if ins.operands and ins.operands[0].kind == "imm" and ins.operands[0].imm in addrs:
                leaders.add(ins.operands[0].imm)
    blocks = []
    cur = []
    for ins in instrs:
        if ins.address in leaders and cur:
            blocks.append(cur)
            cur = []
        cur.append(ins)
    if cur:
        blocks.append(cur)
    succ = {}
    for b in blocks:
        last = b[-1]
        out = []
        if last.mnemonic.startswith("j") and last.operands and last.operands[0].kind == "imm" \
                and last.operands[0].imm in addrs:
            out.append(last.operands[0].imm)
        if not (last.mnemonic in ("jmp", "ret", "ud2", "hlt")) and last.next in addrs:
            out.append(last.next)
        succ[b[0].address] = out
    return blocks, succ


def normalize_function(address, instrs, ctx: _Context, cfg_order=False) -> FunctionFacts:
    """Run the constant-propagating sweep over one function."""
    alloc_sites = sorted(i.address for i in instrs if i.mnemonic == "call" and i.operands
                         and i.operands[0].kind == "imm" and i.operands[0].imm in ctx.allocators)
    alloc_ids = {a: k for k, a in enumerate(alloc_sites)}
    sweep = _Sweep(address, ctx, alloc_ids, len(alloc_sites))

    if not cfg_order:
        st = _initial_state()
        for ins in instrs:
            sweep.step(st, ins)
    else:
        blocks, succ = _blocks(instrs)
        by_addr = {b[0].address: b for b in blocks}
        entry = {}
        if blocks:
            entry[blocks[0][0].address] = _initial_state()
        work = [blocks[0][0].address] if blocks else []
        sweep.emit = False
        rounds = 0
        while work and rounds < 100 * max(1, len(blocks)):
            rounds += 1
            head = work.pop(0)
            st = entry[head].copy()
            for ins in by_addr[head]:
                sweep.step(st, ins)
            sweep.pending.clear()
            for nxt in succ[head]:
                new = st if nxt not in entry else entry[nxt].join(st)
                if nxt not in entry or new != entry[nxt]:
                    entry[nxt] = new.copy()
                    if nxt not in work:
                        work.append(nxt)
        sweep.emit = True
        for b in blocks:
            st = entry.get(b[0].address)
            st = st.copy() if st is not None else _State()
            sweep.pending.clear()
            for ins in b:
                sweep.step(st, ins)

    events = []
    for seq, (kind, base, vt, target, ctype, mode) in enumerate(sweep.events):
        if kind == "V":
            events.append(FactEvent.vptr_write(address, seq, base, vt))
        elif kind == "C":
            events.append(FactEvent.call(address, seq, target, base))
        elif kind == "M":
            events.append(FactEvent.member_access(address, seq, base, ctype, mode))
        else:
            events.append(FactEvent.delete_call(address, seq))
    return FunctionFacts(address, tuple(events))


def ingest_binary(image: BinaryImage, tables, provider=None, cfg_order=False) -> dict:
    """Facts for every function the provider enumerates.

    Functions that produce no events are left out.
    """
    if provider is None:
        provider = CapstoneProvider(image, tables)
    vt_addrs = frozenset(t.address for t in tables)
    ctx = _Context(vt_addrs,
                   allocators=frozenset(image.import_addresses(ALLOCATOR_NAMES)),
                   deletes=frozenset(image.import_addresses(DELETE_NAMES)),
                   is_read_only=image.is_read_only, is_code=image.is_executable)
    out = {}
    for fn in provider.functions():
        try:
            instrs = provider.instructions(fn)
        except ProviderError:
            raise
        except (ValueError, KeyError, IndexError, StopIteration) as exc:  # noqa: BLE001
            raise ProviderError(f"provider failed on {fn:#x}: {exc}") from exc
        ff = normalize_function(fn, instrs, ctx, cfg_order)
        if ff.events:
            out[fn] = ff
    return out


def vtable_candidates(image: BinaryImage, provider=None):
    """Immediate hits plus rip-relative references, minus jump tables.

    A switch table sitting after zero padding has a valid-looking header, so
    addresses that code only ever indexes into are dropped.
    """
    from .binary_image import scan_immediates
    if provider is None:
        provider = CapstoneProvider(image)
    hits = list(scan_immediates(image.sections)) + provider.code_references()
    jump_tables = provider.indexed_tables()
    return [h for h in hits if h.value not in jump_tables]
