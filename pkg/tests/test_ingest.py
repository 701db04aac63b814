import json

import pytest

from declassify.binary_image import open_image
from declassify.errors import ProviderError
from declassify.facts import ThisExpr, dump_facts, load_facts, parse_facts
from declassify.ingest import (CapstoneProvider, Instr, Operand, _Context, imm, ingest_binary, mem, normalize_function,
                               reg, vtable_candidates)
from declassify.vtables import extract_vtables

VT, VT2 = 0x402010, 0x402040
NEW, DELETE = 0x401f00, 0x401f10
RO = range(0x402000, 0x403000)
CODE = range(0x401000, 0x402000)
XMM0 = Operand("reg", 16, reg="xmm0", xmm=True)


def ctx(**kw):
    base = dict(vtables=frozenset({VT, VT2}), allocators=frozenset({NEW}), deletes=frozenset({DELETE}),
                is_read_only=lambda a: a in RO or a in CODE, is_code=lambda a: a in CODE)
    base.update(kw)
    return _Context(**base)


def asm(*rows, start=0x401000):
    """``(mnemonic, operands...)`` rows at 4-byte strides."""
    out = []
    for k, (mn, *ops) in enumerate(rows):
        writes = ()
        if ops and ops[0].kind == "reg" and mn not in ("push", "cmp", "test", "call", "jmp") \
                and not mn.startswith("j"):
            writes = (ops[0].reg,)
        out.append(Instr(start + 4 * k, 4, mn, tuple(ops), writes))
    return out


def lines(instrs, cfg=False, **kw):
    ff = normalize_function(0x401000, instrs, ctx(**kw), cfg_order=cfg)
    return dump_facts({0x401000: ff}).splitlines()


def test_vptr_store_through_this():
    assert lines(asm(("mov", mem("rdi", 0), imm(VT, 4)), ("ret",))) == ["V 0x401000 0 a0 0 0x402010"]


def test_register_copy_and_offset():
    out = lines(asm(("mov", reg("rax"), imm(VT2, 4)),
                    ("lea", reg("rbx"), mem("rdi", 16)),
                    ("mov", mem("rbx", 0), reg("rax")),
                    ("ret",)))
    assert out == ["V 0x401000 0 a0 16 0x402040"]


def test_call_with_adjusted_this():
    out = lines(asm(("mov", reg("rbx"), reg("rdi")),
                    ("lea", reg("rdi"), mem("rbx", 24)),
                    ("call", imm(0x401100)),
                    ("mov", reg("rdi"), reg("rbx")),
                    ("call", imm(0x401200)),
                    ("mov", reg("rdi"), reg("rax")),
                    ("call", imm(0x401300))))
    assert out == ["C 0x401000 0 0x401100 a0 24", "C 0x401000 1 0x401200 a0 0",
                   "C 0x401000 2 0x401300 u 0"]


def test_caller_saved_clobbered():
    out = lines(asm(("mov", reg("rcx"), reg("rdi")),
                    ("call", imm(0x401100)),
                    ("mov", mem("rcx", 8), imm(1, 4))))
    assert out[-1] == "C 0x401000 0 0x401100 a0 0"
    assert len(out) == 1  # rcx no longer points at this


def test_spill_and_reload():
    out = lines(asm(("sub", reg("rsp"), imm(16)),
                    ("mov", mem("rsp", 8), reg("rdi")),
                    ("call", imm(0x401100)),
                    ("mov", reg("rax"), mem("rsp", 8)),
                    ("mov", mem("rax", 0), imm(VT, 4))))
    assert out[-1] == "V 0x401000 1 a0 0 0x402010"


def test_allocation_origins_in_address_order():
    out = lines(asm(("call", imm(NEW)),
                    ("mov", reg("rbx"), reg("rax")),
                    ("call", imm(NEW)),
                    ("mov", mem("rax", 0), imm(VT, 4)),
                    ("mov", mem("rbx", 8), imm(VT2, 4)),
                    ("mov", reg("rdi"), reg("rbx")),
                    ("call", imm(DELETE))))
    # rdi is still this at the first call; the call clobbers it
    assert out == ["C 0x401000 0 0x401f00 a0 0", "C 0x401000 1 0x401f00 u 0",
                   "V 0x401000 2 h1 0 0x402010", "V 0x401000 3 h0 8 0x402040", "D 0x401000 4"]


def test_stack_object_gets_frame_origin():
    out = lines(asm(("call", imm(NEW)),
                    ("lea", reg("rdi"), mem("rsp", -32)),
                    ("mov", mem("rdi", 0), imm(VT, 4))))
    assert out[-1] == "V 0x401000 1 h1 -32 0x402010"


def test_tail_jump_to_delete():
    assert lines(asm(("jmp", imm(DELETE)))) == ["D 0x401000 0"]


def test_member_types():
    out = lines(asm(("mov", reg("rbx"), reg("rdi")),
                    ("mov", reg("rax"), mem("rbx", 0)),          # vptr slot read
                    ("call", mem("rax", 16)),                    # virtual call through it
                    ("mov", reg("rdx"), mem("rdi", 0)),          # rdi clobbered: nothing
                    ("mov", reg("rsi"), mem("rbx", 8)),          # loaded pointer ...
                    ("mov", reg("ecx", 4), mem("rsi", 0, 4)),    # ... then dereferenced
                    ("mov", reg("r8"), mem("rbx", 16)),          # loaded code pointer ...
                    ("call", reg("r8")),                         # ... then called
                    ("mov", reg("r9"), mem("rbx", 24)),          # plain integer
                    ))
    assert out == ["M 0x401000 0 a0 0 vptr_slot r", "C 0x401000 1 u a0 0", "M 0x401000 2 a0 8 data_ptr r",
                   "M 0x401000 3 a0 16 code_ptr r", "C 0x401000 4 u u 0", "M 0x401000 5 a0 24 int64 r"]


def test_store_types():
    out = lines(asm(("mov", mem("rdi", 8), imm(0x401100, 4)),      # function address
                    ("mov", mem("rdi", 16), imm(0x402100, 4)),     # read-only data
                    ("mov", mem("rdi", 24), imm(7, 4)),
                    ("mov", mem("rdi", 32, 4), imm(7, 4)),
                    ("lea", reg("rax"), mem("rdi", 40)),
                    ("mov", mem("rdi", 48), reg("rax")),
                    ("movss", mem("rdi", 56, 4), XMM0),
                    ("movsd", mem("rdi", 64, 8), XMM0)))
    assert [line.split()[5] for line in out] == ["code_ptr", "data_ptr", "int64", "int32", "data_ptr",
                                                   "float32", "float64"]


# the aliasing snippet: this escapes into rbx, a second argument is tested
ALIAS = [
    ("push", reg("rbx")),
    ("mov", reg("rbx"), reg("rdi")),
    ("mov", mem("rdi", 0), imm(VT, 4)),
    ("mov", reg("rdi"), reg("rsi")),
    ("test", reg("rdi"), reg("rdi")),
    ("je", imm(0x401000 + 4 * 9)),
    ("mov", reg("rdi"), reg("rbx")),
    ("mov", mem("rdi", 8), imm(1, 4)),
    ("ret",),
    ("call", imm(0x401100)),
    ("ret",),
]


def test_linear_sweep_carries_fallthrough_state():
    # a linear sweep lets the fallthrough's rdi = this flow into the branch target
    assert lines(asm(*ALIAS))[-1] == "C 0x401000 2 0x401100 a0 0"


def test_cfg_order_uses_branch_state():
    assert lines(asm(*ALIAS), cfg=True)[-1] == "C 0x401000 2 0x401100 a1 0"


def test_cfg_join_drops_disagreeing_values():
    out = lines(asm(("test", reg("rsi"), reg("rsi")),
                    ("je", imm(0x401000 + 4 * 4)),
                    ("lea", reg("rdi"), mem("rdi", 16)),
                    ("jmp", imm(0x401000 + 4 * 4)),
                    ("call", imm(0x401100))), cfg=True)
    assert out == ["C 0x401000 0 0x401100 u 0"]


def test_empty_function():
    assert normalize_function(0x401000, [], ctx()).events == ()


# -- fixture binaries ------------------------------------------------------------

def _binary_facts(fixtures, name, cfg):
    image = open_image(fixtures / name)
    provider = CapstoneProvider(image)
    tables, _ = extract_vtables(image, vtable_candidates(image, provider))
    return ingest_binary(image, tables, cfg_order=cfg)


@pytest.mark.parametrize("name", ["zoo_O0", "zoo_O2", "running_example_O0", "aliasing"])
@pytest.mark.parametrize("cfg", [False, True])
def test_golden_facts(fixtures, name, cfg):
    """Facts reviewed by hand against objdump when the fixtures were built."""
    golden = fixtures / f"{name}{'.cfg' if cfg else ''}.facts"
    assert dump_facts(_binary_facts(fixtures, name, cfg)) == golden.read_text()


def test_running_example_ctor_events(fixtures):
    """At O0 D's constructor calls C(), then B() at +16, stores both of its
    own vptrs, then constructs the A member at +32."""
    facts = parse_facts((fixtures / "running_example_O0.facts").read_text())
    gt = json.loads((fixtures / "running_example_O0.gt.json").read_text())["name_to_vt"]
    d = int(gt["1D"], 16)
    (ctor,) = [ff for ff in facts.values()
               if [e.vtable for e in ff.events if e.kind == "vptr_write" and e.base == ThisExpr("a0", 0)] == [d]
               and any(e.kind == "call" for e in ff.events)
               and not any(e.kind == "delete_call" for e in ff.events)
               and ff.events[0].kind == "call"]
    shape = [(e.kind, e.base.offset) for e in ctor.events if e.kind in ("call", "vptr_write")]
    assert shape[:5] == [("call", 0), ("call", 16), ("vptr_write", 0), ("vptr_write", 16), ("call", 32)]


def test_aliasing_binary_events(fixtures):
    linear = parse_facts((fixtures / "aliasing.facts").read_text())
    cfg = parse_facts((fixtures / "aliasing.cfg.facts").read_text())
    (host,) = [fn for fn, ff in linear.items() if any(e.kind == "vptr_write" for e in ff.events)
               and any(e.kind == "call" for e in ff.events)]
    lc = [e for e in linear[host].events if e.kind == "call"]
    cc = [e for e in cfg[host].events if e.kind == "call"]
    assert lc[0].this_arg == ThisExpr("a0", 0)
    assert cc[0].this_arg == ThisExpr("a1", 0)


def test_zoo_facts_load(fixtures):
    facts = load_facts(fixtures / "zoo_O0.facts")
    assert facts and all(ff.events for ff in facts.values())


class _Broken:
    def functions(self):
        return [0x401000]

    def instructions(self, start):
        raise KeyError(start)


def test_provider_failure_wrapped(fixtures):
    image = open_image(fixtures / "aliasing")
    with pytest.raises(ProviderError):
        ingest_binary(image, [], provider=_Broken())
