"""ELF loading and immediate-operand harvesting.

Only 64-bit little-endian ELF objects are supported. Addresses are link-time
virtual addresses throughout (a load bias of 0 is assumed for PIE objects).
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field

import numpy as np
from elftools.common.exceptions import ELFError
from elftools.elf.constants import SH_FLAGS
from elftools.elf.elffile import ELFFile
from elftools.elf.relocation import RelocationSection

from .errors import NotElf, TruncatedFile, UnsupportedClass

log = logging.getLogger(__name__)

#: section-name prefixes that hold post-relocation read-only data even when
#: the on-disk flags say writable (RELRO)
RELRO_PREFIXES = (".data.rel.ro",)

ALLOCATOR_NAMES = frozenset({"_Znwm", "_Znam", "_ZnwmRKSt9nothrow_t", "_ZnamRKSt9nothrow_t", "malloc", "calloc"})
DELETE_NAMES = frozenset({"_ZdlPv", "_ZdlPvm", "_ZdaPv", "_ZdaPvm", "free"})
PURE_VIRTUAL_NAMES = frozenset({"__cxa_pure_virtual"})


@dataclass(frozen=True)
class SectionImage:
    name: str
    virtual_address: int
    size: int
    data: bytes = field(repr=False)
    readable: bool = True
    writable: bool = False
    executable: bool = False

    def __post_init__(self):
        if len(self.data) != self.size:
            raise ValueError(f"section {self.name}: {len(self.data)} bytes for size {self.size}")

    @property
    def end(self):
        return self.virtual_address + self.size

    @property
    def read_only(self):
        if not self.readable:
            return False
        return not self.writable or self.name.startswith(RELRO_PREFIXES)

    def contains(self, address):
        return self.virtual_address <= address < self.end

    def flag_string(self):
        return ("r" if self.readable else "-") + ("w" if self.writable else "-") + ("x" if self.executable else "-")


@dataclass(frozen=True, order=True)
class ImmediateHit:
    found_at: int
    value: int
    target_section: str


@dataclass
class BinaryImage:
    """Sections plus the little dynamic-linking metadata the analyses need.

    ``imports`` maps a PLT stub address to the imported symbol name and
    ``data_symbols`` maps a relocated data address (GOT slot, copy-relocated
    object, absolute pointer slot) to its symbol name; ``relocations`` keeps
    the addend as well, as ``(name, addend)``. Neither uses the static
    symbol table, so both survive stripping.
    """

    path: str
    entry: int
    sections: list[SectionImage]
    imports: dict[int, str] = field(default_factory=dict)
    data_symbols: dict[int, str] = field(default_factory=dict)
    relocations: dict[int, tuple] = field(default_factory=dict)
    init_functions: list[int] = field(default_factory=list)

    def section_at(self, address):
        for sec in self.sections:
            if sec.contains(address):
                return sec
        return None

    def read_u64(self, address):
        sec = self.section_at(address)
        if sec is None or address + 8 > sec.end:
            return None
        off = address - sec.virtual_address
        return int.from_bytes(sec.data[off:off + 8], "little")

    def read_i64(self, address):
        value = self.read_u64(address)
        if value is None:
            return None
        return value - (1 << 64) if value >> 63 else value

    def read_u32(self, address):
        sec = self.section_at(address)
        if sec is None or address + 4 > sec.end:
            return None
        off = address - sec.virtual_address
        return int.from_bytes(sec.data[off:off + 4], "little")

    def read_cstring(self, address, limit=4096):
        sec = self.section_at(address)
        if sec is None:
            return None
        off = address - sec.virtual_address
        end = sec.data.find(b"\0", off, off + limit)
        if end < 0:
            return None
        return sec.data[off:end].decode("latin-1")

    def is_executable(self, address):
        sec = self.section_at(address)
        return sec is not None and sec.executable

    def is_read_only(self, address):
        sec = self.section_at(address)
        return sec is not None and sec.read_only and not sec.executable

    def import_addresses(self, names):
        return {addr for addr, name in self.imports.items() if _base_name(name) in names}


def _base_name(symbol):
    return symbol.split("@", 1)[0]


def _check_header(raw):
    if len(raw) < 4 or raw[:4] != b"\x7fELF":
        raise NotElf("missing ELF magic")
    if len(raw) < 64:
        raise TruncatedFile("file shorter than an ELF64 header")
    if raw[4] != 2:
        raise UnsupportedClass(f"ELF class {raw[4]} (only ELFCLASS64 is supported)")
    if raw[5] != 1:
        raise UnsupportedClass("big-endian ELF is not supported")


def _open(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    _check_header(raw)
    try:
        elf = ELFFile(io.BytesIO(raw))
        # force header parsing so truncation surfaces here
        n = elf.num_sections()
        if elf.header.e_shoff + n * elf.header.e_shentsize > len(raw):
            raise TruncatedFile("section header table extends past end of file")
    except (ELFError, EOFError) as exc:
        raise TruncatedFile(str(exc)) from exc
    except Exception as exc:  # construct/struct errors on short reads
        if isinstance(exc, TruncatedFile):
            raise
        raise TruncatedFile(f"{type(exc).__name__}: {exc}") from exc
    return raw, elf


def _sections(raw, elf):
    out = []
    for sec in elf.iter_sections():
        flags = sec["sh_flags"]
        if not flags & SH_FLAGS.SHF_ALLOC or sec["sh_addr"] == 0:
            continue
        size = sec["sh_size"]
        if sec["sh_type"] == "SHT_NOBITS":
            data = bytes(size)
        else:
            off = sec["sh_offset"]
            if off + size > len(raw):
                raise TruncatedFile(f"section {sec.name} extends past end of file")
            data = raw[off:off + size]
        out.append(SectionImage(
            name=sec.name,
            virtual_address=sec["sh_addr"],
            size=size,
            data=data,
            readable=True,
            writable=bool(flags & SH_FLAGS.SHF_WRITE),
            executable=bool(flags & SH_FLAGS.SHF_EXECINSTR),
        ))
    out.sort(key=lambda s: s.virtual_address)
    return out


def load_elf(path) -> list[SectionImage]:
    """Return every allocatable section of the ELF64 object at *path*."""
    raw, elf = _open(path)
    return _sections(raw, elf)


def _relocated_symbols(elf):
    slots = {}
    for sec in elf.iter_sections():
        if not isinstance(sec, RelocationSection) or not sec.is_RELA():
            continue
        try:
            symtab = elf.get_section(sec["sh_link"])
        except Exception:
            continue
        if symtab is None or symtab["sh_type"] not in ("SHT_DYNSYM", "SHT_SYMTAB"):
            continue
        if not sec["sh_flags"] & SH_FLAGS.SHF_ALLOC:
            continue
        for rel in sec.iter_relocations():
            idx = rel["r_info_sym"]
            if idx == 0:
                continue
            name = symtab.get_symbol(idx).name
            if name:
                slots[rel["r_offset"]] = (name, rel["r_addend"])
    return slots


def _plt_stubs(sections, got_names):
    """Map each PLT stub to the symbol its GOT slot is relocated against."""
    from capstone import CS_ARCH_X86, CS_MODE_64, Cs
    from capstone.x86 import X86_OP_MEM, X86_REG_RIP

    md = Cs(CS_ARCH_X86, CS_MODE_64)
    md.detail = True
    stubs = {}
    for sec in sections:
        if not sec.executable or not sec.name.startswith(".plt"):
            continue
        for start in range(0, sec.size, 16):
            addr = sec.virtual_address + start
            for insn in md.disasm(sec.data[start:start + 16], addr):
                if insn.mnemonic != "jmp" and not insn.mnemonic.endswith(" jmp"):
                    continue
                for op in insn.operands:
                    if op.type == X86_OP_MEM and op.mem.base == X86_REG_RIP:
                        slot = insn.address + insn.size + op.mem.disp
                        if slot in got_names:
                            stubs[addr] = got_names[slot][0]
                break
    return stubs


def open_image(path) -> BinaryImage:
    """Load sections and dynamic-linking metadata of an ELF64 object."""
    raw, elf = _open(path)
    sections = _sections(raw, elf)
    relocs = _relocated_symbols(elf)
    imports = _plt_stubs(sections, relocs)
    data_symbols = {addr: name for addr, (name, _) in relocs.items()}

    image = BinaryImage(path=str(path), entry=elf.header.e_entry, sections=sections,
                        imports=imports, data_symbols=data_symbols, relocations=relocs)
    for sec in sections:
        if sec.name in (".init_array", ".fini_array"):
            for off in range(0, sec.size - 7, 8):
                ptr = int.from_bytes(sec.data[off:off + 8], "little")
                if ptr:
                    image.init_functions.append(ptr)
    return image


def _value_windows(buf, width):
    n = len(buf) - width + 1
    if n <= 0:
        return np.zeros(0, dtype=np.uint64)
    arr = np.frombuffer(buf, dtype=np.uint8).astype(np.uint64)
    out = np.zeros(n, dtype=np.uint64)
    for k in range(width):
        out |= arr[k:k + n] << np.uint64(8 * k)
    return out


def scan_immediates(sections) -> list[ImmediateHit]:
    """Report every 8- or 4-byte little-endian window in executable sections
    whose value lands inside a read-only, non-executable section.

    Windows start at every byte offset. A 4-byte window whose zero-extended
    value equals the 8-byte window at the same offset is one occurrence.
    """
    targets = sorted((s for s in sections if s.read_only and not s.executable),
                     key=lambda s: s.virtual_address)
    if not targets:
        return []
    starts = np.array([s.virtual_address for s in targets], dtype=np.uint64)
    ends = np.array([s.end for s in targets], dtype=np.uint64)

    hits = set()
    for sec in sections:
        if not sec.executable:
            continue
        for width in (8, 4):
            values = _value_windows(sec.data, width)
            if not len(values):
                continue
            idx = np.searchsorted(starts, values, side="right").astype(np.int64) - 1
            valid = idx >= 0
            inside = np.zeros(len(values), dtype=bool)
            inside[valid] = values[valid] < ends[idx[valid]]
            for off in np.nonzero(inside)[0]:
                value = int(values[off])
                hits.add(ImmediateHit(sec.virtual_address + int(off), value, targets[idx[off]].name))
    return sorted(hits)


def format_sections(sections) -> str:
    lines = [f"{s.name}\t{s.virtual_address:#x}\t{s.size:#x}\t{s.flag_string()}" for s in sections]
    return "\n".join(lines) + ("\n" if lines else "")
