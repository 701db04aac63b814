"""Ground truth from Itanium type-info records."""

from __future__ import annotations

from .errors import NoRttiFound

CLASS_TI = "_ZTVN10__cxxabiv117__class_type_infoE"
SI_CLASS_TI = "_ZTVN10__cxxabiv120__si_class_type_infoE"
VMI_CLASS_TI = "_ZTVN10__cxxabiv121__vmi_class_type_infoE"
TI_KINDS = {CLASS_TI: "class", SI_CLASS_TI: "si", VMI_CLASS_TI: "vmi"}

VIRTUAL_MASK = 0x1


def _typeinfo_vptrs(image):
    """Values a type-info record's first word holds, per record kind."""
    out = {}
    for addr, (name, addend) in image.relocations.items():
        kind = TI_KINDS.get(name.split("@", 1)[0])
        if kind is not None:
            out[addr + 16] = kind  # copy-relocated vtable object, vptr skips the header
    return out


def _aligned_words(image):
    for sec in image.sections:
        if sec.executable:
            continue
        base = sec.virtual_address
        start = (-base) % 8
        data = sec.data
        for off in range(start, sec.size - 7, 8):
            yield base + off, int.from_bytes(data[off:off + 8], "little")


def find_typeinfos(image):
    """Map type-info address -> record kind."""
    vptrs = _typeinfo_vptrs(image)
    found = {}
    for addr, word in _aligned_words(image):
        if word in vptrs:
            found[addr] = vptrs[word]
    for addr, (name, addend) in image.relocations.items():
        kind = TI_KINDS.get(name.split("@", 1)[0])
        if kind is not None and addend == 16:
            found[addr] = kind
    return found


def _vtable_of(image, typeinfos):
    """Primary VTable address for each type-info, keyed by type-info."""
    out = {}
    for addr, word in _aligned_words(image):
        if word in typeinfos and image.read_i64(addr - 8) == 0 and image.is_read_only(addr):
            out.setdefault(word, addr + 8)
    return out


def parse_rtti(image):
    """Decode type-info records into a :class:`GroundTruth`.

    A class is identified by the primary VTable that points at its type-info
    when one exists, otherwise by its mangled type name.
    """
    from .evaluation import GroundTruth

    typeinfos = find_typeinfos(image)
    if not typeinfos:
        raise NoRttiFound("no type-info records found")
    vtables = _vtable_of(image, typeinfos)

    names = {}
    ident = {}
    for ti in typeinfos:
        name_ptr = image.read_u64(ti + 8)
        name = image.read_cstring(name_ptr) if name_ptr else None
        names[ti] = name or f"ti_{ti:#x}"
        ident[ti] = vtables.get(ti, names[ti])

    classes = set(ident.values())
    edges = set()
    for ti, kind in sorted(typeinfos.items()):
        derived = ident[ti]
        if kind == "si":
            base_ti = image.read_u64(ti + 16)
            if base_ti in ident:
                edges.add((derived, ident[base_ti], "primary"))
        elif kind == "vmi":
            count = image.read_u32(ti + 20) or 0
            for i in range(count):
                rec = ti + 24 + 16 * i
                base_ti = image.read_u64(rec)
                flags = image.read_i64(rec + 8)
                if base_ti not in ident or flags is None or flags & VIRTUAL_MASK:
                    continue
                offset = flags >> 8
                edges.add((derived, ident[base_ti], "primary" if offset == 0 else "secondary"))
    name_to_vt = {names[ti]: vtables[ti] for ti in typeinfos if ti in vtables}
    return GroundTruth(classes=classes, edges=edges, name_to_vt=name_to_vt)
