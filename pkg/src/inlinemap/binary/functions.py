"""Function boundaries from the ELF symbol table, plus dynamic-linkage stubs."""

import bisect
import re
from dataclasses import dataclass, field

import capstone
from elftools.common.exceptions import ELFError
from elftools.elf.constants import SH_FLAGS
from elftools.elf.elffile import ELFFile
from elftools.elf.relocation import RelocationSection

from ..errors import StrippedBinary

# GCC/Clang clone suffixes; everything from the first one on is dropped.
_CLONE_SUFFIX = re.compile(r"\.(?:isra|part|constprop|cold|lto_priv|localalias|clone|llvm)(?:\.|$)")

PLT_SECTIONS = (".plt", ".plt.sec", ".plt.got")
AVG_INSN_BYTES = 4


def base_name(symbol):
    """``foo.constprop.0.isra.0`` -> ``foo``; ``foo.cold`` -> ``foo``."""
    m = _CLONE_SUFFIX.search(symbol)
    return symbol[:m.start()] if m else symbol


@dataclass(frozen=True)
class BinaryFunction:
    ident: str
    name: str
    entry: int
    size: int
    instruction_count: int = 0
    is_library: bool = False
    callees: frozenset = field(default=frozenset())
    aliases: tuple = ()

    @property
    def base_name(self):
        return base_name(self.name)

    @property
    def end(self):
        return self.entry + self.size

    def contains(self, address):
        return self.entry <= address < self.entry + self.size


class FunctionLookup:
    """Half-open interval lookup over pairwise-disjoint function ranges."""

    def __init__(self, functions):
        spans = sorted((f for f in functions if f.size > 0), key=lambda f: f.entry)
        self._starts = [f.entry for f in spans]
        self._spans = spans

    def find(self, address):
        i = bisect.bisect_right(self._starts, address) - 1
        if i >= 0 and self._spans[i].contains(address):
            return self._spans[i]
        return None


def address_to_function(functions, address):
    """Identifier of the function whose ``[entry, entry+size)`` holds ``address``."""
    lookup = functions if isinstance(functions, FunctionLookup) else FunctionLookup(functions)
    f = lookup.find(address)
    return f.ident if f is not None else None


def _exec_sections(elf):
    out = {}
    for i, sec in enumerate(elf.iter_sections()):
        if sec["sh_flags"] & SH_FLAGS.SHF_EXECINSTR:
            out[i] = sec
    return out


def got_slot_symbols(elf):
    """GOT slot address -> imported symbol name for JUMP_SLOT/GLOB_DAT relocations."""
    slots = {}
    for sec in elf.iter_sections():
        if not isinstance(sec, RelocationSection) or sec["sh_link"] == 0:
            continue
        symtab = elf.get_section(sec["sh_link"])
        if symtab is None or symtab["sh_type"] not in ("SHT_DYNSYM", "SHT_SYMTAB"):
            continue
        for rel in sec.iter_relocations():
            sym_index = rel["r_info_sym"]
            if sym_index == 0:
                continue
            sym = symtab.get_symbol(sym_index)
            if sym.name and sym["st_info"]["type"] in ("STT_FUNC", "STT_GNU_IFUNC", "STT_NOTYPE"):
                slots[rel["r_offset"]] = sym.name
    return slots


def _rip_target(address, size, op_str):
    m = re.search(r"\[rip ([+-]) (0x[0-9a-f]+|\d+)\]", op_str)
    if not m:
        return None
    disp = int(m.group(2), 0)
    return address + size + (disp if m.group(1) == "+" else -disp)


def _plt_stubs(elf):
    """``(name, entry, size)`` for every stub jumping through a relocated GOT slot."""
    if elf["e_machine"] != "EM_X86_64":
        return []
    slots = got_slot_symbols(elf)
    md = capstone.Cs(capstone.CS_ARCH_X86, capstone.CS_MODE_64)
    stubs = {}
    for name in PLT_SECTIONS:
        sec = elf.get_section_by_name(name)
        if sec is None or sec["sh_size"] == 0:
            continue
        start = sec["sh_addr"]
        entsize = sec["sh_entsize"] or 16
        for addr, size, mnem, op_str in md.disasm_lite(sec.data(), start):
            if not mnem.endswith("jmp"):
                continue
            slot = _rip_target(addr, size, op_str)
            if slot is None or slot not in slots:
                continue
            stub = start + ((addr - start) // entsize) * entsize
            stubs.setdefault(stub, (slots[slot], stub, entsize))
    return sorted(stubs.values(), key=lambda s: s[1])


def _pick_name(candidates):
    # candidates: (name, bind); prefer plain names, then global, weak, local
    rank = {"STB_GLOBAL": 0, "STB_WEAK": 1, "STB_LOCAL": 2}
    return sorted(
        candidates,
        key=lambda c: (base_name(c[0]) != c[0], rank.get(c[1], 3), len(c[0]), c[0]),
    )[0][0]


def read_functions(elf):
    exec_secs = _exec_sections(elf)
    symtab = elf.get_section_by_name(".symtab") or elf.get_section_by_name(".dynsym")
    by_entry = {}
    if symtab is not None:
        for sym in symtab.iter_symbols():
            if sym["st_info"]["type"] not in ("STT_FUNC", "STT_GNU_IFUNC"):
                continue
            shndx = sym["st_shndx"]
            if not isinstance(shndx, int) or shndx not in exec_secs or not sym.name:
                continue
            sec = exec_secs[shndx]
            entry = sym["st_value"]
            if elf["e_type"] == "ET_REL":
                entry += sec["sh_addr"]
            slot = by_entry.setdefault(entry, {"names": [], "size": 0, "shndx": shndx})
            slot["names"].append((sym.name, sym["st_info"]["bind"]))
            slot["size"] = max(slot["size"], sym["st_size"])
    if not by_entry:
        raise StrippedBinary("no function-typed symbols")

    per_section = {}
    for entry in sorted(by_entry):
        per_section.setdefault(by_entry[entry]["shndx"], []).append(entry)
    next_entry = {}
    for shndx, starts in per_section.items():
        sec = exec_secs[shndx]
        sec_end = sec["sh_addr"] + sec["sh_size"]
        for a, b in zip(starts, starts[1:] + [sec_end]):
            next_entry[a] = min(b, sec_end) if b >= a else a

    raw = []
    for entry in sorted(by_entry):
        slot = by_entry[entry]
        nxt = next_entry[entry]
        size = slot["size"] or max(0, nxt - entry)
        size = min(size, max(0, nxt - entry))
        names = sorted({n for n, _ in slot["names"]})
        name = _pick_name(slot["names"])
        raw.append((name, entry, size, False, tuple(n for n in names if n != name)))

    defined_names = {r[0] for r in raw}
    stubs = _plt_stubs(elf)
    stub_names = set()
    for sname, entry, size in stubs:
        if entry in by_entry or sname in stub_names:
            continue
        stub_names.add(sname)
        raw.append((sname, entry, size, True, ()))

    dynsym = elf.get_section_by_name(".dynsym")
    if dynsym is not None:
        for sym in dynsym.iter_symbols():
            if (sym["st_info"]["type"] in ("STT_FUNC", "STT_GNU_IFUNC")
                    and sym["st_shndx"] == "SHN_UNDEF" and sym.name
                    and sym.name not in stub_names and sym.name not in defined_names):
                stub_names.add(sym.name)
                raw.append((sym.name, 0, 0, True, ()))

    counts = {}
    for r in raw:
        counts[r[0]] = counts.get(r[0], 0) + 1
    out = []
    for name, entry, size, lib, aliases in sorted(raw, key=lambda r: (r[1], r[0])):
        ident = name if counts[name] == 1 else f"{name}@{entry:#x}"
        out.append(BinaryFunction(
            ident=ident, name=name, entry=entry, size=size,
            instruction_count=-(-size // AVG_INSN_BYTES) if size else 0,
            is_library=lib, aliases=aliases,
        ))
    return out


def parse_function_boundaries(binary_path):
    """One record per defined function symbol, plus library stubs and imports.

    Instruction counts here are estimates (size / average x86-64 instruction
    length); :func:`inlinemap.binary.load_binary` replaces them with decoded counts.
    """
    with open(binary_path, "rb") as fh:
        try:
            elf = ELFFile(fh)
        except ELFError as exc:
            raise StrippedBinary(f"{binary_path}: not an ELF file ({exc})") from exc
        try:
            return read_functions(elf)
        except StrippedBinary as exc:
            raise StrippedBinary(f"{binary_path}: {exc}") from None
