"""Decoder for the DWARF ``.debug_line`` line-number program, versions 2 to 5.

The decoder works on raw section bytes so it can be exercised without an ELF
container; :func:`parse_line_table` wires it to an ELF file.
"""

import posixpath
import struct
from typing import NamedTuple

from elftools.common.exceptions import ELFError
from elftools.elf.elffile import ELFFile
from elftools.elf.constants import SH_FLAGS

from ..errors import MalformedDebugInfo, MissingDebugInfo

DW_LNS_copy = 1
DW_LNS_advance_pc = 2
DW_LNS_advance_line = 3
DW_LNS_set_file = 4
DW_LNS_set_column = 5
DW_LNS_negate_stmt = 6
DW_LNS_set_basic_block = 7
DW_LNS_const_add_pc = 8
DW_LNS_fixed_advance_pc = 9
DW_LNS_set_prologue_end = 10
DW_LNS_set_epilogue_begin = 11
DW_LNS_set_isa = 12

DW_LNE_end_sequence = 1
DW_LNE_set_address = 2
DW_LNE_define_file = 3
DW_LNE_set_discriminator = 4

DW_LNCT_path = 1
DW_LNCT_directory_index = 2

DW_FORM_block2 = 0x03
DW_FORM_block4 = 0x04
DW_FORM_data2 = 0x05
DW_FORM_data4 = 0x06
DW_FORM_data8 = 0x07
DW_FORM_string = 0x08
DW_FORM_block = 0x09
DW_FORM_block1 = 0x0A
DW_FORM_data1 = 0x0B
DW_FORM_sdata = 0x0D
DW_FORM_strp = 0x0E
DW_FORM_udata = 0x0F
DW_FORM_data16 = 0x1E
DW_FORM_line_strp = 0x1F


class LineState(NamedTuple):
    address: int
    file: str
    line: int
    column: int
    is_stmt: bool
    end_sequence: bool


class LineProgramHeader(NamedTuple):
    offset: int
    version: int
    offset_size: int
    address_size: int
    min_inst_length: int
    max_ops_per_inst: int
    default_is_stmt: bool
    line_base: int
    line_range: int
    opcode_base: int
    standard_opcode_lengths: tuple
    include_directories: tuple
    file_names: tuple  # (name, dir_index)
    program_start: int
    unit_end: int


class _Reader:
    def __init__(self, data, pos=0, little_endian=True):
        self.data = data
        self.pos = pos
        self.e = "<" if little_endian else ">"

    def _need(self, n):
        if self.pos + n > len(self.data):
            raise MalformedDebugInfo(f"line program truncated at offset {self.pos:#x}")

    def u(self, size):
        self._need(size)
        if size == 1:
            v = self.data[self.pos]
        else:
            code = {2: "H", 4: "I", 8: "Q"}[size]
            (v,) = struct.unpack_from(self.e + code, self.data, self.pos)
        self.pos += size
        return v

    def s8(self):
        v = self.u(1)
        return v - 256 if v >= 128 else v

    def uleb(self):
        result = shift = 0
        while True:
            self._need(1)
            b = self.data[self.pos]
            self.pos += 1
            result |= (b & 0x7F) << shift
            shift += 7
            if b < 0x80:
                return result

    def sleb(self):
        result = shift = 0
        while True:
            self._need(1)
            b = self.data[self.pos]
            self.pos += 1
            result |= (b & 0x7F) << shift
            shift += 7
            if b < 0x80:
                if b & 0x40:
                    result -= 1 << shift
                return result

    def cstr(self):
        end = self.data.find(b"\x00", self.pos)
        if end < 0:
            raise MalformedDebugInfo("unterminated string in line program header")
        s = bytes(self.data[self.pos:end]).decode("utf-8", "replace")
        self.pos = end + 1
        return s

    def skip(self, n):
        self._need(n)
        self.pos += n


def _string_at(section, offset):
    if section is None or offset >= len(section):
        raise MalformedDebugInfo(f"string offset {offset:#x} outside string section")
    end = section.find(b"\x00", offset)
    if end < 0:
        end = len(section)
    return bytes(section[offset:end]).decode("utf-8", "replace")


def _read_form(r, form, offset_size, line_str, debug_str):
    if form == DW_FORM_string:
        return r.cstr()
    if form == DW_FORM_line_strp:
        return _string_at(line_str, r.u(offset_size))
    if form == DW_FORM_strp:
        return _string_at(debug_str, r.u(offset_size))
    if form == DW_FORM_udata:
        return r.uleb()
    if form == DW_FORM_sdata:
        return r.sleb()
    if form in (DW_FORM_data1, DW_FORM_data2, DW_FORM_data4, DW_FORM_data8):
        return r.u({DW_FORM_data1: 1, DW_FORM_data2: 2, DW_FORM_data4: 4, DW_FORM_data8: 8}[form])
    if form == DW_FORM_data16:
        r.skip(16)
        return None
    if form == DW_FORM_block:
        r.skip(r.uleb())
        return None
    if form in (DW_FORM_block1, DW_FORM_block2, DW_FORM_block4):
        r.skip(r.u({DW_FORM_block1: 1, DW_FORM_block2: 2, DW_FORM_block4: 4}[form]))
        return None
    raise MalformedDebugInfo(f"unsupported form {form:#x} in line program header")


def _read_entry_table(r, offset_size, line_str, debug_str):
    fmt_count = r.u(1)
    formats = [(r.uleb(), r.uleb()) for _ in range(fmt_count)]
    entries = []
    for _ in range(r.uleb()):
        path, dir_index = None, 0
        for content, form in formats:
            value = _read_form(r, form, offset_size, line_str, debug_str)
            if content == DW_LNCT_path:
                path = value
            elif content == DW_LNCT_directory_index:
                dir_index = value
        entries.append((path or "", dir_index))
    return entries


def read_header(data, offset, *, address_size=8, line_str=None, debug_str=None,
                little_endian=True):
    r = _Reader(data, offset, little_endian)
    unit_length = r.u(4)
    offset_size = 4
    if unit_length == 0xFFFFFFFF:
        unit_length = r.u(8)
        offset_size = 8
    elif unit_length >= 0xFFFFFFF0:
        raise MalformedDebugInfo(f"reserved unit length {unit_length:#x}")
    unit_end = r.pos + unit_length
    if unit_end > len(data):
        raise MalformedDebugInfo(f"line program at {offset:#x} overruns section")
    version = r.u(2)
    if not 2 <= version <= 5:
        raise MalformedDebugInfo(f"unsupported line table version {version}")
    if version >= 5:
        address_size = r.u(1)
        r.u(1)  # segment selector size
    header_length = r.u(offset_size)
    program_start = r.pos + header_length
    min_inst_length = r.u(1)
    max_ops = r.u(1) if version >= 4 else 1
    default_is_stmt = bool(r.u(1))
    line_base = r.s8()
    line_range = r.u(1)
    opcode_base = r.u(1)
    if line_range == 0:
        raise MalformedDebugInfo("line_range of zero")
    std_lengths = tuple(r.u(1) for _ in range(opcode_base - 1))

    if version >= 5:
        dirs = [p for p, _ in _read_entry_table(r, offset_size, line_str, debug_str)]
        files = _read_entry_table(r, offset_size, line_str, debug_str)
    else:
        dirs = []
        while True:
            d = r.cstr()
            if not d:
                break
            dirs.append(d)
        files = []
        while True:
            name = r.cstr()
            if not name:
                break
            dir_index = r.uleb()
            r.uleb()
            r.uleb()
            files.append((name, dir_index))

    return LineProgramHeader(
        offset, version, offset_size, address_size, min_inst_length, max_ops,
        default_is_stmt, line_base, line_range, opcode_base, std_lengths,
        tuple(dirs), tuple(files), program_start, unit_end,
    )


def _file_resolver(header, comp_dir):
    """Return ``(index) -> path``; v5 tables are 0-based, older ones 1-based with
    directory 0 meaning the compilation directory."""
    v5 = header.version >= 5
    dirs = list(header.include_directories)
    files = list(header.file_names)
    cache = {}

    def directory(i):
        if v5:
            d = dirs[i] if i < len(dirs) else ""
            if i != 0 and not posixpath.isabs(d) and dirs:
                d = posixpath.join(dirs[0], d)
        elif i == 0:
            d = comp_dir or ""
        else:
            d = dirs[i - 1] if i - 1 < len(dirs) else ""
            if comp_dir and not posixpath.isabs(d):
                d = posixpath.join(comp_dir, d)
        return d

    def resolve(index):
        if index in cache:
            return cache[index]
        i = index if v5 else index - 1
        if not 0 <= i < len(files):
            raise MalformedDebugInfo(f"file index {index} out of range in line program at {header.offset:#x}")
        name, dir_index = files[i]
        path = name if posixpath.isabs(name) else posixpath.join(directory(dir_index), name)
        if v5 and not posixpath.isabs(path) and comp_dir:
            path = posixpath.join(comp_dir, path)
        path = posixpath.normpath(path) if path else path
        cache[index] = path
        return path

    return resolve, files


def decode_program(data, offset, *, comp_dir=None, address_size=8, line_str=None,
                   debug_str=None, little_endian=True):
    """Run one line-number program and return ``(header, states)``.

    ``states`` includes end-of-sequence rows so callers can see sequence
    boundaries; :func:`parse_line_table` drops them.
    """
    h = read_header(data, offset, address_size=address_size, line_str=line_str,
                    debug_str=debug_str, little_endian=little_endian)
    resolve, files = _file_resolver(h, comp_dir)
    r = _Reader(data, h.program_start, little_endian)
    out = []

    def reset():
        return {"address": 0, "file": 1, "line": 1, "column": 0, "is_stmt": h.default_is_stmt}

    st = reset()

    def emit(end=False):
        out.append(LineState(st["address"], resolve(st["file"]), st["line"], st["column"],
                             st["is_stmt"], end))

    while r.pos < h.unit_end:
        op = r.u(1)
        if op >= h.opcode_base:
            adj = op - h.opcode_base
            st["address"] += (adj // h.line_range) * h.min_inst_length
            st["line"] += h.line_base + adj % h.line_range
            emit()
        elif op == 0:
            length = r.uleb()
            if length == 0:
                continue
            end = r.pos + length
            sub = r.u(1)
            if sub == DW_LNE_end_sequence:
                emit(end=True)
                st = reset()
            elif sub == DW_LNE_set_address:
                st["address"] = r.u(length - 1)
            elif sub == DW_LNE_define_file:
                name = r.cstr()
                dir_index = r.uleb()
                files.append((name, dir_index))
            r.pos = end
        elif op == DW_LNS_copy:
            emit()
        elif op == DW_LNS_advance_pc:
            st["address"] += r.uleb() * h.min_inst_length
        elif op == DW_LNS_advance_line:
            st["line"] += r.sleb()
        elif op == DW_LNS_set_file:
            st["file"] = r.uleb()
        elif op == DW_LNS_set_column:
            st["column"] = r.uleb()
        elif op == DW_LNS_negate_stmt:
            st["is_stmt"] = not st["is_stmt"]
        elif op == DW_LNS_const_add_pc:
            st["address"] += ((255 - h.opcode_base) // h.line_range) * h.min_inst_length
        elif op == DW_LNS_fixed_advance_pc:
            st["address"] += r.u(2)
        elif op in (DW_LNS_set_basic_block, DW_LNS_set_prologue_end, DW_LNS_set_epilogue_begin):
            pass
        elif op == DW_LNS_set_isa:
            r.uleb()
        else:
            for _ in range(h.standard_opcode_lengths[op - 1]):
                r.uleb()
    if r.pos != h.unit_end:
        raise MalformedDebugInfo(f"line program at {offset:#x} ran past its unit")
    return h, out


class LineMapping:
    """Address-sorted, deduplicated ``(address, file, line)`` rows.

    Rows at the same address keep their line-program order; the mapping engine
    relies on that to pick the first row at a function's entry.
    """

    __slots__ = ("rows",)

    def __init__(self, rows=()):
        seen = set()
        unique = []
        for row in rows:
            row = (int(row[0]), str(row[1]), int(row[2]))
            if row not in seen:
                seen.add(row)
                unique.append(row)
        unique.sort(key=lambda r: r[0])
        self.rows = tuple(unique)

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def __eq__(self, other):
        return isinstance(other, LineMapping) and self.rows == other.rows

    def __repr__(self):
        return f"LineMapping({len(self.rows)} rows)"

    def files(self):
        return sorted({f for _, f, _ in self.rows})


def executable_ranges(elf):
    ranges = []
    for sec in elf.iter_sections():
        if sec["sh_flags"] & SH_FLAGS.SHF_EXECINSTR and sec["sh_size"]:
            ranges.append((sec["sh_addr"], sec["sh_addr"] + sec["sh_size"]))
    return sorted(ranges)


def _in_ranges(address, ranges):
    return any(lo <= address < hi for lo, hi in ranges)


def _cu_comp_dirs(elf):
    """Map line-program offsets to compilation directories via the CU DIEs."""
    comp_dirs = {}
    try:
        dwarf = elf.get_dwarf_info(relocate_dwarf_sections=False)
        for cu in dwarf.iter_CUs():
            top = cu.get_top_DIE()
            stmt = top.attributes.get("DW_AT_stmt_list")
            if stmt is None:
                continue
            cd = top.attributes.get("DW_AT_comp_dir")
            value = cd.value if cd is not None else b""
            if isinstance(value, bytes):
                value = value.decode("utf-8", "replace")
            comp_dirs[stmt.value] = value
    except Exception:
        return None
    return comp_dirs


def _section_data(elf, name):
    sec = elf.get_section_by_name(name)
    if sec is None:
        return None
    return sec.data()


def parse_line_table(binary_path):
    """Decode the full address -> (file, line) relation of an ELF binary.

    Rows outside executable sections (for example sequences left at address 0
    by discarded COMDAT groups) and line-0 rows are dropped.
    """
    with open(binary_path, "rb") as fh:
        try:
            elf = ELFFile(fh)
        except ELFError as exc:
            raise MissingDebugInfo(f"{binary_path}: not an ELF file ({exc})") from exc
        debug_line = _section_data(elf, ".debug_line")
        if debug_line is None:
            raise MissingDebugInfo(f"{binary_path}: no .debug_line section")
        line_str = _section_data(elf, ".debug_line_str")
        debug_str = _section_data(elf, ".debug_str")
        little = elf.little_endian
        address_size = elf.elfclass // 8
        ranges = executable_ranges(elf)
        comp_dirs = _cu_comp_dirs(elf)

        if comp_dirs:
            offsets = sorted(comp_dirs)
        else:
            offsets, pos = [], 0
            while pos < len(debug_line):
                offsets.append(pos)
                h = read_header(debug_line, pos, address_size=address_size,
                                line_str=line_str, debug_str=debug_str, little_endian=little)
                pos = h.unit_end
            comp_dirs = {}

        rows = []
        for off in offsets:
            try:
                _, states = decode_program(
                    debug_line, off, comp_dir=comp_dirs.get(off), address_size=address_size,
                    line_str=line_str, debug_str=debug_str, little_endian=little)
            except (IndexError, KeyError, struct.error) as exc:
                raise MalformedDebugInfo(f"{binary_path}: line program at {off:#x}: {exc}") from exc
            for s in states:
                if s.end_sequence or s.line <= 0 or not _in_ranges(s.address, ranges):
                    continue
                rows.append((s.address, s.file, s.line))
    return LineMapping(rows)
