"""Direct-call scanning of x86-64 function bodies."""

from dataclasses import dataclass

import capstone
from elftools.elf.elffile import ELFFile

from ..errors import UnsupportedArchitecture
from .functions import _rip_target, got_slot_symbols


class CallGraph:
    """Directed caller -> callee graph over binary-function identifiers.

    ``library`` holds the nodes that resolve through dynamic linkage; the
    ``ud_*`` accessors restrict degrees to user-defined functions and ignore
    self loops.
    """

    def __init__(self, nodes, edges, unresolved_call_count=0, library=(), direct_call_sites=0):
        self.nodes = frozenset(nodes)
        self.edges = frozenset(edges)
        self.unresolved_call_count = unresolved_call_count
        self.direct_call_sites = direct_call_sites
        self.library = frozenset(library) & self.nodes
        succ = {n: set() for n in self.nodes}
        pred = {n: set() for n in self.nodes}
        for a, b in self.edges:
            if a not in succ or b not in succ:
                raise ValueError(f"edge ({a!r}, {b!r}) has an endpoint outside the node set")
            succ[a].add(b)
            pred[b].add(a)
        self._succ = {n: tuple(sorted(s)) for n, s in succ.items()}
        self._pred = {n: tuple(sorted(s)) for n, s in pred.items()}

    def __contains__(self, node):
        return node in self.nodes

    def __eq__(self, other):
        return (isinstance(other, CallGraph) and self.nodes == other.nodes
                and self.edges == other.edges and self.library == other.library
                and self.unresolved_call_count == other.unresolved_call_count)

    def __repr__(self):
        return f"CallGraph({len(self.nodes)} nodes, {len(self.edges)} edges)"

    def callees(self, f):
        return self._succ[f]

    def callers(self, f):
        return self._pred[f]

    def outdegree(self, f):
        return len(self._succ[f])

    def indegree(self, f):
        return len(self._pred[f])

    def is_library(self, f):
        return f in self.library

    def ud_callees(self, f):
        return tuple(c for c in self._succ[f] if c not in self.library and c != f)

    def ud_callers(self, f):
        return tuple(c for c in self._pred[f] if c not in self.library and c != f)

    def library_callees(self, f):
        return tuple(c for c in self._succ[f] if c in self.library)

    def sorted_edges(self):
        return sorted(self.edges)


@dataclass(frozen=True)
class ScanResult:
    graph: CallGraph
    instruction_counts: dict


def _function_bytes(elf, func):
    for sec in elf.iter_sections():
        lo = sec["sh_addr"]
        if sec["sh_type"] == "SHT_PROGBITS" and lo <= func.entry and func.end <= lo + sec["sh_size"]:
            data = sec.data()
            return data[func.entry - lo:func.end - lo]
    return b""


def scan_calls(elf, functions):
    if elf["e_machine"] != "EM_X86_64":
        raise UnsupportedArchitecture(f"only x86-64 is supported, got {elf['e_machine']}")
    md = capstone.Cs(capstone.CS_ARCH_X86, capstone.CS_MODE_64)
    by_entry = {f.entry: f.ident for f in functions if f.size > 0}
    by_name = {f.name: f.ident for f in functions if f.is_library}
    slots = got_slot_symbols(elf)
    library = {f.ident for f in functions if f.is_library}

    edges = set()
    unresolved = 0
    direct_sites = 0
    counts = {}
    for func in functions:
        if func.is_library or func.size == 0:
            counts[func.ident] = func.instruction_count
            continue
        code = _function_bytes(elf, func)
        n = 0
        offset = 0
        while offset < len(code):
            last_end = offset
            for addr, size, mnem, op_str in md.disasm_lite(code[offset:], func.entry + offset):
                n += 1
                last_end = addr + size - func.entry
                if not mnem.endswith("call"):
                    continue
                if op_str.startswith("0x") or op_str.isdigit():
                    direct_sites += 1
                    target = by_entry.get(int(op_str, 0))
                    if target is not None:
                        edges.add((func.ident, target))
                    continue
                slot = _rip_target(addr, size, op_str)
                name = slots.get(slot) if slot is not None else None
                if name is not None and name in by_name:
                    edges.add((func.ident, by_name[name]))
                else:
                    unresolved += 1
            # capstone stops at undecodable bytes; resynchronise one byte later
            offset = last_end if last_end > offset else offset + 1
        counts[func.ident] = n
    graph = CallGraph((f.ident for f in functions), edges, unresolved, library, direct_sites)
    return ScanResult(graph, counts)


def extract_call_graph(binary_path, functions):
    """Call graph from direct ``call rel32`` sites whose target is a known entry.

    Calls through a relocated GOT slot (``-fno-plt``) resolve to the imported
    symbol; every other indirect call only bumps ``unresolved_call_count``.
    """
    with open(binary_path, "rb") as fh:
        return scan_calls(ELFFile(fh), functions).graph
