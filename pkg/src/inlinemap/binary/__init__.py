"""Binary side of the pipeline: line table, function boundaries, call graph."""

import dataclasses
from dataclasses import dataclass

from elftools.elf.elffile import ELFFile

from .calls import CallGraph, extract_call_graph, scan_calls
from .functions import (
    BinaryFunction,
    FunctionLookup,
    address_to_function,
    base_name,
    parse_function_boundaries,
    read_functions,
)
from .lines import LineMapping, parse_line_table

__all__ = [
    "BinaryFunction", "BinaryImage", "CallGraph", "FunctionLookup", "LineMapping",
    "address_to_function", "base_name", "extract_call_graph", "load_binary",
    "parse_function_boundaries", "parse_line_table", "read_functions", "scan_calls",
]


@dataclass(frozen=True)
class BinaryImage:
    path: str
    functions: tuple
    lines: LineMapping
    graph: CallGraph

    def by_ident(self):
        return {f.ident: f for f in self.functions}


def load_binary(binary_path):
    """Parse everything the mapping engine and strategies need from one binary.

    Function records come back with decoded instruction counts and their
    call-graph successors filled in.
    """
    binary_path = str(binary_path)
    # symbols first: a fully stripped file is reported as stripped, not as lacking debug info
    functions = parse_function_boundaries(binary_path)
    lines = parse_line_table(binary_path)
    with open(binary_path, "rb") as fh:
        scan = scan_calls(ELFFile(fh), functions)
    graph = scan.graph
    functions = tuple(
        dataclasses.replace(
            f,
            instruction_count=scan.instruction_counts.get(f.ident, f.instruction_count),
            callees=frozenset(graph.callees(f.ident)),
        )
        for f in functions
    )
    return BinaryImage(binary_path, functions, lines, graph)
