"""Function-level binary-to-source mapping.

Every line-table row is resolved twice, address -> binary function and
(file, line) -> source function, and the source function is appended to the
binary function's list the first time it shows up.  A binary function with
one source function is an NBF, with several a BFI.
"""

import json
from collections import deque
from dataclasses import asdict, dataclass, replace
from fractions import Fraction

from .binary.functions import FunctionLookup, base_name
from .errors import DegenerateOSF, SchemaMismatch

SCHEMA_VERSION = 1

NBF, BFI, UNRESOLVED = "NBF", "BFI", "UNRESOLVED"


@dataclass(frozen=True)
class MappingEntry:
    binary_function: str
    name: str
    entry: int
    size: int
    instruction_count: int
    is_library: bool
    callees: tuple
    source_functions: tuple
    osf: str = None
    osf_method: str = None   # "address", "name" or None when no rule applied
    classification: str = UNRESOLVED
    depth: int = 0

    @property
    def isfs(self):
        return frozenset(self.source_functions) - {self.osf}

    @property
    def base_name(self):
        return base_name(self.name)

    @property
    def flagged(self):
        return self.classification != UNRESOLVED and self.osf_method != "address"


def classify(source_functions):
    n = len(source_functions)
    return UNRESOLVED if n == 0 else NBF if n == 1 else BFI


def _sf_name(key):
    return key.split("::", 1)[1] if "::" in key else key


def _osf_by_name(entry):
    hits = [sf for sf in entry.source_functions if _sf_name(sf) == entry.base_name]
    return hits[0] if hits else None


def designate_osf(entry, functions, index, lines, *, lookup=None, resolve=None):
    """Set ``osf``: the source function at the lowest mapped address of the
    binary function, else the source function sharing its base name."""
    if entry.classification == UNRESOLVED:
        return entry
    lookup = lookup or FunctionLookup(functions)
    resolve = resolve or index.resolve_file
    first = None
    for addr, file, line in lines:
        if not entry.entry <= addr < entry.entry + entry.size:
            continue
        rel = resolve(file)
        sf = index.by_location(rel, line) if rel is not None else None
        if sf is not None:
            first = sf.key
            break
    return _with_osf(entry, first)


def _with_osf(entry, first_sf):
    if entry.classification == UNRESOLVED:
        return replace(entry, osf=None, osf_method=None)
    if first_sf is not None and first_sf in entry.source_functions:
        return replace(entry, osf=first_sf, osf_method="address")
    by_name = _osf_by_name(entry)
    if by_name is not None:
        return replace(entry, osf=by_name, osf_method="name")
    return replace(entry, osf=None, osf_method=None)


def source_depths(entry, index):
    """Per-ISF shortest-path depth from the OSF inside the entry's SF set."""
    allowed = set(entry.source_functions)
    dist = {entry.osf: 0}
    queue = deque([entry.osf])
    while queue:
        cur = queue.popleft()
        for nxt in sorted(index.successors(cur)):
            if nxt in allowed and nxt not in dist:
                dist[nxt] = dist[cur] + 1
                queue.append(nxt)
    # ISFs reached only through pointers or macros count as direct callees
    return {isf: dist.get(isf, 1) for isf in entry.isfs}


def compute_inlining_depth(entry, index):
    if entry.classification != BFI:
        return 0
    if entry.osf is None:
        return 1
    return max(source_depths(entry, index).values())


def inlining_influence_degree(entry, index):
    """Total ISF length over OSF length, as an exact fraction."""
    osf = index.get(entry.osf) if entry.osf else None
    if osf is None or osf.length_lines <= 0:
        raise DegenerateOSF(f"{entry.binary_function}: OSF {entry.osf!r} has no positive length")
    total = sum(index.get(k).length_lines for k in entry.isfs if index.get(k) is not None)
    return Fraction(total, osf.length_lines)


def build_function_mapping(lines, index, functions, tally=None):
    """One ``MappingEntry`` per binary function, in function order.

    ``tally`` (a dict, optional) receives row accounting: ``rows``,
    ``orphan_rows`` (no binary function), ``outside_rows`` (file not in the
    source tree), ``no_sf_rows`` (file-scope line) and ``shared_lines``
    ((file, line) pairs that landed in more than one binary function).
    """
    functions = list(functions)
    lookup = FunctionLookup(functions)
    resolved_files = {}
    per_bf = {f.ident: {} for f in functions}   # dict keeps first-seen order
    first_sf = {}
    line_owners = {}
    counts = dict(rows=0, orphan_rows=0, outside_rows=0, no_sf_rows=0, resolved_rows=0)
    for addr, file, line in lines:
        counts["rows"] += 1
        bf = lookup.find(addr)
        if bf is None:
            counts["orphan_rows"] += 1
            continue
        if file not in resolved_files:
            resolved_files[file] = index.resolve_file(file)
        rel = resolved_files[file]
        if rel is None:
            counts["outside_rows"] += 1
            continue
        sf = index.by_location(rel, line)
        if sf is None:
            counts["no_sf_rows"] += 1
            continue
        counts["resolved_rows"] += 1
        per_bf[bf.ident].setdefault(sf.key, addr)
        first_sf.setdefault(bf.ident, sf.key)
        line_owners.setdefault((rel, line), set()).add(bf.ident)
    counts["shared_lines"] = sum(1 for owners in line_owners.values() if len(owners) > 1)

    entries = []
    for f in functions:
        sfs = tuple(per_bf[f.ident])
        e = MappingEntry(
            binary_function=f.ident, name=f.name, entry=f.entry, size=f.size,
            instruction_count=f.instruction_count, is_library=f.is_library,
            callees=tuple(sorted(f.callees)), source_functions=sfs,
            classification=classify(sfs),
        )
        e = _with_osf(e, first_sf.get(f.ident))
        entries.append(replace(e, depth=compute_inlining_depth(e, index)))
    if tally is not None:
        counts.update(
            NBF=sum(e.classification == NBF for e in entries),
            BFI=sum(e.classification == BFI for e in entries),
            UNRESOLVED=sum(e.classification == UNRESOLVED for e in entries),
            osf_flagged=sum(e.flagged for e in entries),
        )
        tally.update(counts)
    return entries


def merge_clones(entries, index):
    """Fold ``foo.part.0`` / ``foo.cold`` style clones into one entry per base name.

    The member whose raw name equals the base name (else the lowest entry
    address) is kept; SF lists are concatenated in that order and
    de-duplicated, and intra-group call edges are dropped.
    """
    by_base = {}
    for e in entries:
        by_base.setdefault((e.is_library, e.base_name), []).append(e)
    groups = {}
    for key, members in by_base.items():
        heads = [e for e in members if e.name == e.base_name]
        if len(heads) <= 1:
            groups[key] = members
            continue
        # several real definitions (file-local statics): clones join the one
        # whose OSF sits in the same file, the definitions stay apart
        for h in heads:
            groups[key + (h.binary_function,)] = [h]
        for e in members:
            if e.name == e.base_name:
                continue
            f = e.osf.split("::", 1)[0] if e.osf else None
            home = next((h for h in heads if h.osf and f and h.osf.split("::", 1)[0] == f), None)
            if home is None:
                groups[key + (e.binary_function,)] = [e]
            else:
                groups[key + (home.binary_function,)].append(e)
    rename = {}
    merged = {}
    for key, members in groups.items():
        members.sort(key=lambda e: (e.name != e.base_name, e.entry))
        head = members[0]
        for m in members:
            rename[m.binary_function] = head.binary_function
        merged[head.binary_function] = members
    out = []
    for e in entries:
        members = merged.get(e.binary_function)
        if members is None:
            continue
        if len(members) == 1:
            out.append(replace(e, callees=tuple(sorted({rename.get(c, c) for c in e.callees}))))
            continue
        sfs = {}
        for m in members:
            for sf in m.source_functions:
                sfs.setdefault(sf, None)
        names = {m.binary_function for m in members}
        callees = {rename.get(c, c) for m in members for c in m.callees if c not in names}
        head = members[0]
        sfs = tuple(sfs)
        osf = head.osf or next((m.osf for m in members if m.osf), None)
        method = head.osf_method if head.osf else next((m.osf_method for m in members if m.osf), None)
        m = replace(
            head, size=sum(x.size for x in members),
            instruction_count=sum(x.instruction_count for x in members),
            callees=tuple(sorted(callees)), source_functions=sfs,
            classification=classify(sfs), osf=osf, osf_method=method,
        )
        out.append(replace(m, depth=compute_inlining_depth(m, index)))
    return out


# -- persistence ------------------------------------------------------------

def _dumps(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def entry_to_dict(e):
    d = asdict(e)
    d["callees"] = list(e.callees)
    d["source_functions"] = list(e.source_functions)
    return d


def entry_from_dict(d):
    d = dict(d)
    d["callees"] = tuple(d["callees"])
    d["source_functions"] = tuple(d["source_functions"])
    return MappingEntry(**d)


def write_mapping(entries, fh, header):
    """JSON-lines: one header object, then one object per entry."""
    head = dict(header)
    head.update(schema_version=SCHEMA_VERSION, kind="mapping")
    fh.write(_dumps(head) + "\n")
    for e in entries:
        fh.write(_dumps(entry_to_dict(e)) + "\n")


def read_mapping(path):
    with open(path) as fh:
        first = fh.readline()
        if not first.strip():
            raise SchemaMismatch(f"{path}: empty mapping file")
        header = json.loads(first)
        if header.get("kind") != "mapping" or header.get("schema_version") != SCHEMA_VERSION:
            raise SchemaMismatch(
                f"{path}: expected mapping schema {SCHEMA_VERSION}, got "
                f"{header.get('kind')}/{header.get('schema_version')}")
        entries = [entry_from_dict(json.loads(line)) for line in fh if line.strip()]
    return header, entries
