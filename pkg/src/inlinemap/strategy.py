"""Inlining-simulation strategies over a binary call graph.

Each strategy grows a root binary function by a set of callees and reports
every decision it took.  Thresholds are compared strictly and in exact
rational arithmetic, so ``alpha = 1/100`` is not below a 0.01 threshold.
"""

import csv
import heapq
import io
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction

from .binary.calls import CallGraph
from .binary.functions import base_name
from .errors import MissingGroundTruth, OracleFailure, UnknownFunction, ZeroLengthCaller
from .mapping import BFI, UNRESOLVED

DEFAULT_TERMINATION = frozenset({"exit", "_exit", "abort", "__assert_fail", "__stack_chk_fail", "longjmp"})
TAGS = ("LIB", "R", "L", "TERM_SKIP", "ALPHA", "DELTA", "WRAPPER", "TRIAL")


def _frac(x):
    if isinstance(x, Fraction):
        return x
    if isinstance(x, float):
        return Fraction(repr(x))
    return Fraction(x)


@dataclass(frozen=True)
class StrategyConfig:
    kind: str = "bingo"
    alpha_threshold: Fraction = Fraction(1, 100)
    delta_threshold: Fraction = Fraction(3, 5)
    wrapper_lines: int = 10
    max_depth: int = None
    termination_functions: frozenset = DEFAULT_TERMINATION

    def __post_init__(self):
        if self.kind not in ("bingo", "asm2vec", "incremental"):
            raise ValueError(f"unknown strategy kind {self.kind!r}")
        object.__setattr__(self, "alpha_threshold", _frac(self.alpha_threshold))
        object.__setattr__(self, "delta_threshold", _frac(self.delta_threshold))
        object.__setattr__(self, "termination_functions", frozenset(self.termination_functions))
        if self.alpha_threshold <= 0 or self.delta_threshold <= 0 or self.wrapper_lines <= 0:
            raise ValueError("thresholds must be positive")
        if self.kind == "asm2vec":
            object.__setattr__(self, "max_depth", 1)


@dataclass(frozen=True)
class ExpandedFunction:
    root: str
    inlined_bfs: frozenset
    sf_set: frozenset
    decisions: tuple = ()
    lib_set: frozenset = field(default=frozenset())

    def tag_of(self, bf):
        """Tag of the decision that inlined ``bf``."""
        for callee, tag, inlined in self.decisions:
            if callee == bf and inlined:
                return tag
        return None


class ProgramView:
    """Call graph plus per-function facts for one binary.

    Built from mapping entries: ``callees`` give the edges, ``is_library`` the
    library set, ``instruction_count`` the lengths, ``source_functions`` the
    SF sets used by the similarity metric.
    """

    def __init__(self, entries):
        self.entries = {e.binary_function: e for e in entries}
        nodes = set(self.entries)
        edges = {(e.binary_function, c) for e in entries for c in e.callees if c in nodes}
        self.graph = CallGraph(nodes, edges, library=(e.binary_function for e in entries if e.is_library))

    def __contains__(self, bf):
        return bf in self.entries

    def entry(self, bf):
        try:
            return self.entries[bf]
        except KeyError:
            raise UnknownFunction(bf) from None

    def order(self, bfs):
        return sorted(bfs, key=lambda b: (self.entries[b].entry, b))

    def sfs(self, bfs):
        out = set()
        for b in bfs:
            out.update(self.entries[b].source_functions)
        return frozenset(out)

    def expansion(self, root, inlined, decisions=(), lib=()):
        inlined = frozenset(inlined)
        return ExpandedFunction(root, inlined, self.sfs(inlined | {root}), tuple(decisions), frozenset(lib))


def _check(view, bf):
    if bf not in view:
        raise UnknownFunction(bf)


def alpha(callee, graph):
    """UD out-degree over UD out+in degree; 0 for an isolated node."""
    if callee not in graph:
        raise UnknownFunction(callee)
    out = len(graph.ud_callees(callee))
    inn = len(graph.ud_callers(callee))
    return Fraction(out, out + inn) if out + inn else Fraction(0)


def delta(caller, callee):
    """Callee length over caller length, lengths in instructions."""
    if caller.instruction_count <= 0:
        raise ZeroLengthCaller(f"{getattr(caller, 'binary_function', caller)} has no instructions")
    return Fraction(callee.instruction_count, caller.instruction_count)


def bingo_case(caller, callee, view, config):
    """``(tag, inline)`` for one caller -> callee edge under the five rules."""
    g = view.graph
    if g.is_library(callee):
        return "LIB", True
    if caller in g.callees(callee):
        return "R", True
    if not g.ud_callees(callee):
        libs = g.library_callees(callee)
        term = sum(1 for lib in libs if base_name(view.entry(lib).name) in config.termination_functions)
        # a callee with no calls at all counts as a pure library caller with no terminators
        return ("L", True) if 2 * term <= len(libs) else ("TERM_SKIP", False)
    if alpha(callee, g) < config.alpha_threshold:
        return "ALPHA", True
    return "ALPHA", False


def _asm2vec_case(caller, callee, view, config):
    tag, ok = bingo_case(caller, callee, view, config)
    if not ok or tag == "LIB":
        return tag, ok
    d = delta(view.entry(caller), view.entry(callee))
    if d < config.delta_threshold:
        return tag, True
    if view.entry(caller).instruction_count < config.wrapper_lines:
        return "WRAPPER", True
    return "DELTA", False


def _expand(root, view, config, rule):
    _check(view, root)
    if view.graph.is_library(root):
        raise UnknownFunction(f"{root} is a library function")
    inlined = set()
    lib = set()
    decisions = []
    queue = deque([(root, 0)])
    done = {root}
    while queue:
        node, depth = queue.popleft()
        if config.max_depth is not None and depth >= config.max_depth:
            continue
        for callee in view.order(view.graph.callees(node)):
            if callee == node or callee in done:
                continue
            tag, ok = rule(node, callee, view, config)
            decisions.append((callee, tag, ok))
            if not ok:
                continue
            done.add(callee)
            if tag == "LIB":
                lib.add(callee)
                continue
            inlined.add(callee)
            queue.append((callee, depth + 1))
    return view.expansion(root, inlined, decisions, lib)


def bingo_expand(root, view, config=None):
    config = config or StrategyConfig("bingo")
    return _expand(root, view, config, bingo_case)


def asm2vec_expand(root, view, config=None):
    config = config or StrategyConfig("asm2vec")
    if config.kind != "asm2vec":
        config = StrategyConfig("asm2vec", config.alpha_threshold, config.delta_threshold,
                                config.wrapper_lines, 1, config.termination_functions)
    return _expand(root, view, config, _asm2vec_case)


def no_inline(root, view):
    _check(view, root)
    return view.expansion(root, ())


def inline_everything(root, view, config=None):
    """Every user-defined function reachable from ``root``."""
    config = config or StrategyConfig("bingo")
    return _expand(root, view, config, lambda p, c, v, cfg: ("LIB", True) if v.graph.is_library(c)
                   else ("ALPHA", True))


def inline_cost(e1, e2, include_library=False):
    cost = len(e1.inlined_bfs) + len(e2.inlined_bfs)
    if include_library:
        cost += len(e1.lib_set) + len(e2.lib_set)
    return cost


def inline_similarity(e1, e2, include_library=False):
    """Jaccard index of the two SF sets (1 when both are empty)."""
    a, b = set(e1.sf_set), set(e2.sf_set)
    if include_library:
        a |= {"<lib>" + x for x in e1.lib_set}
        b |= {"<lib>" + x for x in e2.lib_set}
    union = a | b
    if not union:
        return Fraction(1)
    return Fraction(len(a & b), len(union))


def jaccard_oracle(query, target):
    return inline_similarity(query, target)


def incremental_expand(query_root, target_root, query_view, target_view, oracle=None, target=None):
    """Trial-inline callees of the query one at a time, nearest entry first.

    A trial is kept only if the oracle's similarity to the target strictly
    rises; the accepted callee's own callees then become candidates.  A
    rejected callee is never retried and nothing is enqueued through it.
    """
    oracle = oracle or jaccard_oracle
    _check(query_view, query_root)
    target = target or no_inline(target_root, target_view)
    g = query_view.graph

    def score(inl):
        try:
            s = oracle(query_view.expansion(query_root, inl), target)
        except OracleFailure:
            raise
        except Exception as exc:
            raise OracleFailure(f"oracle raised {exc!r}") from exc
        if s is None or not 0 <= s <= 1:
            raise OracleFailure(f"oracle returned {s!r}")
        return s

    inlined = set()
    decisions = []
    best = score(inlined)
    seen = {query_root}
    heap = []

    def push_callees(bf):
        for c in g.callees(bf):
            if c not in seen and not g.is_library(c):
                heapq.heappush(heap, (query_view.entry(c).entry, c))

    push_callees(query_root)
    while heap:
        _, cand = heapq.heappop(heap)
        if cand in seen:
            continue
        seen.add(cand)
        s = score(inlined | {cand})
        if s > best:
            best = s
            inlined.add(cand)
            decisions.append((cand, "TRIAL", True))
            push_callees(cand)
        else:
            decisions.append((cand, "TRIAL", False))
    return query_view.expansion(query_root, inlined, decisions)


def expand(kind, root, view, config=None):
    if kind == "bingo":
        return bingo_expand(root, view, config)
    if kind == "asm2vec":
        return asm2vec_expand(root, view, config)
    if kind == "none":
        return no_inline(root, view)
    if kind == "all":
        return inline_everything(root, view, config)
    raise ValueError(f"kind {kind!r} needs a target; use incremental_expand")


# -- coverage ---------------------------------------------------------------

@dataclass
class CoverageTable:
    counts: dict = field(default_factory=dict)   # (category, tag) -> count
    covered: int = 0
    needed: int = 0

    @property
    def inlined(self):
        return sum(self.counts.values())

    def share(self, category, tag):
        n = self.inlined
        return Fraction(self.counts.get((category, tag), 0), n) if n else Fraction(0)

    @property
    def coverage(self):
        return Fraction(self.covered, self.needed) if self.needed else Fraction(0)

    def tags(self):
        extra = sorted({t for _, t in self.counts} - {"ALPHA", "L", "R"})
        return ["ALPHA", "L", "R"] + extra

    def category_total(self, category):
        return sum(v for (c, _), v in self.counts.items() if c == category)

    def to_csv(self):
        """Rows ``category,tag,count,share``; shares are over all inlined BFs."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["category", "tag", "count", "share"])
        for cat in ("BFNN", "BFN"):
            for tag in self.tags():
                w.writerow([cat, tag, self.counts.get((cat, tag), 0), f"{float(self.share(cat, tag)):.6f}"])
        w.writerow(["coverage", "", f"{self.covered}/{self.needed}", f"{float(self.coverage):.6f}"])
        return buf.getvalue()


def evaluate_coverage(pairs, view):
    """``pairs``: ``(expansion, counterpart entry)``, the expansion built on ``view``.

    Each inlined BF is BFN when one of its source functions is a ground-truth
    ISF of the counterpart, else BFNN.  Coverage pools over pairs whose
    counterpart is a BFI.
    """
    table = CoverageTable()
    for exp, gt in pairs:
        if gt is None or gt.classification == UNRESOLVED:
            raise MissingGroundTruth(f"no resolved counterpart for {exp.root}")
        needed = gt.isfs if gt.classification == BFI else frozenset()
        for bf in view.order(exp.inlined_bfs):
            cat = "BFN" if set(view.entry(bf).source_functions) & needed else "BFNN"
            key = (cat, exp.tag_of(bf) or "UNKNOWN")
            table.counts[key] = table.counts.get(key, 0) + 1
        table.needed += len(needed)
        table.covered += len(needed & exp.sf_set)
    return table
