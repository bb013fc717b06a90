from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from inlinemap.errors import MissingGroundTruth, OracleFailure, UnknownFunction, ZeroLengthCaller
from inlinemap.mapping import BFI, NBF, MappingEntry
from inlinemap.strategy import (
    CoverageTable, ProgramView, StrategyConfig, alpha, asm2vec_expand, bingo_case, bingo_expand,
    delta, evaluate_coverage, expand, incremental_expand, inline_cost, inline_everything,
    inline_similarity, no_inline,
)


def program(edges, lib=(), sizes=None, sfs=None, names=None):
    """ProgramView over a toy graph; node ``X`` maps to source function ``s.c::X``."""
    sizes = sizes or {}
    sfs = sfs or {}
    names = names or {}
    nodes = sorted({n for e in edges for n in e} | set(lib) | set(sizes) | set(sfs))
    out = []
    for i, n in enumerate(nodes):
        src = () if n in lib else tuple(sfs.get(n, [f"s.c::{n}"]))
        out.append(MappingEntry(
            binary_function=n, name=names.get(n, n), entry=0x1000 + 0x10 * i, size=0x10,
            instruction_count=sizes.get(n, 20), is_library=n in lib,
            callees=tuple(sorted(c for a, c in edges if a == n)), source_functions=src,
            osf=src[0] if src else None, osf_method="address" if src else None,
            classification=NBF if len(src) == 1 else BFI if src else "UNRESOLVED",
            depth=1 if len(src) > 1 else 0))
    return ProgramView(out)


# -- brute-force rule oracle -------------------------------------------------
# written from the rule list alone: an edge's verdict depends only on the
# (caller, callee) pair, so the expansion is the closure of accepted edges

def rule_verdict(view, caller, callee, cfg, asm2vec=False):
    ent = view.entries
    lib = {n for n, e in ent.items() if e.is_library}
    if callee in lib:
        return "lib"
    # self-calls are not relations with other UD functions
    ud_out = {c for c in ent[callee].callees if c not in lib and c in ent and c != callee}
    if caller in ent[callee].callees:
        ok = True
    elif not ud_out:
        libs = [c for c in ent[callee].callees if c in lib]
        term = [c for c in libs if ent[c].name in cfg.termination_functions]
        ok = len(term) * 2 <= len(libs)
    else:
        ud_in = {n for n, e in ent.items() if callee in e.callees and n not in lib and n != callee}
        ok = Fraction(len(ud_out), len(ud_out) + len(ud_in)) < cfg.alpha_threshold
    if ok and asm2vec:
        ratio = Fraction(ent[callee].instruction_count, ent[caller].instruction_count)
        ok = ratio < cfg.delta_threshold or ent[caller].instruction_count < cfg.wrapper_lines
    return ok


def closure(view, root, cfg, asm2vec=False):
    inlined, libs = set(), set()
    frontier = {root}
    changed = True
    while changed:
        changed = False
        for caller in sorted(frontier | inlined):
            if asm2vec and caller != root:
                continue
            for callee in view.entries[caller].callees:
                if callee == root or callee in inlined or callee == caller:
                    continue
                v = rule_verdict(view, caller, callee, cfg, asm2vec)
                if v == "lib":
                    libs.add(callee)
                elif v:
                    inlined.add(callee)
                    changed = True
    return inlined, libs


# -- equations ---------------------------------------------------------------

def test_alpha_examples():
    # 1 UD callee, 99 UD callers
    edges = [(f"p{i}", "c") for i in range(99)] + [("c", "d")]
    v = program(edges)
    assert alpha("c", v.graph) == Fraction(1, 100)
    assert bingo_case("p0", "c", v, StrategyConfig()) == ("ALPHA", False)
    v2 = program([("p", "c")] + [("c", x) for x in "xyz"])
    assert alpha("c", v2.graph) == Fraction(3, 4)
    v3 = program([(f"p{i}", "c") for i in range(5)])
    assert alpha("c", v3.graph) == 0
    assert alpha("iso", program([], sizes={"iso": 1}).graph) == 0
    # library neighbours count in neither degree
    v4 = program([("p", "c"), ("c", "puts"), ("c", "d")], lib={"puts"})
    assert alpha("c", v4.graph) == Fraction(1, 2)
    with pytest.raises(UnknownFunction):
        alpha("nope", v4.graph)


def test_delta_examples():
    v = program([("s", "c")], sizes={"s": 10, "c": 5})
    assert delta(v.entry("s"), v.entry("c")) == Fraction(1, 2)
    v2 = program([("s", "c")], sizes={"s": 50, "c": 100})
    assert delta(v2.entry("s"), v2.entry("c")) == 2
    with pytest.raises(ZeroLengthCaller):
        delta(program([("s", "c")], sizes={"s": 0}).entry("s"), v.entry("c"))


def test_delta_boundary_and_wrapper():
    cfg = StrategyConfig("asm2vec")
    # c is a leaf calling only puts, so it passes the rules: only the filter decides
    base = [("s", "c"), ("c", "puts")]
    near = program(base, lib={"puts"}, sizes={"s": 100, "c": 59})
    at = program(base, lib={"puts"}, sizes={"s": 100, "c": 60})
    wrap = program(base, lib={"puts"}, sizes={"s": 9, "c": 500})
    assert asm2vec_expand("s", near, cfg).inlined_bfs == {"c"}
    assert asm2vec_expand("s", at, cfg).inlined_bfs == frozenset()
    assert asm2vec_expand("s", at, cfg).decisions == (("c", "DELTA", False),)
    w = asm2vec_expand("s", wrap, cfg)
    assert w.inlined_bfs == {"c"} and w.tag_of("c") == "WRAPPER"


def test_cost_and_similarity_examples():
    v = program([("A", "B"), ("A", "C"), ("X", "Y")])
    e1 = v.expansion("A", {"B", "C"})
    e2 = v.expansion("X", {"Y"})
    assert inline_cost(e1, e2) == 3
    assert inline_cost(no_inline("A", v), no_inline("X", v)) == 0
    f = program([], sfs={"p": ["s.c::f", "s.c::g"], "q": ["s.c::f", "s.c::g", "s.c::h"]})
    assert inline_similarity(no_inline("p", f), no_inline("q", f)) == Fraction(2, 3)
    assert inline_similarity(no_inline("p", f), no_inline("p", f)) == 1
    empty = program([], sfs={"z": []})
    assert inline_similarity(empty.expansion("z", ()), empty.expansion("z", ())) == 1


def test_library_intent_ignored_by_default():
    v = program([("A", "puts"), ("A", "B")], lib={"puts"})
    e = bingo_expand("A", v)
    assert e.lib_set == {"puts"} and e.inlined_bfs == {"B"}
    assert inline_cost(e, no_inline("A", v)) == 1
    assert inline_cost(e, no_inline("A", v), include_library=True) == 2
    assert inline_similarity(e, e, include_library=True) == 1


# -- bingo cases ---------------------------------------------------------------

def test_bingo_leaf_cases():
    libs = {"printf", "puts", "exit", "abort"}
    v = program([("r", "talk"), ("talk", "printf"), ("talk", "puts"),
                 ("r", "die"), ("die", "exit"),
                 ("r", "half"), ("half", "exit"), ("half", "puts"),
                 ("r", "most"), ("most", "exit"), ("most", "abort"), ("most", "puts")], lib=libs)
    e = bingo_expand("r", v)
    tags = {c: (t, ok) for c, t, ok in e.decisions}
    assert tags["talk"] == ("L", True)
    assert tags["die"] == ("TERM_SKIP", False)
    assert tags["half"] == ("L", True)   # exactly half terminate: still inlined
    assert tags["most"] == ("TERM_SKIP", False)
    assert e.inlined_bfs == {"talk", "half"}


def test_bingo_recursion_case():
    v = program([("a", "b"), ("b", "a"), ("b", "c"), ("x", "b"), ("y", "b")])
    e = bingo_expand("a", v)
    assert e.tag_of("b") == "R"
    # b -> c: c is a leaf with no calls at all, inlined as L
    assert e.tag_of("c") == "L"


def test_bingo_alpha_case_and_threshold():
    edges = [("root", "hub"), ("hub", "leaf")] + [(f"u{i}", "hub") for i in range(3)]
    v = program(edges)
    assert alpha("hub", v.graph) == Fraction(1, 5)
    assert bingo_expand("root", v, StrategyConfig(alpha_threshold=Fraction(1, 100))).inlined_bfs == frozenset()
    assert bingo_expand("root", v, StrategyConfig(alpha_threshold=0.5)).inlined_bfs == {"hub", "leaf"}
    assert bingo_expand("root", v, StrategyConfig(alpha_threshold=Fraction(1, 5))).inlined_bfs == frozenset()


def test_config_validation():
    assert StrategyConfig("asm2vec", max_depth=5).max_depth == 1
    assert StrategyConfig(alpha_threshold=0.01).alpha_threshold == Fraction(1, 100)
    with pytest.raises(ValueError):
        StrategyConfig("nope")
    with pytest.raises(ValueError):
        StrategyConfig(alpha_threshold=0)


def test_library_root_and_unknown_root():
    v = program([("a", "puts")], lib={"puts"})
    with pytest.raises(UnknownFunction):
        bingo_expand("zzz", v)
    with pytest.raises(UnknownFunction):
        bingo_expand("puts", v)
    with pytest.raises(ValueError):
        expand("incremental", "a", v)


def test_asm2vec_depth_one():
    v = program([("a", "b"), ("b", "c"), ("c", "puts")], lib={"puts"}, sizes={"a": 100, "b": 10, "c": 10})
    e = asm2vec_expand("a", v, StrategyConfig("asm2vec", alpha_threshold=1))
    assert e.inlined_bfs == {"b"}
    assert bingo_expand("a", v, StrategyConfig(alpha_threshold=1)).inlined_bfs == {"b", "c"}


def test_self_recursive_leaf_is_l():
    v = program([("r", "loop"), ("loop", "loop"), ("loop", "puts")], lib={"puts"})
    assert alpha("loop", v.graph) == 0
    assert bingo_expand("r", v).tag_of("loop") == "L"


def test_inline_everything_reaches_all_ud():
    v = program([("a", "b"), ("b", "c"), ("c", "a"), ("c", "puts"), ("z", "a")], lib={"puts"})
    e = inline_everything("a", v)
    assert e.inlined_bfs == {"b", "c"} and e.lib_set == {"puts"}


# -- fixture checks ------------------------------------------------------------

def _roots(view):
    return [n for n, e in sorted(view.entries.items()) if not e.is_library]


@pytest.mark.parametrize("level", ["basenc_O0", "basenc_O3"])
@pytest.mark.parametrize("alpha_t", [Fraction(1, 100), Fraction(1, 2)])
def test_fixture_matches_rule_oracle(mappings, level, alpha_t):
    view = ProgramView(mappings[level])
    cfg = StrategyConfig(alpha_threshold=alpha_t)
    for root in _roots(view):
        inl, libs = closure(view, root, cfg)
        e = bingo_expand(root, view, cfg)
        assert e.inlined_bfs == inl, root
        assert e.lib_set == libs, root
        a = asm2vec_expand(root, view, StrategyConfig("asm2vec", alpha_threshold=alpha_t))
        assert a.inlined_bfs == closure(view, root, cfg, asm2vec=True)[0], root
        direct = set(view.entries[root].callees)
        assert a.inlined_bfs <= e.inlined_bfs & direct, root


# -- random graphs ---------------------------------------------------------------

NODES = [f"n{i}" for i in range(8)]
LIBS = ["puts", "exit", "abort"]


@st.composite
def graphs(draw):
    edges = draw(st.lists(st.tuples(st.sampled_from(NODES), st.sampled_from(NODES + LIBS)),
                          max_size=30, unique=True))
    sizes = {n: draw(st.integers(1, 60)) for n in NODES}
    return program(edges, lib=set(LIBS), sizes=sizes)


fractions = st.fractions(min_value=Fraction(1, 1000), max_value=1)


@settings(max_examples=150, deadline=None)
@given(graphs(), fractions)
def test_random_graph_matches_oracle(view, a):
    cfg = StrategyConfig(alpha_threshold=a)
    for root in NODES:
        e = bingo_expand(root, view, cfg)
        assert (set(e.inlined_bfs), set(e.lib_set)) == closure(view, root, cfg)
        assert root not in e.inlined_bfs
        assert e.inlined_bfs <= inline_everything(root, view).inlined_bfs
        a2 = asm2vec_expand(root, view, StrategyConfig("asm2vec", alpha_threshold=a))
        assert a2.inlined_bfs == closure(view, root, cfg, asm2vec=True)[0]
        assert a2.inlined_bfs <= set(view.entries[root].callees)


@settings(max_examples=100, deadline=None)
@given(graphs(), fractions, fractions)
def test_alpha_monotone(view, a, b):
    lo, hi = min(a, b), max(a, b)
    for root in NODES:
        small = bingo_expand(root, view, StrategyConfig(alpha_threshold=lo)).inlined_bfs
        big = bingo_expand(root, view, StrategyConfig(alpha_threshold=hi)).inlined_bfs
        assert small <= big


@settings(max_examples=100, deadline=None)
@given(graphs())
def test_metric_properties(view):
    exps = [bingo_expand(r, view) for r in NODES[:4]] + [no_inline(r, view) for r in NODES[:2]]
    for x in exps:
        for y in exps:
            s = inline_similarity(x, y)
            assert s == inline_similarity(y, x) and 0 <= s <= 1
            assert (s == 1) == (x.sf_set == y.sf_set)
            assert (inline_cost(x, y) == 0) == (not x.inlined_bfs and not y.inlined_bfs)


# -- incremental -------------------------------------------------------------------

def test_incremental_finds_the_one_callee():
    q = program([("f", "c"), ("f", "d"), ("c", "e")])
    t = program([("g", "x")], sfs={"g": ["s.c::f", "s.c::c"]})
    e = incremental_expand("f", "g", q, t)
    assert e.inlined_bfs == {"c"}
    assert [(c, ok) for c, _, ok in e.decisions] == [("c", True), ("d", False), ("e", False)]


def test_incremental_nothing_helps():
    q = program([("f", "c")])
    t = program([], sfs={"g": ["s.c::f"]})
    e = incremental_expand("f", "g", q, t)
    assert e.inlined_bfs == frozenset()
    assert inline_cost(e, no_inline("g", t)) == 0


def test_incremental_prunes_rejected_subtree():
    # inlining c alone does not help, so e (which would) is never tried
    q = program([("f", "c"), ("c", "e")])
    t = program([], sfs={"g": ["s.c::f", "s.c::e"]})
    e = incremental_expand("f", "g", q, t)
    assert e.inlined_bfs == frozenset()
    assert [c for c, _, _ in e.decisions] == ["c"]


def test_incremental_oracle_failures():
    q = program([("f", "c")])
    t = program([], sfs={"g": ["s.c::f"]})

    def boom(a, b):
        raise RuntimeError("model offline")

    with pytest.raises(OracleFailure):
        incremental_expand("f", "g", q, t, oracle=boom)
    with pytest.raises(OracleFailure):
        incremental_expand("f", "g", q, t, oracle=lambda a, b: 2)


# -- coverage ------------------------------------------------------------------------

def _gt(view, name, sfs):
    e = view.entry(name)
    return MappingEntry(**{**e.__dict__, "source_functions": tuple(sfs),
                           "classification": BFI if len(sfs) > 1 else NBF, "osf": sfs[0]})


def test_coverage_forced_examples():
    v = program([("f", "a"), ("f", "b")])
    exact = v.expansion("f", {"a", "b"}, decisions=[("a", "L", True), ("b", "ALPHA", True)])
    gt = _gt(v, "f", ["s.c::f", "s.c::a", "s.c::b"])
    t = evaluate_coverage([(exact, gt)], v)
    assert t.coverage == 1 and t.category_total("BFN") == 2 and t.category_total("BFNN") == 0
    off = v.expansion("f", {"a"}, decisions=[("a", "L", True)])
    t2 = evaluate_coverage([(off, _gt(v, "f", ["s.c::f", "s.c::z"]))], v)
    assert t2.coverage == 0 and t2.share("BFNN", "L") == 1
    with pytest.raises(MissingGroundTruth):
        evaluate_coverage([(off, None)], v)
    rows = t.to_csv().splitlines()
    assert rows[0] == "category,tag,count,share"
    assert rows[1:7] == ["BFNN,ALPHA,0,0.000000", "BFNN,L,0,0.000000", "BFNN,R,0,0.000000",
                         "BFN,ALPHA,1,0.500000", "BFN,L,1,0.500000", "BFN,R,0,0.000000"]
    assert rows[-1] == "coverage,,2/2,1.000000"
    assert CoverageTable().coverage == 0


# -- fixture regression baselines (recorded under gcc 11, O0 query vs O3 target) --

def _gcc11():
    import subprocess
    try:
        return subprocess.run(["gcc", "-dumpversion"], capture_output=True, text=True).stdout.startswith("11")
    except OSError:
        return False


BASELINE = {  # kind -> (mean similarity, mean cost, covered, needed)
    "none": (Fraction(25, 42), 0, 1, 8),
    "asm2vec": (Fraction(719, 924), Fraction(10, 7), 6, 8),
    "bingo": (Fraction(169, 196), Fraction(12, 7), 8, 8),
    "all": (Fraction(401, 420), Fraction(20, 7), 8, 8),
    "incremental": (Fraction(27, 28), Fraction(6, 7), 8, 8),
}


@pytest.mark.skipif(not _gcc11(), reason="baselines recorded for gcc 11")
def test_fixture_strategy_baselines(mappings):
    from inlinemap.cli import run_strategy
    from inlinemap.patterns import classify_b2b_pattern, pair_by_osf
    q, t = mappings["basenc_O0"], mappings["basenc_O3"]
    got = {}
    for kind, (sim, cost, covered, needed) in BASELINE.items():
        records, table = run_strategy(kind, q, t, StrategyConfig())
        got[kind] = {r["osf"]: (Fraction(r["similarity_exact"]), r["cost"]) for r in records}
        assert len(records) == 7
        assert sum(v[0] for v in got[kind].values()) / 7 == sim, kind
        assert Fraction(sum(v[1] for v in got[kind].values()), 7) == cost, kind
        assert (table.covered, table.needed) == (covered, needed), kind
    c_pairs = [osf for osf, a, b in pair_by_osf(q, t) if classify_b2b_pattern(a, b) == "c"]
    assert len(c_pairs) == 4
    better = sum(got["incremental"][o][1] <= got["bingo"][o][1] and got["incremental"][o][0] >= got["bingo"][o][0]
                 for o in c_pairs)
    assert better / len(c_pairs) >= 0.8
