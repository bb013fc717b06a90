"""Binary-to-binary matching patterns and binary-to-source relation classes."""

from fractions import Fraction

from .errors import NoPairs, UnresolvedEntry
from .mapping import BFI, NBF, UNRESOLVED

PATTERNS = ("a", "b", "c", "d", "e", "f")
UNRELATED = "UNRELATED"
RELATIONS = ("NSF", "OSF", "ISF", "NONE")


def _require(e):
    if e.classification == UNRESOLVED or e.osf is None:
        raise UnresolvedEntry(f"{e.binary_function} has no designated OSF")


def pattern_of_sets(i1, i2):
    i1, i2 = frozenset(i1), frozenset(i2)
    if not i1 and not i2:
        return "a"
    if i1 == i2:
        return "b"
    if not i1 or not i2:
        return "c"
    if i1 < i2 or i2 < i1:
        return "d"
    if not i1 & i2:
        return "e"
    return "f"


def classify_b2b_pattern(e1, e2):
    _require(e1)
    _require(e2)
    if e1.osf != e2.osf:
        return UNRELATED
    return pattern_of_sets(e1.isfs, e2.isfs)


def _representative(entries):
    # prefer the symbol literally named after the OSF, then the lowest address
    def rank(e):
        return (e.name != e.osf.split("::", 1)[-1], e.entry, e.binary_function)
    return min(entries, key=rank)


def pair_by_osf(entries1, entries2):
    """Join two mapping sets on OSF identity.

    Returns ``[(osf, e1, e2)]`` sorted by OSF.  When several binary functions
    share an OSF on one side (clones), one representative is used.
    """
    def group(entries):
        g = {}
        for e in entries:
            if e.classification != UNRESOLVED and e.osf is not None:
                g.setdefault(e.osf, []).append(e)
        return {k: _representative(v) for k, v in g.items()}

    g1, g2 = group(entries1), group(entries2)
    return [(osf, g1[osf], g2[osf]) for osf in sorted(g1.keys() & g2.keys())]


def pattern_counts(pairs):
    counts = {p: 0 for p in PATTERNS}
    for _, e1, e2 in pairs:
        counts[classify_b2b_pattern(e1, e2)] += 1
    return counts


def pattern_distribution(entries1, entries2):
    """Fraction of OSF-paired entries per pattern letter."""
    pairs = pair_by_osf(entries1, entries2)
    if not pairs:
        raise NoPairs("no binary functions share an OSF")
    counts = pattern_counts(pairs)
    total = sum(counts.values())
    return {p: Fraction(n, total) for p, n in counts.items()}


def pooled_distribution(count_tables):
    """Unweighted pool of several per-pair count tables."""
    total = {p: 0 for p in PATTERNS}
    for c in count_tables:
        for p in PATTERNS:
            total[p] += c.get(p, 0)
    n = sum(total.values())
    if n == 0:
        raise NoPairs("no pairs in any table")
    return {p: Fraction(v, n) for p, v in total.items()}


def classify_b2s_relation(query, target_sf):
    if query.classification == UNRESOLVED:
        raise UnresolvedEntry(f"{query.binary_function} maps to no source function")
    if target_sf == query.osf:
        if query.classification == NBF:
            return "NSF"
        if query.classification == BFI:
            return "OSF"
    if query.osf is not None and target_sf in query.isfs:
        return "ISF"
    return "NONE"
