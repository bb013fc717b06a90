"""Extent-of-inlining statistics over mapping sets."""

import csv
import io
import json
from dataclasses import dataclass, field
from fractions import Fraction

from .errors import EmptyInput, NoBFIs
from .mapping import BFI, NBF, UNRESOLVED, inlining_influence_degree

LENGTH_BINS = ("[1,10)", "[10,100)", "[100,1000)", "[1000,10000)", ">=10000")
RATIO_BINS = ("[0,0.6)", "[0.6,1)", "[1,10)", "[10,100)", "[100,1000)", ">=1000")

CSV_COLUMNS = (
    "group", "mode", "binaries", "functions", "nbf", "bfi", "unresolved", "inlining_ratio",
    "isfs_per_bfi_avg", "isfs_per_bfi_max", "bfis_per_isf_avg", "bfis_per_isf_max",
    "depth_histogram", "isf_length_histogram", "isf_osf_ratio_histogram",
)


def _bfis(entries):
    return [e for e in entries if e.classification == BFI]


def inlining_ratio(entries):
    """BFIs over resolved entries (UNRESOLVED counted in neither)."""
    entries = list(entries)
    if not entries:
        raise EmptyInput("no mapping entries")
    bfi = sum(e.classification == BFI for e in entries)
    nbf = sum(e.classification == NBF for e in entries)
    if bfi + nbf == 0:
        raise EmptyInput("no resolved mapping entries")
    return Fraction(bfi, bfi + nbf)


def isfs_per_bfi(entries):
    sizes = [len(e.isfs) for e in _bfis(entries)]
    if not sizes:
        raise NoBFIs("no BFIs")
    return Fraction(sum(sizes), len(sizes)), max(sizes)


def bfis_per_isf(entries):
    """Per distinct ISF, the number of BFIs it was inlined into."""
    per = {}
    for e in _bfis(entries):
        for isf in e.isfs:
            per[isf] = per.get(isf, 0) + 1
    if not per:
        raise NoBFIs("no BFIs")
    return Fraction(sum(per.values()), len(per)), max(per.values())


def length_bin(n):
    for k, label in enumerate(LENGTH_BINS[:-1]):
        if n < 10 ** (k + 1):
            return label
    return LENGTH_BINS[-1]


def ratio_bin(r):
    if r < Fraction(3, 5):
        return RATIO_BINS[0]
    if r < 1:
        return RATIO_BINS[1]
    for k, label in enumerate(RATIO_BINS[2:-1]):
        if r < 10 ** (k + 1):
            return label
    return RATIO_BINS[-1]


def distributions(entries, index):
    """Depth, ISF length and ISF/OSF length-ratio histograms over BFIs.

    Length and ratio are counted per (BFI, ISF) occurrence.
    """
    bfis = _bfis(entries)
    if not bfis:
        raise NoBFIs("no BFIs")
    depth = {}
    lengths = dict.fromkeys(LENGTH_BINS, 0)
    ratios = dict.fromkeys(RATIO_BINS, 0)
    for e in bfis:
        depth[e.depth] = depth.get(e.depth, 0) + 1
        osf = index.get(e.osf) if e.osf else None
        for isf in sorted(e.isfs):
            sf = index.get(isf)
            if sf is None:
                continue
            lengths[length_bin(sf.length_lines)] += 1
            if osf is not None and osf.length_lines > 0:
                ratios[ratio_bin(Fraction(sf.length_lines, osf.length_lines))] += 1
    return dict(sorted(depth.items())), lengths, ratios


def influence_degrees(entries, index):
    return {e.binary_function: inlining_influence_degree(e, index)
            for e in _bfis(entries) if e.osf is not None}


@dataclass
class MetricsReport:
    group_key: str
    mode: str = "pooled"
    binaries: int = 1
    functions: int = 0
    nbf: int = 0
    bfi: int = 0
    unresolved: int = 0
    inlining_ratio: Fraction = None
    isfs_per_bfi_avg: Fraction = None
    isfs_per_bfi_max: int = None
    bfis_per_isf_avg: Fraction = None
    bfis_per_isf_max: int = None
    depth_histogram: dict = field(default_factory=dict)
    isf_length_histogram: dict = field(default_factory=dict)
    isf_osf_ratio_histogram: dict = field(default_factory=dict)


def _single(entries, index, label):
    entries = list(entries)
    r = MetricsReport(group_key=label, functions=len(entries))
    r.nbf = sum(e.classification == NBF for e in entries)
    r.bfi = sum(e.classification == BFI for e in entries)
    r.unresolved = sum(e.classification == UNRESOLVED for e in entries)
    r.inlining_ratio = inlining_ratio(entries)
    r.isf_length_histogram = dict.fromkeys(LENGTH_BINS, 0)
    r.isf_osf_ratio_histogram = dict.fromkeys(RATIO_BINS, 0)
    if r.bfi:
        r.isfs_per_bfi_avg, r.isfs_per_bfi_max = isfs_per_bfi(entries)
        r.bfis_per_isf_avg, r.bfis_per_isf_max = bfis_per_isf(entries)
        r.depth_histogram, r.isf_length_histogram, r.isf_osf_ratio_histogram = distributions(entries, index)
    return r


def _merge_hist(hists):
    out = {}
    for h in hists:
        for k, v in h.items():
            out[k] = out.get(k, 0) + v
    return out


def metrics_report(entry_sets, index, label, mode="pooled"):
    """One report over several mapping sets (e.g. one per binary).

    ``pooled`` concatenates the sets, so ISFs are shared across binaries by
    (file, name); ``macro`` averages per-set values and keeps the largest max.
    """
    entry_sets = [list(s) for s in entry_sets]
    if not entry_sets or not any(entry_sets):
        raise EmptyInput(f"group {label!r} has no entries")
    if mode == "pooled":
        r = _single([e for s in entry_sets for e in s], index, label)
        r.binaries = len(entry_sets)
        return r
    if mode != "macro":
        raise ValueError(mode)
    parts = [_single(s, index, label) for s in entry_sets]
    r = MetricsReport(group_key=label, mode="macro", binaries=len(parts))
    for f in ("functions", "nbf", "bfi", "unresolved"):
        setattr(r, f, sum(getattr(p, f) for p in parts))
    r.inlining_ratio = sum((p.inlining_ratio for p in parts), Fraction(0)) / len(parts)
    with_bfi = [p for p in parts if p.bfi]
    if with_bfi:
        for f in ("isfs_per_bfi_avg", "bfis_per_isf_avg"):
            setattr(r, f, sum((getattr(p, f) for p in with_bfi), Fraction(0)) / len(with_bfi))
        for f in ("isfs_per_bfi_max", "bfis_per_isf_max"):
            setattr(r, f, max(getattr(p, f) for p in with_bfi))
    r.depth_histogram = dict(sorted(_merge_hist(p.depth_histogram for p in parts).items()))
    r.isf_length_histogram = _merge_hist([dict.fromkeys(LENGTH_BINS, 0)] + [p.isf_length_histogram for p in parts])
    r.isf_osf_ratio_histogram = _merge_hist([dict.fromkeys(RATIO_BINS, 0)] + [p.isf_osf_ratio_histogram for p in parts])
    return r


def _num(x):
    if x is None:
        return None
    if isinstance(x, Fraction):
        return round(float(x), 6)
    return x


def report_to_dict(r):
    d = {}
    for col in CSV_COLUMNS:
        key = "group_key" if col == "group" else col
        v = getattr(r, key)
        if isinstance(v, dict):
            v = {str(k): n for k, n in v.items()}
        d[col] = _num(v)
    d["inlining_ratio_exact"] = str(r.inlining_ratio)
    return d


def reports_to_csv(reports):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in reports:
        d = report_to_dict(r)
        row = []
        for col in CSV_COLUMNS:
            v = d[col]
            if isinstance(v, dict):
                v = ";".join(f"{k}:{n}" for k, n in v.items())
            elif isinstance(v, float):
                v = f"{v:.6f}"
            row.append("" if v is None else v)
        w.writerow(row)
    return buf.getvalue()


def reports_to_json(reports, header=None):
    doc = dict(header or {})
    doc["reports"] = [report_to_dict(r) for r in reports]
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"
