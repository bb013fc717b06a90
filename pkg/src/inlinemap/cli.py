"""inlinemap command line.

    inlinemap index-source SRC -o index.json
    inlinemap map BINARY --index index.json -o map.jsonl
    inlinemap stats map_O0.jsonl map_O2.jsonl --index index.json
    inlinemap strategy --query map_O0.jsonl --target map_O3.jsonl --kind bingo
    inlinemap patterns map_O0.jsonl map_O3.jsonl
    inlinemap relation map_O2.jsonl
    inlinemap report --manifest dataset.json -o outdir

Results go to stdout (or ``-o``); summaries and diagnostics go to stderr.
"""

import argparse
import csv
import hashlib
import io
import itertools
import json
import logging
import os
import pickle
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from fractions import Fraction

from . import __version__
from .binary import load_binary
from .errors import EmptyGroup, InlineMapError, SchemaMismatch
from .mapping import build_function_mapping, merge_clones, read_mapping, write_mapping
from .metrics import metrics_report, reports_to_csv, reports_to_json
from .patterns import PATTERNS, classify_b2s_relation, pair_by_osf, pattern_counts
from .source import index_functions, load_index, save_index
from .strategy import (
    ProgramView, StrategyConfig, evaluate_coverage, expand, incremental_expand,
    inline_cost, inline_similarity, no_inline,
)

log = logging.getLogger("inlinemap")

MANIFEST_SCHEMA = 1
CACHE_ENV = "INLINEMAP_CACHE_DIR"
# flags that do not change results and are left out of the reproducibility header
_VOLATILE = {"jobs", "out", "coverage_csv", "func", "verbose", "command"}


class UsageError(Exception):
    """Bad path or argument combination; exit status 2."""


# -- manifest ---------------------------------------------------------------

@dataclass(frozen=True)
class ManifestBinary:
    path: str
    label: str
    mapping: str


@dataclass(frozen=True)
class DatasetManifest:
    schema_version: int
    binaries: tuple
    source_index: str
    source_root: str = None
    created: str = None

    def labels(self):
        seen = []
        for b in self.binaries:
            if b.label not in seen:
                seen.append(b.label)
        return seen

    def group(self, label):
        return sorted((b for b in self.binaries if b.label == label), key=lambda b: b.path)


def load_manifest(path, need_mappings=False):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != MANIFEST_SCHEMA:
        raise SchemaMismatch(f"{path}: manifest schema {doc.get('schema_version')} != {MANIFEST_SCHEMA}")
    base = os.path.dirname(os.path.abspath(path))

    def rel(p):
        return p if p is None or os.path.isabs(p) else os.path.join(base, p)

    bins = tuple(ManifestBinary(rel(b["path"]), b["label"], rel(b["mapping"])) for b in doc["binaries"])
    m = DatasetManifest(doc["schema_version"], bins, rel(doc["source_index"]),
                        rel(doc.get("source_root")), doc.get("created"))
    for b in bins:
        _need(b.path)
        if need_mappings:
            _need(b.mapping)
    if not need_mappings and m.source_root:
        _need(m.source_root)
    return m


def _need(path):
    if path is None or not os.path.exists(path):
        raise UsageError(f"no such file or directory: {path}")
    return path


# -- helpers ----------------------------------------------------------------

def repro_header(command, args):
    flags = {k: v for k, v in sorted(vars(args).items()) if k not in _VOLATILE}
    return {"tool": "inlinemap", "version": __version__, "command": command, "flags": flags}


def _csv_comment(header):
    return "# " + json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n"


def _emit(text, out):
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _cached_binary(path):
    cache = os.environ.get(CACHE_ENV)
    if not cache:
        return load_binary(path)
    with open(path, "rb") as fh:
        digest = hashlib.sha256(fh.read()).hexdigest()
    slot = os.path.join(cache, f"binary-{__version__}-{digest}.pickle")
    if os.path.exists(slot):
        with open(slot, "rb") as fh:
            img = pickle.load(fh)
        return img
    img = load_binary(path)
    os.makedirs(cache, exist_ok=True)
    tmp = f"{slot}.{os.getpid()}.tmp"
    with open(tmp, "wb") as fh:
        pickle.dump(img, fh)
    os.replace(tmp, slot)
    return img


def map_binary(binary, index, merge=False):
    img = _cached_binary(binary)
    tally = {}
    entries = build_function_mapping(img.lines, index, img.functions, tally)
    if merge:
        entries = merge_clones(entries, index)
    tally["unresolved_calls"] = img.graph.unresolved_call_count
    return entries, tally


def _render_mapping(entries, header):
    buf = io.StringIO()
    write_mapping(entries, buf, header)
    return buf.getvalue()


_worker_index = None


def _worker_init(index_path):
    global _worker_index
    _worker_index = load_index(index_path)


def _worker_map(job):
    binary, label, merge, header = job
    entries, tally = map_binary(binary, _worker_index, merge)
    header = dict(header, binary=binary, label=label, tallies=tally)
    return binary, _render_mapping(entries, header), tally


def _load_mappings(paths):
    out = []
    for p in paths:
        _need(p)
        out.append(read_mapping(p))
    return out


def _index_for(args, headers):
    path = args.index or (headers[0].get("source_index") if headers else None)
    if not path:
        raise UsageError("no source index given (use --index)")
    return load_index(_need(path))


# -- commands ---------------------------------------------------------------

def cmd_index_source(args):
    if not os.path.isdir(args.source_root):
        raise UsageError(f"not a directory: {args.source_root}")
    index = index_functions(args.source_root, jobs=args.jobs)
    if len(index) == 0:
        log.warning("no function definitions found under %s", args.source_root)
    for f, reason in index.skipped:
        log.warning("skipped %s: %s", f, reason)
    if args.out:
        save_index(index, args.out)
    else:
        from .source import index_to_dict
        sys.stdout.write(json.dumps(index_to_dict(index), indent=1, sort_keys=True) + "\n")
    print(f"functions={len(index)} skipped={len(index.skipped)}", file=sys.stderr)
    return 0


def cmd_map(args):
    if args.manifest:
        m = load_manifest(_need(args.manifest))
        index_path = _need(args.index or m.source_index)
        header = repro_header("map", args)
        header.update(schema_version=1, source_index=index_path)
        jobs = [(b.path, b.label, args.merge_clones, header) for b in sorted(m.binaries, key=lambda b: b.path)]
        targets = {b.path: b.mapping for b in m.binaries}
        if args.jobs > 1:
            with ProcessPoolExecutor(args.jobs, initializer=_worker_init, initargs=(index_path,)) as pool:
                results = list(pool.map(_worker_map, jobs))
        else:
            _worker_init(index_path)
            results = [_worker_map(j) for j in jobs]
        for binary, text, tally in results:
            with open(targets[binary], "w") as fh:
                fh.write(text)
            print(f"{binary}: NBF={tally['NBF']} BFI={tally['BFI']} UNRESOLVED={tally['UNRESOLVED']}",
                  file=sys.stderr)
        return 0
    if not args.binary:
        raise UsageError("map needs a BINARY or --manifest")
    _need(args.binary)
    index_path = _need(args.index) if args.index else None
    if index_path is None:
        raise UsageError("map needs --index")
    index = load_index(index_path)
    entries, tally = map_binary(args.binary, index, args.merge_clones)
    header = repro_header("map", args)
    header.update(schema_version=1, source_index=index_path, binary=args.binary,
                  label=args.label, tallies=tally)
    _emit(_render_mapping(entries, header), args.out)
    print(f"NBF={tally['NBF']} BFI={tally['BFI']} UNRESOLVED={tally['UNRESOLVED']} "
          f"orphan_rows={tally['orphan_rows']} shared_lines={tally['shared_lines']}", file=sys.stderr)
    return 0


def _groups_from(args):
    """``[(label, [entries, ...])]`` in first-seen label order, plus headers."""
    if args.manifest:
        m = load_manifest(_need(args.manifest), need_mappings=True)
        if not args.index:
            args.index = m.source_index
        groups = []
        headers = []
        for label in m.labels():
            sets = []
            for b in m.group(label):
                h, entries = read_mapping(b.mapping)
                headers.append(h)
                sets.append(entries)
            groups.append((label, sets))
        return groups, headers
    if not args.mappings:
        raise UsageError("give mapping files or --manifest")
    loaded = _load_mappings(args.mappings)
    groups = {}
    for path, (h, entries) in zip(args.mappings, loaded):
        label = h.get("label") or path
        groups.setdefault(label, []).append(entries)
    return list(groups.items()), [h for h, _ in loaded]


def cmd_stats(args):
    groups, headers = _groups_from(args)
    index = _index_for(args, headers)
    modes = ("pooled", "macro") if args.mode == "both" else (args.mode,)
    reports = []
    for label, sets in groups:
        if not any(sets):
            raise EmptyGroup(f"group {label!r} is empty")
        for mode in modes:
            reports.append(metrics_report(sets, index, label, mode))
    header = repro_header("stats", args)
    header["schema_version"] = 1
    if args.format == "json":
        _emit(reports_to_json(reports, header), args.out)
    else:
        _emit(_csv_comment(header) + reports_to_csv(reports), args.out)
    return 0


def _pair_inputs(args):
    """``[(pair label, query entries, target entries)]``."""
    if args.manifest:
        groups, _ = _groups_from(args)
        flat = [(label, [e for s in sets for e in s]) for label, sets in groups]
        return [(f"{a}|{b}", ea, eb) for (a, ea), (b, eb) in itertools.combinations(flat, 2)]
    q = args.query or (args.mappings[0] if args.mappings else None)
    t = args.target or (args.mappings[1] if args.mappings and len(args.mappings) > 1 else None)
    if not q or not t:
        raise UsageError("need two mapping files (query and target)")
    (hq, eq), (ht, et) = _load_mappings([q, t])
    return [(f"{hq.get('label') or q}|{ht.get('label') or t}", eq, et)]


def _strategy_config(args):
    kind = args.kind if args.kind in ("bingo", "asm2vec") else "bingo"
    term = StrategyConfig.__dataclass_fields__["termination_functions"].default
    if args.termination:
        term = frozenset(x for x in args.termination.split(",") if x)
    return StrategyConfig(kind, Fraction(args.alpha), Fraction(args.delta), args.wrapper_lines,
                          None if kind == "asm2vec" else args.max_depth, term)


def run_strategy(kind, query, target, config, include_library=False):
    """Expand every OSF-paired root; returns ``(records, coverage table)``."""
    vq, vt = ProgramView(query), ProgramView(target)
    records = []
    cov_pairs = []
    for osf, a, b in pair_by_osf(query, target):
        if a.is_library or b.is_library:
            continue
        if kind == "incremental":
            x = incremental_expand(a.binary_function, b.binary_function, vq, vt)
            y = no_inline(b.binary_function, vt)
        else:
            x = expand(kind, a.binary_function, vq, config)
            y = expand(kind, b.binary_function, vt, config)
        cov_pairs.append((x, b))
        needed = b.isfs if b.classification == "BFI" else frozenset()
        records.append({
            "osf": osf, "query": a.binary_function, "target": b.binary_function, "kind": kind,
            "query_inlined": vq.order(x.inlined_bfs), "target_inlined": vt.order(y.inlined_bfs),
            "query_library": sorted(x.lib_set), "target_library": sorted(y.lib_set),
            "decisions": [list(d) for d in x.decisions],
            "target_decisions": [list(d) for d in y.decisions],
            "cost": inline_cost(x, y, include_library),
            "similarity": float(inline_similarity(x, y, include_library)),
            "similarity_exact": str(inline_similarity(x, y, include_library)),
            "coverage_needed": len(needed), "coverage_covered": len(needed & x.sf_set),
        })
    return records, evaluate_coverage(cov_pairs, vq)


def cmd_strategy(args):
    pairs = _pair_inputs(args)
    config = _strategy_config(args)
    header = repro_header("strategy", args)
    header["schema_version"] = 1
    lines = [json.dumps(dict(header, kind="strategy_header"), sort_keys=True, separators=(",", ":"))]
    cov_text = []
    for label, q, t in pairs:
        records, table = run_strategy(args.kind, q, t, config, args.include_library)
        for r in records:
            lines.append(json.dumps(dict(r, pair=label), sort_keys=True, separators=(",", ":")))
        body = table.to_csv()
        cov_text.append(body if len(pairs) == 1 else
                        "".join(f"{label},{row}\n" for row in body.splitlines()[1:]))
        if records:
            mean_sim = sum(r["similarity"] for r in records) / len(records)
            mean_cost = sum(r["cost"] for r in records) / len(records)
            print(f"{label}: pairs={len(records)} mean_similarity={mean_sim:.4f} "
                  f"mean_cost={mean_cost:.3f} coverage={float(table.coverage):.4f}", file=sys.stderr)
    _emit("\n".join(lines) + "\n", args.out)
    if args.coverage_csv:
        with open(args.coverage_csv, "w") as fh:
            fh.write(_csv_comment(header))
            if len(pairs) != 1:
                fh.write("pair,category,tag,count,share\n")
            fh.write("".join(cov_text))
    return 0


def cmd_patterns(args):
    pairs = _pair_inputs(args)
    header = repro_header("patterns", args)
    header["schema_version"] = 1
    rows = []
    pooled = dict.fromkeys(PATTERNS, 0)
    for label, q, t in pairs:
        counts = pattern_counts(pair_by_osf(q, t))
        total = sum(counts.values())
        if total == 0:
            raise EmptyGroup(f"{label}: no OSF-paired functions")
        for p in PATTERNS:
            rows.append((label, p, counts[p], counts[p] / total))
            pooled[p] += counts[p]
    if len(pairs) > 1:
        total = sum(pooled.values())
        rows.extend(("pooled", p, pooled[p], pooled[p] / total) for p in PATTERNS)
    if args.format == "json":
        doc = dict(header, rows=[{"pair": a, "pattern": p, "count": n, "fraction": round(f, 6)}
                                 for a, p, n, f in rows])
        _emit(json.dumps(doc, indent=1, sort_keys=True) + "\n", args.out)
    else:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["pair", "pattern", "count", "fraction"])
        for a, p, n, f in rows:
            w.writerow([a, p, n, f"{f:.6f}"])
        _emit(_csv_comment(header) + buf.getvalue(), args.out)
    return 0


def cmd_relation(args):
    loaded = _load_mappings(args.mappings)
    header = repro_header("relation", args)
    header["schema_version"] = 1
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mapping", "binary_function", "source_function", "relation"])
    for path, (_, entries) in zip(args.mappings, loaded):
        for e in entries:
            if e.classification == "UNRESOLVED":
                continue
            targets = list(e.source_functions) + [t for t in (args.target_sf or []) if t not in e.source_functions]
            for sf in targets:
                w.writerow([path, e.binary_function, sf, classify_b2s_relation(e, sf)])
    _emit(_csv_comment(header) + buf.getvalue(), args.out)
    return 0


def cmd_report(args):
    if not args.manifest:
        raise UsageError("report needs --manifest")
    os.makedirs(args.out, exist_ok=True)
    groups, headers = _groups_from(args)
    index = _index_for(args, headers)
    header = repro_header("report", args)
    header["schema_version"] = 1
    reports = [metrics_report(sets, index, label, mode) for label, sets in groups
               for mode in ("pooled", "macro")]
    with open(os.path.join(args.out, "stats.csv"), "w") as fh:
        fh.write(_csv_comment(header) + reports_to_csv(reports))
    flat = [(label, [e for s in sets for e in s]) for label, sets in groups]
    pat = io.StringIO()
    pw = csv.writer(pat, lineterminator="\n")
    pw.writerow(["pair", "pattern", "count", "fraction"])
    strat = io.StringIO()
    sw = csv.writer(strat, lineterminator="\n")
    sw.writerow(["pair", "kind", "pairs", "mean_similarity", "mean_cost", "coverage"])
    config = StrategyConfig("bingo")
    for (a, ea), (b, eb) in itertools.combinations(flat, 2):
        label = f"{a}|{b}"
        counts = pattern_counts(pair_by_osf(ea, eb))
        total = sum(counts.values()) or 1
        for p in PATTERNS:
            pw.writerow([label, p, counts[p], f"{counts[p] / total:.6f}"])
        for kind in ("none", "asm2vec", "bingo", "all", "incremental"):
            records, table = run_strategy(kind, ea, eb, config)
            n = len(records) or 1
            sw.writerow([label, kind, len(records),
                         f"{sum(r['similarity'] for r in records) / n:.6f}",
                         f"{sum(r['cost'] for r in records) / n:.6f}", f"{float(table.coverage):.6f}"])
    with open(os.path.join(args.out, "patterns.csv"), "w") as fh:
        fh.write(_csv_comment(header) + pat.getvalue())
    with open(os.path.join(args.out, "strategies.csv"), "w") as fh:
        fh.write(_csv_comment(header) + strat.getvalue())
    print(f"wrote stats.csv patterns.csv strategies.csv to {args.out}", file=sys.stderr)
    return 0


# -- argument parsing -------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--jobs", type=int, default=1, help="parallel workers (results do not depend on it)")
    common.add_argument("--format", choices=("csv", "json"), default="csv")
    common.add_argument("--manifest", help="dataset manifest JSON")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="inlinemap", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"inlinemap {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("index-source", parents=[common], help="index source function definitions")
    s.add_argument("source_root")
    s.add_argument("-o", "--out")
    s.set_defaults(func=cmd_index_source)

    s = sub.add_parser("map", parents=[common], help="build binary-to-source function mapping")
    s.add_argument("binary", nargs="?")
    s.add_argument("--index")
    s.add_argument("--label", default=None, help="configuration label, e.g. gcc-11/O2/x86-64")
    s.add_argument("--merge-clones", action="store_true")
    s.add_argument("-o", "--out")
    s.set_defaults(func=cmd_map)

    s = sub.add_parser("stats", parents=[common], help="inlining ratio, ISFs/BFI, BFIs/ISF, histograms")
    s.add_argument("mappings", nargs="*")
    s.add_argument("--index")
    s.add_argument("--mode", choices=("pooled", "macro", "both"), default="pooled")
    s.add_argument("-o", "--out")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("strategy", parents=[common], help="run an inlining-simulation strategy")
    s.add_argument("mappings", nargs="*")
    s.add_argument("--query")
    s.add_argument("--target")
    s.add_argument("--kind", choices=("bingo", "asm2vec", "incremental", "none", "all"), default="bingo")
    s.add_argument("--alpha", default="0.01")
    s.add_argument("--delta", default="0.6")
    s.add_argument("--wrapper-lines", type=int, default=10)
    s.add_argument("--max-depth", type=int, default=None)
    s.add_argument("--termination", help="comma-separated termination function names")
    s.add_argument("--include-library", action="store_true")
    s.add_argument("--coverage-csv")
    s.add_argument("-o", "--out")
    s.set_defaults(func=cmd_strategy)

    s = sub.add_parser("patterns", parents=[common], help="binary2binary matching pattern distribution")
    s.add_argument("mappings", nargs="*")
    s.add_argument("--query")
    s.add_argument("--target")
    s.add_argument("-o", "--out")
    s.set_defaults(func=cmd_patterns)

    s = sub.add_parser("relation", parents=[common], help="binary2source relation per (BF, SF)")
    s.add_argument("mappings", nargs="+")
    s.add_argument("--target-sf", action="append", help="extra SF key to classify against every BF")
    s.add_argument("-o", "--out")
    s.set_defaults(func=cmd_relation)

    s = sub.add_parser("report", parents=[common], help="stats, patterns and strategies for a manifest")
    s.add_argument("--index")
    s.add_argument("-o", "--out", required=True, help="output directory")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except InlineMapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (json.JSONDecodeError, KeyError) as exc:
        print(f"error: malformed input: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
