"""Lexical C/C++ function indexer.

Comments, string/char literals and preprocessor directives are blanked out
(newlines kept, so line numbers survive), then braces are matched scope by
scope.  A ``{`` whose header ends in a parameter list opens a function
definition.  Object- and function-like macros defined anywhere in the tree
are expanded inside headers only, which is enough for declarator macros such
as ``int BZ_API(name) (...)`` and attribute macros such as
``FORCE_INLINE int f(...)``.
"""

import json
import logging
import os
import re
from dataclasses import dataclass, field, replace

from .errors import SchemaMismatch, UnbalancedBraces

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SOURCE_SUFFIXES = (".c", ".h", ".cc", ".cpp", ".cxx", ".hpp", ".hh", ".hxx")

KEYWORDS = frozenset("""
    auto break case char const continue default do double else enum extern float for goto
    if inline int long register restrict return short signed sizeof static struct switch
    typedef union unsigned void volatile while _Alignas _Alignof _Atomic _Bool _Complex
    _Generic _Imaginary _Noreturn _Static_assert _Thread_local alignas alignof bool catch
    class constexpr decltype delete explicit friend mutable namespace new noexcept operator
    private protected public static_assert template this throw try typename using virtual
    typeof __typeof__ __typeof __inline __inline__ __restrict __restrict__ __volatile__
    __const __signed__ __extension__ __builtin_offsetof __builtin_va_arg defined
""".split())
ATTRIBUTE_INTRODUCERS = frozenset(
    "__attribute__ __attribute __declspec alignas _Alignas __asm__ __asm asm "
    "_Static_assert static_assert noexcept throw decltype".split())
TYPE_WORDS = frozenset(
    "void char short int long float double signed unsigned _Bool bool const volatile "
    "static extern register auto struct union enum".split())
TRAILING_QUALIFIERS = frozenset("const volatile override final noexcept & && throw".split())
CONTROL_WORDS = frozenset("if for while switch catch return else do case goto sizeof".split())

ALWAYS_WORDS = frozenset({"always_inline", "__always_inline__", "__always_inline", "__forceinline"})
NEVER_WORDS = frozenset({"noinline", "__noinline__", "__noinline"})
SUGGESTED_WORDS = frozenset({"inline", "__inline", "__inline__"})

_ALL_CAPS = re.compile(r"[A-Z_][A-Z0-9_]*")
_LEX = re.compile(
    r"""(?P<comment>//[^\n]*|/\*.*?(?:\*/|\Z))"""
    r"""|(?P<directive>^[ \t]*\#(?:\\\r?\n|[^\n])*)"""
    r"""|(?P<string>"(?:\\.|[^"\\\n])*"?)"""
    r"""|(?P<char>'(?:\\.|[^'\\\n])*'?)""",
    re.S | re.M,
)
_TOKEN = re.compile(r"[A-Za-z_]\w*|\d[\w.]*|::|->|\S")
_DEFINE = re.compile(r"\#\s*define\s+([A-Za-z_]\w*)(\([^)]*\))?(.*)", re.S)


@dataclass(frozen=True)
class SourceFunction:
    name: str
    file: str
    start_line: int
    end_line: int
    callee_names: frozenset = field(default=frozenset())
    inline_attribute: str = "none"
    signature: str = ""
    attribute_words: tuple = ()
    parent: str = None

    @property
    def key(self):
        return f"{self.file}::{self.name}"

    @property
    def length_lines(self):
        return self.end_line - self.start_line + 1


def _blank(s):
    return re.sub(r"[^\n]", " ", s)


def neutralize(text):
    """Blank comments, literals and directives; return ``(clean_text, directives)``.

    Literals keep their quote characters so token boundaries do not move.
    ``directives`` holds ``(line, text)`` with continuations joined.
    """
    out = []
    directives = []
    last = 0
    for m in _LEX.finditer(text):
        out.append(text[last:m.start()])
        kind = m.lastgroup
        s = m.group()
        if kind == "comment":
            out.append(_blank(s))
        elif kind == "directive":
            line = text.count("\n", 0, m.start()) + 1
            joined = re.sub(r"\\\r?\n", " ", s)
            joined = re.sub(r"/\*.*?\*/|//.*", " ", joined)
            directives.append((line, joined.strip()))
            out.append(_blank(s))
        else:
            q = s[0]
            inner = s[1:-1] if len(s) > 1 and s[-1] == q else s[1:]
            out.append(q + _blank(inner) + (q if len(s) > 1 and s[-1] == q else ""))
        last = m.end()
    out.append(text[last:])
    return "".join(out), directives


class _Tok:
    __slots__ = ("text", "line", "pos")

    def __init__(self, text, line, pos):
        self.text = text
        self.line = line
        self.pos = pos

    def __repr__(self):
        return f"{self.text}@{self.line}"


def tokenize(text, first_line=1):
    toks = []
    line = first_line
    last = 0
    for m in _TOKEN.finditer(text):
        line += text.count("\n", last, m.start())
        last = m.start()
        toks.append(_Tok(m.group(), line, m.start()))
    return toks


def _is_ident(t):
    return t[:1].isalpha() or t[:1] == "_"


def parse_macros(directives):
    """``name -> [(params or None, body), ...]`` in definition order."""
    macros = {}
    for _, d in directives:
        m = _DEFINE.match(d)
        if not m:
            continue
        name, params, body = m.groups()
        if params is not None:
            params = tuple(p.strip() for p in params[1:-1].split(",") if p.strip())
        macros.setdefault(name, []).append((params, body.strip()))
    return macros


def extract_callee_names(body_text, defined=None):
    """Names immediately followed by ``(`` that look like direct calls.

    Keywords, member calls (``a.f(``, ``p->f(``), names right after a builtin
    type word (local prototypes) and ALL_CAPS macro-looking names are dropped;
    an ALL_CAPS name survives when it is in ``defined``.
    """
    toks = tokenize(body_text)
    names = set()
    for i, t in enumerate(toks[:-1]):
        name = t.text
        if toks[i + 1].text != "(" or not _is_ident(name):
            continue
        if name in KEYWORDS or name in ATTRIBUTE_INTRODUCERS or name in CONTROL_WORDS:
            continue
        prev = toks[i - 1].text if i else ""
        if prev in (".", "->", "::") or prev in TYPE_WORDS:
            continue
        if _ALL_CAPS.fullmatch(name) and not (defined and name in defined):
            continue
        names.add(name)
    return names


def classify_inline(words):
    words = set(words)
    if words & ALWAYS_WORDS:
        return "always"
    if words & NEVER_WORDS:
        return "never"
    if words & SUGGESTED_WORDS:
        return "suggested"
    return "none"


class _FileIndexer:
    def __init__(self, rel, text, macros):
        self.rel = rel
        self.clean, self.directives = neutralize(text)
        self.toks = tokenize(self.clean)
        self.macros = macros
        self.found = []  # SourceFunction without callee filtering
        self.raw_calls = {}

    # -- macro handling -------------------------------------------------
    def _expand(self, toks, depth=0):
        if depth > 4:
            return toks
        out = []
        changed = False
        i = 0
        while i < len(toks):
            t = toks[i]
            defs = self.macros.get(t.text)
            if not defs:
                out.append(t)
                i += 1
                continue
            params, body = defs[-1]
            if params is None:
                out.extend(_Tok(b.text, t.line, t.pos) for b in tokenize(body))
                changed = True
                i += 1
                continue
            if i + 1 >= len(toks) or toks[i + 1].text != "(":
                out.append(t)
                i += 1
                continue
            args, cur, level, j = [], [], 0, i + 1
            while j < len(toks):
                x = toks[j].text
                if x == "(":
                    level += 1
                    if level == 1:
                        j += 1
                        continue
                elif x == ")":
                    level -= 1
                    if level == 0:
                        break
                if x == "," and level == 1:
                    args.append(cur)
                    cur = []
                else:
                    cur.append(toks[j])
                j += 1
            if j >= len(toks):
                out.append(t)
                i += 1
                continue
            args.append(cur)
            sub = dict(zip(params, args))
            for b in tokenize(body):
                if b.text in sub:
                    out.extend(_Tok(a.text, t.line, t.pos) for a in sub[b.text])
                elif b.text not in ("#", "##"):
                    out.append(_Tok(b.text, t.line, t.pos))
            changed = True
            i = j + 1
        return self._expand(out, depth + 1) if changed else out

    def _macro_words(self, toks, depth=0, seen=None):
        seen = set() if seen is None else seen
        words = set()
        for t in toks:
            if t.text in seen or t.text not in self.macros:
                continue
            seen.add(t.text)
            for _, body in self.macros[t.text]:
                btoks = tokenize(body)
                words.update(b.text for b in btoks if _is_ident(b.text))
                if depth < 4:
                    words |= self._macro_words(btoks, depth + 1, seen)
        return words

    # -- header analysis ----------------------------------------------
    @staticmethod
    def _strip_attributes(toks):
        out = []
        i = 0
        while i < len(toks):
            t = toks[i].text
            if t in ATTRIBUTE_INTRODUCERS and i + 1 < len(toks) and toks[i + 1].text == "(":
                level, j = 0, i + 1
                while j < len(toks):
                    if toks[j].text == "(":
                        level += 1
                    elif toks[j].text == ")":
                        level -= 1
                        if level == 0:
                            break
                    j += 1
                i = j + 1
                continue
            if t == "[" and i + 1 < len(toks) and toks[i + 1].text == "[":
                j = i + 2
                while j + 1 < len(toks) and not (toks[j].text == "]" and toks[j + 1].text == "]"):
                    j += 1
                i = j + 2
                continue
            out.append(toks[i])
            i += 1
        return out

    @staticmethod
    def _depth0(toks, text):
        level = 0
        for t in toks:
            if t.text in "([":
                level += 1
            elif t.text in ")]":
                level -= 1
            elif level == 0 and t.text == text:
                return True
        return False

    def _function_name(self, toks):
        """Declarator name of a header whose last token is ``)``, or None."""
        if not toks or toks[-1].text != ")":
            return None
        # last depth-0 parenthesised group
        level = 0
        for k in range(len(toks) - 1, -1, -1):
            if toks[k].text == ")":
                level += 1
            elif toks[k].text == "(":
                level -= 1
                if level == 0:
                    break
        else:
            return None
        if k > 0:
            prev = toks[k - 1].text
            if _is_ident(prev) and prev not in KEYWORDS and prev not in CONTROL_WORDS:
                return prev
        for a, b in zip(toks, toks[1:]):
            if b.text == "(" and _is_ident(a.text) and a.text not in KEYWORDS:
                return a.text
        return None

    def _classify(self, header):
        """Return ``("function", name, expanded)``, ``("container",)``, ``("skip",)``
        or ``("block",)``."""
        if not header:
            return ("block",)
        first = header[0].text
        if first == "namespace" or (first == "extern" and all(t.text == '"' for t in header[1:]) and len(header) > 1):
            return ("container",)
        expanded = self._strip_attributes(self._expand(header))
        while expanded and (expanded[-1].text in TRAILING_QUALIFIERS
                            or (_ALL_CAPS.fullmatch(expanded[-1].text) and len(expanded[-1].text) > 1)):
            expanded.pop()
        if self._depth0(expanded, "="):
            return ("skip",)
        if expanded and expanded[-1].text == ")":
            name = self._function_name(expanded)
            if name:
                return ("function", name, expanded)
            return ("block",)
        words = {t.text for t in expanded}
        if words & {"class", "struct", "union"}:
            return ("container",)
        if "enum" in words:
            return ("skip",)
        return ("block",)

    def _match(self, i):
        level = 0
        for j in range(i, len(self.toks)):
            t = self.toks[j].text
            if t == "{":
                level += 1
            elif t == "}":
                level -= 1
                if level == 0:
                    return j
        raise UnbalancedBraces(self.rel, self.toks[i].line)

    def _record(self, name, header, expanded, open_i, close_i, parent=None):
        toks = self.toks
        body = self.clean[toks[open_i].pos + 1:toks[close_i].pos]
        words = {t.text for t in header} | {t.text for t in expanded} | self._macro_words(header)
        sig = self.clean[header[0].pos:toks[open_i].pos]
        sig = " ".join(sig.split())
        fn = SourceFunction(
            name=name, file=self.rel, start_line=header[0].line, end_line=toks[close_i].line,
            signature=sig, attribute_words=tuple(sorted(w for w in words if _is_ident(w))),
            parent=parent,
        )
        self.found.append(fn)
        self.raw_calls[len(self.found) - 1] = extract_callee_names(body, defined=_ACCEPT_ALL)
        return fn

    def run(self):
        self._scope(0, closing=False)
        return self

    def _scope(self, i, closing):
        toks = self.toks
        n = len(toks)
        hstart = i
        paren = 0
        while i < n:
            t = toks[i].text
            if t in "([":
                paren += 1
            elif t in ")]":
                paren = max(0, paren - 1)
            elif t == ";" and paren == 0:
                hstart = i + 1
            elif t == "}":
                if closing:
                    return i + 1
                raise UnbalancedBraces(self.rel, toks[i].line)
            elif t == "{":
                paren = 0
                header = toks[hstart:i]
                kind = self._classify(header)
                if kind[0] == "function":
                    end = self._match(i)
                    fn = self._record(kind[1], header, kind[2], i, end)
                    self._nested(i + 1, end, fn.key)
                    i = hstart = end + 1
                    continue
                if kind[0] == "container":
                    i = hstart = self._scope(i + 1, closing=True)
                    continue
                end = self._match(i)
                i = end + 1
                if kind[0] == "block":
                    hstart = i
                continue
            i += 1
        if closing:
            raise UnbalancedBraces(self.rel, toks[-1].line if toks else None)
        return i

    def _nested(self, lo, hi, parent):
        """GCC nested functions inside a body: ``type name(params) {``."""
        toks = self.toks
        stmt = lo
        paren = 0
        i = lo
        while i < hi:
            t = toks[i].text
            if t in "([":
                paren += 1
            elif t in ")]":
                paren = max(0, paren - 1)
            elif paren == 0 and t in (";", "}"):
                stmt = i + 1
            elif paren == 0 and t == "{":
                header = toks[stmt:i]
                if self._nested_candidate(header):
                    kind = self._classify(header)
                    if kind[0] == "function":
                        end = self._match(i)
                        fn = self._record(kind[1], header, kind[2], i, end, parent=parent)
                        self._nested(i + 1, end, fn.key)
                        i = stmt = end + 1
                        continue
                stmt = i + 1
            i += 1

    @staticmethod
    def _nested_candidate(header):
        if len(header) < 4 or header[0].text in CONTROL_WORDS or header[-1].text != ")":
            return False
        try:
            k = next(j for j, t in enumerate(header) if t.text == "(")
        except StopIteration:
            return False
        if k < 2 or not _is_ident(header[k - 1].text) or header[k - 1].text in KEYWORDS:
            return False
        return all(_is_ident(t.text) or t.text == "*" for t in header[:k])


class _AcceptAll:
    def __contains__(self, item):
        return True


_ACCEPT_ALL = _AcceptAll()


class SourceIndex:
    def __init__(self, functions, call_graph=None, source_root="", skipped=()):
        self.functions = list(functions)
        self.source_root = source_root
        self.skipped = list(skipped)
        self._by_key = {}
        self._by_name = {}
        for f in self.functions:
            self._by_key.setdefault(f.key, f)
            self._by_name.setdefault(f.name, []).append(f)
        self._lines = {}
        per_file = {}
        for f in self.functions:
            per_file.setdefault(f.file, []).append(f)
        for file, funcs in per_file.items():
            top = max(f.end_line for f in funcs)
            table = [None] * (top + 1)
            # outer spans first so nested definitions overwrite their lines
            for f in sorted(funcs, key=lambda f: (f.start_line, -f.end_line)):
                for ln in range(f.start_line, f.end_line + 1):
                    table[ln] = f
            self._lines[file] = table
        self._files = set(per_file)
        self._suffixes = {}
        for file in sorted(self._files):
            parts = file.split("/")
            for k in range(len(parts)):
                self._suffixes.setdefault("/".join(parts[k:]), set()).add(file)
        if call_graph is None:
            call_graph = self._resolve_calls()
        self.call_graph = sorted(set(call_graph))
        self._succ = {}
        for a, b in self.call_graph:
            self._succ.setdefault(a, set()).add(b)

    def _resolve_calls(self):
        edges = set()
        for f in self.functions:
            for callee in f.callee_names:
                targets = self._by_name.get(callee)
                if not targets:
                    continue
                same_file = [t for t in targets if t.file == f.file]
                for t in same_file or targets:
                    edges.add((f.key, t.key))
        return edges

    def __len__(self):
        return len(self.functions)

    def __eq__(self, other):
        return (isinstance(other, SourceIndex) and self.functions == other.functions
                and self.call_graph == other.call_graph)

    @property
    def files(self):
        return frozenset(self._files)

    def get(self, key):
        return self._by_key.get(key)

    def by_name(self, name):
        return list(self._by_name.get(name, ()))

    def successors(self, key):
        return self._succ.get(key, set())

    def by_location(self, file, line):
        table = self._lines.get(file)
        if table is None or not 0 < line < len(table):
            return None
        return table[line]

    def resolve_file(self, path, prefix=None):
        """Map a (usually absolute) line-table path to an indexed relative path.

        Paths under ``prefix`` (default: the index's source root) are made
        relative; otherwise the longest indexed path that is a suffix of
        ``path`` wins, unless ``path`` lives in a system include directory.
        """
        path = path.replace("\\", "/")
        root = (prefix or self.source_root or "").rstrip("/")
        if root and path.startswith(root + "/"):
            rel = path[len(root) + 1:]
            if rel in self._files:
                return rel
        if path in self._files:
            return path
        if path.startswith(("/usr/include/", "/usr/lib/", "/usr/local/include/", "/lib/")):
            return None
        parts = path.split("/")
        for k in range(len(parts)):
            hits = self._suffixes.get("/".join(parts[k:]))
            if hits:
                return min(hits) if len(hits) > 1 else next(iter(hits))
        return None


def line_to_function(index, file, line):
    """Innermost source function enclosing ``file:line``, or None."""
    return index.by_location(file, line)


def extract_inline_attributes(index):
    funcs = [replace(f, inline_attribute=classify_inline(f.attribute_words)) for f in index.functions]
    return SourceIndex(funcs, index.call_graph, index.source_root, index.skipped)


def _iter_source_files(root):
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames[:] = sorted(d for d in dirnames if not d.startswith("."))
        for name in sorted(filenames):
            if name.endswith(SOURCE_SUFFIXES):
                yield os.path.join(dirpath, name)


def _read(path):
    with open(path, "rb") as fh:
        return fh.read().decode("utf-8", "replace")


def index_functions(source_root, jobs=1):
    """Index every definition under ``source_root``.

    Files that fail brace matching are skipped and listed in
    ``SourceIndex.skipped`` as ``(relative path, reason)``.
    """
    root = os.path.abspath(source_root)
    if not os.path.isdir(root):
        raise FileNotFoundError(source_root)
    paths = list(_iter_source_files(root))
    texts = {}
    macros = {}
    for p in paths:
        rel = os.path.relpath(p, root).replace(os.sep, "/")
        texts[rel] = _read(p)
        for name, defs in parse_macros(neutralize(texts[rel])[1]).items():
            macros.setdefault(name, []).extend(defs)

    def work(rel):
        try:
            return rel, _FileIndexer(rel, texts[rel], macros).run(), None
        except UnbalancedBraces as exc:
            return rel, None, str(exc)

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(jobs) as pool:
            results = list(pool.map(work, sorted(texts)))
    else:
        results = [work(rel) for rel in sorted(texts)]

    found, skipped = [], []
    for rel, fi, err in results:
        if fi is None:
            log.warning("skipping %s: %s", rel, err)
            skipped.append((rel, err))
            continue
        for k, fn in enumerate(fi.found):
            found.append((fn, fi.raw_calls[k]))
    defined = {fn.name for fn, _ in found}
    functions = []
    for fn, calls in found:
        callees = frozenset(c for c in calls if not _ALL_CAPS.fullmatch(c) or c in defined)
        functions.append(replace(fn, callee_names=callees))
    functions.sort(key=lambda f: (f.file, f.start_line, f.end_line, f.name))
    return extract_inline_attributes(SourceIndex(functions, source_root=root, skipped=skipped))


# -- persistence ------------------------------------------------------------

def index_to_dict(index):
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "source_index",
        "source_root": index.source_root,
        "functions": [
            {
                "name": f.name, "file": f.file, "start_line": f.start_line, "end_line": f.end_line,
                "length_lines": f.length_lines, "callee_names": sorted(f.callee_names),
                "inline_attribute": f.inline_attribute, "signature": f.signature,
                "attribute_words": list(f.attribute_words), "parent": f.parent,
            }
            for f in index.functions
        ],
        "call_graph": [list(e) for e in index.call_graph],
        "skipped_files": [{"file": f, "reason": r} for f, r in index.skipped],
    }


def index_from_dict(doc):
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise SchemaMismatch(f"source index schema {doc.get('schema_version')} != {SCHEMA_VERSION}")
    funcs = [
        SourceFunction(
            name=d["name"], file=d["file"], start_line=d["start_line"], end_line=d["end_line"],
            callee_names=frozenset(d["callee_names"]), inline_attribute=d["inline_attribute"],
            signature=d.get("signature", ""), attribute_words=tuple(d.get("attribute_words", ())),
            parent=d.get("parent"),
        )
        for d in doc["functions"]
    ]
    edges = [tuple(e) for e in doc["call_graph"]]
    skipped = [(s["file"], s["reason"]) for s in doc.get("skipped_files", ())]
    return SourceIndex(funcs, edges, doc.get("source_root", ""), skipped)


def save_index(index, path):
    with open(path, "w") as fh:
        json.dump(index_to_dict(index), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_index(path):
    with open(path) as fh:
        return index_from_dict(json.load(fh))
