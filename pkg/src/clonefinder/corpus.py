"""Function-level fragment extraction from C/C++ source trees.

The primary parser is libclang, which recovers function boundaries even when
includes are unresolved or macros confuse the type system. A lexical
brace-matching scanner recovers top-level function regions that clang missed
(for example, definitions swallowed by an unexpanded top-level macro); such
files are flagged in the extraction log. Java is out of scope: adding a
language means adding an extension mapping plus a clang language mode here.
"""

from __future__ import annotations

import atexit
import json
import logging
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

from .errors import ExtractionError, FragmentFormatError
from .lexer import Token, TokenKind, token_texts, tokenize

logger = logging.getLogger(__name__)

_LANG_BY_EXT = {
    ".c": "c",
    ".h": "c++",  # headers are parsed in C++ mode, a superset for typical corpora
    ".hh": "c++",
    ".hpp": "c++",
    ".hxx": "c++",
    ".cc": "c++",
    ".cpp": "c++",
    ".cxx": "c++",
    ".c++": "c++",
    ".inl": "c++",
    ".ipp": "c++",
    ".tpp": "c++",
}

_CLANG_ARGS = {
    "c": ["-x", "c", "-std=c11", "-ferror-limit=0"],
    "c++": ["-x", "c++", "-std=c++17", "-ferror-limit=0"],
}


class PreprocessMode(Enum):
    NONE = "none"
    STRIP_WHITESPACE = "strip_whitespace"
    STRIP_COMMENTS = "strip_comments"
    STRIP_BOTH = "strip_both"

    @classmethod
    def from_string(cls, name: str) -> "PreprocessMode":
        try:
            return cls(name)
        except ValueError:
            valid = ", ".join(m.value for m in cls)
            raise ValueError(f"unknown preprocess mode {name!r} (valid: {valid})") from None


@dataclass
class CodeFragment:
    """One extracted function definition."""

    fragment_id: str
    file_path: str
    function_name: str
    start_line: int
    end_line: int
    loc: int
    tokens: list[str]
    raw_text: str

    def validate(self) -> None:
        if self.start_line > self.end_line:
            raise FragmentFormatError(
                f"{self.fragment_id}: start_line {self.start_line} > end_line {self.end_line}"
            )
        if self.loc != self.end_line - self.start_line + 1:
            raise FragmentFormatError(
                f"{self.fragment_id}: loc {self.loc} != line span "
                f"{self.end_line - self.start_line + 1}"
            )
        if not self.tokens:
            raise FragmentFormatError(f"{self.fragment_id}: empty token list")


def fragment_id_for(file_path: str, function_name: str, start_line: int) -> str:
    """Content-independent identity, stable across embedding reruns."""
    return f"{file_path}:{function_name}:{start_line}"


def preprocess_tokens(raw_text: str, mode: PreprocessMode) -> list[str]:
    """Lex raw source text into the token sequence for the given mode.

    Comments are retained (and count toward any later token budget) under
    NONE and STRIP_WHITESPACE; whitespace stripping collapses whitespace runs
    inside retained comment bodies, which is the only place whitespace can
    appear inside a token apart from string literal content.
    """
    keep_comments = mode in (PreprocessMode.NONE, PreprocessMode.STRIP_WHITESPACE)
    collapse = mode in (PreprocessMode.STRIP_WHITESPACE, PreprocessMode.STRIP_BOTH)
    return token_texts(
        tokenize(raw_text),
        keep_comments=keep_comments,
        collapse_comment_whitespace=collapse,
    )


def truncate_tokens(fragment: CodeFragment, code_length: int) -> CodeFragment:
    """Keep the first code_length tokens; all other fields unchanged."""
    if code_length < 1:
        raise ValueError(f"code_length must be >= 1, got {code_length}")
    if len(fragment.tokens) <= code_length:
        return fragment
    return replace(fragment, tokens=fragment.tokens[:code_length])


# --- clang-based extraction ------------------------------------------------

_thread_state = threading.local()


def _clang_index():
    import clang.cindex as ci

    idx = getattr(_thread_state, "index", None)
    if idx is None:
        idx = ci.Index.create()
        _thread_state.index = idx
    return idx


@atexit.register
def _drop_clang_index() -> None:
    # Dispose before interpreter teardown; a late Index.__del__ would hit
    # already-cleared cindex globals and print a spurious traceback.
    _thread_state.__dict__.pop("index", None)


def _qualified_name(cursor) -> str:
    import clang.cindex as ci

    parts = [cursor.spelling or "(anon)"]
    parent = cursor.semantic_parent
    scope_kinds = {
        ci.CursorKind.NAMESPACE,
        ci.CursorKind.CLASS_DECL,
        ci.CursorKind.STRUCT_DECL,
        ci.CursorKind.UNION_DECL,
        ci.CursorKind.CLASS_TEMPLATE,
        ci.CursorKind.CLASS_TEMPLATE_PARTIAL_SPECIALIZATION,
    }
    while parent is not None and parent.kind in scope_kinds:
        parts.append(parent.spelling or "(anon)")
        parent = parent.semantic_parent
    return "::".join(reversed(parts))


def _clang_definitions(file_label: str, contents: str, language: str) -> list[tuple[str, int, int]]:
    """Parse one file and return (qualified_name, start_line, end_line) per definition.

    Raises ExtractionError when clang cannot produce a translation unit at all.
    """
    import clang.cindex as ci

    kinds = {
        ci.CursorKind.FUNCTION_DECL,
        ci.CursorKind.CXX_METHOD,
        ci.CursorKind.FUNCTION_TEMPLATE,
        ci.CursorKind.CONSTRUCTOR,
        ci.CursorKind.DESTRUCTOR,
        ci.CursorKind.CONVERSION_FUNCTION,
    }
    try:
        tu = _clang_index().parse(
            file_label,
            args=_CLANG_ARGS[language],
            unsaved_files=[(file_label, contents)],
        )
    except ci.TranslationUnitLoadError as exc:
        raise ExtractionError(f"clang failed to parse {file_label}: {exc}") from exc

    found: list[tuple[str, int, int]] = []
    seen: set[tuple[int, int, str]] = set()

    def walk(node) -> None:
        if (
            node.kind in kinds
            and node.is_definition()
            and node.location.file is not None
            and node.location.file.name == file_label
        ):
            name = _qualified_name(node)
            key = (node.extent.start.line, node.extent.end.line, name)
            if key not in seen:
                seen.add(key)
                found.append((name, node.extent.start.line, node.extent.end.line))
            return  # function-level granularity: do not descend into bodies
        for child in node.get_children():
            walk(child)

    walk(tu.cursor)
    found.sort(key=lambda item: (item[1], item[2], item[0]))
    return found


# --- lexical brace-matching recovery ----------------------------------------

_CONTROL_KEYWORDS = {
    "if", "for", "while", "switch", "catch", "return", "sizeof", "alignof",
    "do", "else", "case", "goto", "new", "delete", "throw", "static_assert",
    "_Static_assert", "decltype", "typeid", "alignas", "asm", "__asm__",
}
_SCOPE_KEYWORDS = {"namespace", "class", "struct", "union"}


def _skip_group(toks: list[Token], i: int, open_text: str, close_text: str) -> int:
    """Return index just past the group opened at toks[i]."""
    depth = 0
    n = len(toks)
    while i < n:
        text = toks[i].text
        if text == open_text:
            depth += 1
        elif text == close_text:
            depth -= 1
            if depth == 0:
                return i + 1
        i += 1
    return n  # unbalanced: consume the rest


def _skip_directive(toks: list[Token], i: int) -> int:
    """Skip a preprocessor directive starting at the '#' token at toks[i]."""
    line = toks[i].line
    n = len(toks)
    j = i + 1
    while j < n:
        if toks[j].line == line:
            j += 1
        elif toks[j - 1].text == "\\":
            line = toks[j].line  # backslash continuation extends the directive
            j += 1
        else:
            break
    return j


def scan_function_candidates(tokens: list[Token]) -> list[tuple[str, int, int]]:
    """Heuristic top-level function finder over a lexical token stream.

    Walks braces at file scope (descending through namespace / extern-block /
    class bodies), arming on `name(...)` groups and emitting a candidate when
    an armed declaration reaches its body brace. Used both to recover regions
    clang missed and as the whole-file fallback when clang cannot parse.
    """
    toks = [t for t in tokens if t.kind is not TokenKind.COMMENT]
    n = len(toks)
    out: list[tuple[str, int, int]] = []

    i = 0
    scope_depth = 0  # descended namespace/extern/class braces
    decl_start: int | None = None
    armed_name: str | None = None
    saw_eq = False
    in_init_list = False
    decl_keywords: set[str] = set()

    def reset() -> None:
        nonlocal decl_start, armed_name, saw_eq, in_init_list, decl_keywords
        decl_start = None
        armed_name = None
        saw_eq = False
        in_init_list = False
        decl_keywords = set()

    def name_before_paren(j: int) -> str | None:
        """Name of the `ident(` group whose '(' sits at index j, or None."""
        k = j - 1
        if k < 0:
            return None
        tok = toks[k]
        if tok.kind is TokenKind.OP and tok.text in (")", "]"):
            return None
        if tok.kind is not TokenKind.IDENT:
            # operator symbol, e.g. `operator+ (` or `operator() (`
            back = k
            hops = 0
            while back >= 0 and hops < 4:
                if toks[back].kind is TokenKind.IDENT and toks[back].text == "operator":
                    return "operator" + "".join(t.text for t in toks[back + 1 : j])
                back -= 1
                hops += 1
            return None
        if tok.text in _CONTROL_KEYWORDS:
            return None
        parts = [tok.text]
        k -= 1
        while k >= 1 and toks[k].text == "::" and toks[k - 1].kind is TokenKind.IDENT:
            parts.append("::")
            parts.append(toks[k - 1].text)
            k -= 2
        if k >= 0 and toks[k].text == "~":
            parts.append("~")
        return "".join(reversed(parts))

    while i < n:
        tok = toks[i]
        text = tok.text

        if text == "#" and (i == 0 or toks[i - 1].line < tok.line):
            i = _skip_directive(toks, i)
            continue

        if decl_start is None:
            decl_start = i

        if text == ";":
            reset()
            i += 1
            continue

        if text == "=":
            saw_eq = True
            armed_name = None
            i += 1
            continue

        if text == "(":
            if not saw_eq:
                name = name_before_paren(i)
                if name is not None:
                    armed_name = name
                    in_init_list = False
            i = _skip_group(toks, i, "(", ")")
            continue

        if text == ":" and armed_name is not None:
            in_init_list = True
            i += 1
            continue

        if text == "{":
            if armed_name is not None:
                prev = toks[i - 1] if i > 0 else None
                if (
                    in_init_list
                    and prev is not None
                    and (prev.kind is TokenKind.IDENT or prev.text == ">")
                ):
                    # brace-initializer inside a constructor init list
                    i = _skip_group(toks, i, "{", "}")
                    continue
                end = _skip_group(toks, i, "{", "}")
                end_line = toks[end - 1].line if end - 1 < n else toks[-1].line
                start_line = toks[decl_start].line
                out.append((armed_name, start_line, end_line))
                reset()
                i = end
                continue
            if saw_eq or "enum" in decl_keywords:
                i = _skip_group(toks, i, "{", "}")
                continue
            if decl_keywords & _SCOPE_KEYWORDS or (
                "extern" in decl_keywords
                and i > 0
                and toks[i - 1].kind is TokenKind.STRING
            ):
                scope_depth += 1
                reset()
                i += 1
                continue
            i = _skip_group(toks, i, "{", "}")
            reset()
            continue

        if text == "}":
            if scope_depth > 0:
                scope_depth -= 1
            reset()
            i += 1
            continue

        if tok.kind is TokenKind.IDENT:
            decl_keywords.add(text)
        i += 1

    return out


# --- per-file extraction ------------------------------------------------------


@dataclass
class FileReport:
    """Extraction outcome for one file."""

    file_path: str
    status: str  # "ok" | "recovered" | "fallback" | "error"
    fragments: int = 0
    recovered: int = 0
    message: str = ""


def _slice_lines(source_lines: list[str], start_line: int, end_line: int) -> str:
    return "\n".join(source_lines[start_line - 1 : end_line])


def language_for(file_path: str) -> str | None:
    return _LANG_BY_EXT.get(Path(file_path).suffix.lower())


def extract_file(
    file_path: str,
    contents: str,
    mode: PreprocessMode = PreprocessMode.NONE,
    min_loc: int = 0,
) -> tuple[list[CodeFragment], FileReport]:
    """Extract function fragments from one file, with its per-file report."""
    if min_loc < 0:
        raise ValueError(f"min_loc must be >= 0, got {min_loc}")
    language = language_for(file_path)
    if language is None:
        raise ExtractionError(f"{file_path}: not a C/C++ source file")

    tokens = tokenize(contents)
    candidates = scan_function_candidates(tokens)

    clang_failed = False
    try:
        definitions = _clang_definitions(file_path, contents, language)
    except ExtractionError as exc:
        logger.warning("%s", exc)
        clang_failed = True
        definitions = []

    recovered = 0
    if clang_failed:
        definitions = candidates
        recovered = len(candidates)
    else:
        for name, start, end in candidates:
            if not any(start <= d_end and d_start <= end for _, d_start, d_end in definitions):
                definitions.append((name, start, end))
                recovered += 1
        definitions.sort(key=lambda item: (item[1], item[2], item[0]))

    source_lines = contents.split("\n")
    fragments: list[CodeFragment] = []
    for name, start, end in definitions:
        raw_text = _slice_lines(source_lines, start, end)
        loc = end - start + 1
        if loc < min_loc:
            continue
        frag_tokens = preprocess_tokens(raw_text, mode)
        if not frag_tokens:
            continue
        fragments.append(
            CodeFragment(
                fragment_id=fragment_id_for(file_path, name, start),
                file_path=file_path,
                function_name=name,
                start_line=start,
                end_line=end,
                loc=loc,
                tokens=frag_tokens,
                raw_text=raw_text,
            )
        )

    status = "fallback" if clang_failed else ("recovered" if recovered else "ok")
    report = FileReport(
        file_path=file_path,
        status=status,
        fragments=len(fragments),
        recovered=recovered,
    )
    if recovered:
        logger.info(
            "%s: %d fragment(s) via brace-matching recovery", file_path, recovered
        )
    return fragments, report


def extract_functions(
    file_path: str,
    contents: str,
    mode: PreprocessMode = PreprocessMode.NONE,
    min_loc: int = 0,
) -> list[CodeFragment]:
    """Extract every function definition with loc >= min_loc, in file order."""
    fragments, _ = extract_file(file_path, contents, mode, min_loc)
    return fragments


# --- corpus walking -------------------------------------------------------------


@dataclass
class ExtractionLog:
    reports: list[FileReport] = field(default_factory=list)

    @property
    def errors(self) -> list[FileReport]:
        return [r for r in self.reports if r.status == "error"]

    @property
    def recovered_files(self) -> list[FileReport]:
        return [r for r in self.reports if r.status in ("recovered", "fallback")]

    def summary(self) -> str:
        total = sum(r.fragments for r in self.reports)
        return (
            f"{len(self.reports)} file(s), {total} fragment(s), "
            f"{len(self.recovered_files)} recovered, {len(self.errors)} error(s)"
        )


def iter_source_files(corpus_dir: str | Path) -> list[Path]:
    root = Path(corpus_dir)
    files = [
        p
        for p in root.rglob("*")
        if p.is_file() and p.suffix.lower() in _LANG_BY_EXT
    ]
    files.sort(key=lambda p: p.relative_to(root).as_posix())
    return files


def extract_tree(
    corpus_dir: str | Path,
    mode: PreprocessMode = PreprocessMode.NONE,
    min_loc: int = 0,
    jobs: int = 1,
) -> tuple[list[CodeFragment], ExtractionLog]:
    """Extract all fragments under corpus_dir.

    Per-file extraction is pure and independent; failures are recorded in the
    log and never abort the run. The merged output is sorted by
    (file_path, start_line) regardless of worker scheduling.
    """
    root = Path(corpus_dir)
    paths = iter_source_files(root)

    def one(path: Path) -> tuple[list[CodeFragment], FileReport]:
        rel = path.relative_to(root).as_posix()
        try:
            data = path.read_bytes().decode("utf-8")
        except UnicodeDecodeError as exc:
            return [], FileReport(file_path=rel, status="error", message=str(exc))
        try:
            return extract_file(rel, data, mode, min_loc)
        except ExtractionError as exc:
            return [], FileReport(file_path=rel, status="error", message=str(exc))

    log = ExtractionLog()
    fragments: list[CodeFragment] = []
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, paths))
    else:
        results = [one(p) for p in paths]
    for frags, report in results:
        fragments.extend(frags)
        log.reports.append(report)
        if report.status == "error":
            logger.warning("extraction error in %s: %s", report.file_path, report.message)
    fragments.sort(key=lambda f: (f.file_path, f.start_line, f.fragment_id))
    return fragments, log


# --- fragment file format ------------------------------------------------------

_FIELDS = (
    "fragment_id",
    "file_path",
    "function_name",
    "start_line",
    "end_line",
    "loc",
    "tokens",
    "raw_text",
)


def fragment_to_json(fragment: CodeFragment) -> str:
    record = {name: getattr(fragment, name) for name in _FIELDS}
    return json.dumps(record, ensure_ascii=False, separators=(",", ":"))


def write_fragments(fragments: list[CodeFragment], out: str | Path) -> int:
    """Write one JSON record per line; refuses duplicate fragment_ids."""
    seen: set[str] = set()
    for fragment in fragments:
        if fragment.fragment_id in seen:
            raise FragmentFormatError(f"duplicate fragment_id: {fragment.fragment_id}")
        seen.add(fragment.fragment_id)
        fragment.validate()
    out = Path(out)
    tmp = out.with_name(out.name + ".tmp")
    with tmp.open("w", encoding="utf-8") as handle:
        for fragment in fragments:
            handle.write(fragment_to_json(fragment))
            handle.write("\n")
    os.replace(tmp, out)
    return len(fragments)


def read_fragments(path: str | Path) -> list[CodeFragment]:
    fragments: list[CodeFragment] = []
    seen: set[str] = set()
    with Path(path).open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                fragment = CodeFragment(**{name: record[name] for name in _FIELDS})
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise FragmentFormatError(f"{path}:{lineno}: bad fragment record: {exc}") from exc
            fragment.validate()
            if fragment.fragment_id in seen:
                raise FragmentFormatError(
                    f"{path}:{lineno}: duplicate fragment_id {fragment.fragment_id}"
                )
            seen.add(fragment.fragment_id)
            fragments.append(fragment)
    return fragments
