"""Lexical tokenizer for C and C++ source text.

Produces the token stream used for fragment token counts, preprocessing
modes, and brace-matching boundary recovery. Tokenization is
whitespace-insensitive by construction: whitespace only separates tokens
and never appears inside one, except inside comment bodies and string
literals where it is content.
"""

from __future__ import annotations

import re
from bisect import bisect_right
from dataclasses import dataclass
from enum import Enum


class TokenKind(Enum):
    COMMENT = "comment"
    STRING = "string"
    CHAR = "char"
    NUMBER = "number"
    IDENT = "ident"
    OP = "op"


# Longest-first so e.g. "<<=" wins over "<<" and "<".
_OPERATORS = [
    "<<=", ">>=", "<=>", "...", "->*",
    "::", "->", "++", "--", "<<", ">>", "<=", ">=", "==", "!=",
    "&&", "||", "+=", "-=", "*=", "/=", "%=", "&=", "|=", "^=", "##", ".*",
    "{", "}", "(", ")", "[", "]", ";", ",", "~", "?", ":", ".",
    "<", ">", "+", "-", "*", "/", "%", "&", "|", "^", "!", "=", "#", "@", "\\",
]

_TOKEN_RE = re.compile(
    r"""
    (?P<comment> //[^\n]* | /\*.*?\*/ )
  | (?P<rawstring> (?:u8|u|U|L)?R"(?P<rsdelim>[^()\\\s]{0,16})\(.*?\)(?P=rsdelim)" )
  | (?P<string> (?:u8|u|U|L)?"(?:\\.|[^"\\\n])*" )
  | (?P<char> (?:u8|u|U|L)?'(?:\\.|[^'\\\n])*' )
  | (?P<number> \.?[0-9](?:[eEpP][+-]|[0-9a-zA-Z_.'])* )
  | (?P<ident> [A-Za-z_$][A-Za-z0-9_$]* )
  | (?P<op> %s )
    """
    % "|".join(re.escape(op) for op in _OPERATORS),
    re.VERBOSE | re.DOTALL,
)

_KIND_BY_GROUP = {
    "comment": TokenKind.COMMENT,
    "rawstring": TokenKind.STRING,
    "string": TokenKind.STRING,
    "char": TokenKind.CHAR,
    "number": TokenKind.NUMBER,
    "ident": TokenKind.IDENT,
    "op": TokenKind.OP,
}

_WS_RUN = re.compile(r"\s+")


@dataclass(frozen=True)
class Token:
    kind: TokenKind
    text: str
    line: int  # 1-based line of the token's first character


def _line_starts(text: str) -> list[int]:
    starts = [0]
    for i, ch in enumerate(text):
        if ch == "\n":
            starts.append(i + 1)
    return starts


def tokenize(text: str) -> list[Token]:
    """Lex source text into tokens with 1-based line numbers.

    Unlexable characters (stray bytes, unterminated literals) are skipped;
    lexing never raises on malformed input.
    """
    starts = _line_starts(text)
    tokens: list[Token] = []
    pos = 0
    n = len(text)
    while pos < n:
        m = _TOKEN_RE.search(text, pos)
        if m is None:
            break
        group = m.lastgroup
        if group == "rsdelim":  # inner group of rawstring
            group = "rawstring"
        tokens.append(
            Token(
                kind=_KIND_BY_GROUP[group],
                text=m.group(),
                line=bisect_right(starts, m.start()),
            )
        )
        pos = m.end()
    return tokens


def token_texts(
    tokens: list[Token],
    *,
    keep_comments: bool = True,
    collapse_comment_whitespace: bool = False,
) -> list[str]:
    """Project a token stream onto the text sequence used downstream.

    collapse_comment_whitespace rewrites each retained comment so that any
    internal whitespace run (including newlines and indentation) becomes a
    single space, which makes the sequence invariant under reindentation
    and blank-line insertion inside comment bodies.
    """
    out: list[str] = []
    for tok in tokens:
        if tok.kind is TokenKind.COMMENT:
            if not keep_comments:
                continue
            if collapse_comment_whitespace:
                out.append(_WS_RUN.sub(" ", tok.text).strip())
                continue
        out.append(tok.text)
    return out
