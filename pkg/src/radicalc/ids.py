"""Ideographic Description Sequence (IDS) parsing.

An IDS describes the spatial composition of a CJK character in prefix
notation: structure operators from the U+2FF0..U+2FFB block, each taking
two or three operands, followed by the operand subtrees.  Decomposition
dictionaries (cjkvi ids.txt and its extensions) store one such sequence
per character, so everything here is line-oriented UTF-8 plumbing plus a
small recursive-descent parser.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import DepthExceeded, EmptyTable, FileUnreadable, TrailingTokens, UnexpectedEnd

# Structure operators and their operand counts.  U+2FF2 (left-middle-right)
# and U+2FF3 (above-middle-below) are ternary, the rest binary.
IDC_ARITY: dict[str, int] = {
    "⿰": 2, "⿱": 2, "⿲": 3, "⿳": 3,
    "⿴": 2, "⿵": 2, "⿶": 2, "⿷": 2,
    "⿸": 2, "⿹": 2, "⿺": 2, "⿻": 2,
}

MAX_DEPTH = 32

OP = "op"
COMPONENT = "component"
OPAQUE = "opaque"

# Placeholders the dictionaries use for components with no encoding:
# the fullwidth question mark, plus anything in a Private Use Area.
_PUA_RANGES = ((0xE000, 0xF8FF), (0xF0000, 0xFFFFD), (0x100000, 0x10FFFD))


def is_opaque_scalar(ch: str) -> bool:
    if ch == "？":
        return True
    cp = ord(ch)
    return any(lo <= cp <= hi for lo, hi in _PUA_RANGES)


@dataclass(frozen=True)
class IdsToken:
    """One lexical unit of an IDS string.

    ``kind`` is one of OP / COMPONENT / OPAQUE; ``text`` is the exact span
    of input it covers, so joining token texts reproduces the input.
    """

    kind: str
    text: str

    @property
    def arity(self) -> int:
        return IDC_ARITY[self.text]


@dataclass(frozen=True)
class IdsNode:
    """Composition tree node.

    Leaves carry a component (or opaque placeholder) in ``value`` and have
    no children; internal nodes carry a structure operator whose arity
    equals the child count.
    """

    value: str
    children: tuple["IdsNode", ...] = ()

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def leaves(self):
        """Yield leaf values in prefix order."""
        if self.is_leaf:
            yield self.value
        else:
            for child in self.children:
                yield from child.leaves()


@dataclass(frozen=True)
class IdsEntry:
    codepoint: int
    char: str
    ids: IdsNode
    source_tags: str | None = None


@dataclass
class DecompositionTable:
    """Character -> decomposition variants, as loaded from a dictionary file.

    A character may carry several variant sequences; consumers that need a
    single answer take the first listed one (see :meth:`first`).
    """

    entries: dict[str, list[IdsEntry]] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def first(self, char: str) -> IdsEntry | None:
        variants = self.entries.get(char)
        return variants[0] if variants else None

    def __len__(self) -> int:
        return len(self.entries)


def tokenize_ids(text: str) -> list[IdsToken]:
    """Split an IDS string into operator / component / opaque tokens.

    Never raises: unknown characters are components, `&name;` entity
    references and unencoded placeholders become opaque tokens verbatim.
    """
    tokens: list[IdsToken] = []
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch in IDC_ARITY:
            tokens.append(IdsToken(OP, ch))
            i += 1
        elif ch == "&":
            end = text.find(";", i + 1)
            if end == -1:
                tokens.append(IdsToken(COMPONENT, ch))
                i += 1
            else:
                tokens.append(IdsToken(OPAQUE, text[i:end + 1]))
                i = end + 1
        elif is_opaque_scalar(ch):
            tokens.append(IdsToken(OPAQUE, ch))
            i += 1
        else:
            tokens.append(IdsToken(COMPONENT, ch))
            i += 1
    return tokens


def parse_ids(tokens: list[IdsToken]) -> IdsNode:
    """Parse a token list into a composition tree, consuming all tokens.

    Raises UnexpectedEnd when an operator lacks operands, TrailingTokens
    when input remains after a complete tree, DepthExceeded past
    MAX_DEPTH nesting.
    """
    if not tokens:
        raise UnexpectedEnd("empty token list")

    pos = 0

    def take(depth: int) -> IdsNode:
        nonlocal pos
        if depth > MAX_DEPTH:
            raise DepthExceeded(f"nesting deeper than {MAX_DEPTH}")
        if pos >= len(tokens):
            raise UnexpectedEnd("operator lacks operands")
        tok = tokens[pos]
        pos += 1
        if tok.kind != OP:
            return IdsNode(tok.text)
        children = tuple(take(depth + 1) for _ in range(tok.arity))
        return IdsNode(tok.text, children)

    node = take(1)
    if pos != len(tokens):
        raise TrailingTokens(f"{len(tokens) - pos} token(s) after a complete tree")
    return node


def serialize_ids(node: IdsNode) -> str:
    """Render a tree back to its prefix-notation string."""
    if node.is_leaf:
        return node.value
    return node.value + "".join(serialize_ids(c) for c in node.children)


def parse_ids_text(text: str) -> IdsNode:
    return parse_ids(tokenize_ids(text))


def validate_node(node: IdsNode, _depth: int = 1) -> None:
    """Check structural invariants; raises ValueError on violation."""
    if _depth > MAX_DEPTH:
        raise DepthExceeded(f"nesting deeper than {MAX_DEPTH}")
    if node.is_leaf:
        toks = tokenize_ids(node.value)
        if len(toks) != 1 or toks[0].kind == OP:
            raise ValueError(f"leaf value {node.value!r} is not a single component")
    else:
        arity = IDC_ARITY.get(node.value)
        if arity is None:
            raise ValueError(f"internal node value {node.value!r} is not a structure operator")
        if len(node.children) != arity:
            raise ValueError(
                f"operator {node.value!r} needs {arity} children, has {len(node.children)}"
            )
        for child in node.children:
            validate_node(child, _depth + 1)


def _strip_source_tags(ids_field: str) -> tuple[str, str | None]:
    # Trailing bracketed annotations, e.g. "⿱彗心[GTKV]"; keep bracket form.
    tags = []
    s = ids_field.rstrip()
    while s.endswith("]"):
        start = s.rfind("[")
        if start <= 0:
            break
        tags.append(s[start:])
        s = s[:start].rstrip()
    return s, "".join(reversed(tags)) or None


def load_ids_table(path: str) -> DecompositionTable:
    """Load a tab-separated decomposition dictionary.

    Expected line layout: ``U+XXXX<TAB>char<TAB>ids[<TAB>ids...]``.
    Comment lines start with ``#`` or ``;;``.  Malformed lines are recorded
    as warnings and skipped, never fatal; a file with zero valid entries
    raises EmptyTable.
    """
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise FileUnreadable(f"{path}: {exc}") from exc

    table = DecompositionTable()
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip("\n")
        if not line.strip() or line.startswith("#") or line.startswith(";;"):
            continue
        fields = line.split("\t")
        if len(fields) < 3:
            table.warnings.append(f"line {lineno}: expected at least 3 tab-separated fields")
            continue
        cp_field, char = fields[0].strip(), fields[1].strip()
        if not cp_field.upper().startswith("U+"):
            table.warnings.append(f"line {lineno}: bad codepoint field {cp_field!r}")
            continue
        try:
            codepoint = int(cp_field[2:], 16)
        except ValueError:
            table.warnings.append(f"line {lineno}: bad codepoint field {cp_field!r}")
            continue
        if len(char) != 1 or ord(char) != codepoint:
            table.warnings.append(f"line {lineno}: char field {char!r} does not match {cp_field}")
            continue
        parsed_any = False
        for ids_field in fields[2:]:
            ids_text, tags = _strip_source_tags(ids_field)
            if not ids_text:
                continue
            try:
                node = parse_ids_text(ids_text)
            except (UnexpectedEnd, TrailingTokens, DepthExceeded) as exc:
                table.warnings.append(f"line {lineno}: unparseable IDS {ids_text!r}: {exc}")
                continue
            entry = IdsEntry(codepoint=codepoint, char=char, ids=node, source_tags=tags)
            table.entries.setdefault(char, []).append(entry)
            parsed_any = True
        if not parsed_any:
            table.warnings.append(f"line {lineno}: no usable IDS field")

    if not table.entries:
        raise EmptyTable(f"{path}: no valid entries")
    return table
