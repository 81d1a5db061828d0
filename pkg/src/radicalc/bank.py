"""Recursive radical decomposition and multi-hot encoding.

A character's bag of radicals is the set of every component reached by
recursively expanding its first decomposition variant: intermediate
components and atoms alike, deduplicated, never the character itself.
The union of those bags over a charset is the radical bank; indexing into
it turns each character into a binary presence vector, with non-CJK
characters mapped to the zero vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyBank, FileUnreadable
from .ids import DecompositionTable, IdsNode

# CJK Unified Ideographs: base block plus extensions A..I.
_CJK_RANGES = (
    (0x3400, 0x4DBF),
    (0x4E00, 0x9FFF),
    (0x20000, 0x2A6DF),
    (0x2A700, 0x2B73F),
    (0x2B740, 0x2B81F),
    (0x2B820, 0x2CEAF),
    (0x2CEB0, 0x2EBEF),
    (0x2EBF0, 0x2EE5F),
    (0x30000, 0x3134F),
    (0x31350, 0x323AF),
)

# Recursive expansion across table entries; genuine chains are shallow.
MAX_EXPANSION_DEPTH = 32

PAD = "<pad>"
EOS = "<eos>"
UNK = "<unk>"


def is_cjk(ch: str) -> bool:
    if len(ch) != 1:
        return False
    cp = ord(ch)
    return any(lo <= cp <= hi for lo, hi in _CJK_RANGES)


def decompose_char(
    c: str,
    table: DecompositionTable,
    warnings: list[str] | None = None,
) -> set[str]:
    """Bag of radicals for one character.

    A character without a usable entry is an atom and its own bag.  A
    component that re-enters its own expansion (cyclic table) is treated
    as an atom and recorded as a warning.
    """
    entry = table.first(c)
    if entry is None:
        return {c}

    bag: set[str] = set()
    stack = {c}

    def expand(node: IdsNode, depth: int) -> None:
        for leaf in node.leaves():
            bag.add(leaf)
            if leaf in stack:
                if warnings is not None:
                    warnings.append(f"cyclic decomposition at {leaf!r}")
                continue
            sub = table.first(leaf)
            if sub is None:
                continue
            if depth >= MAX_EXPANSION_DEPTH:
                if warnings is not None:
                    warnings.append(f"expansion depth cap reached at {leaf!r}")
                continue
            stack.add(leaf)
            expand(sub.ids, depth + 1)
            stack.discard(leaf)

    expand(entry.ids, 1)
    return bag


def _radical_sort_key(r: str):
    # Single scalars by codepoint; opaque multi-character atoms last.
    if len(r) == 1:
        return (0, ord(r), r)
    return (1, 0, r)


@dataclass
class RadicalBank:
    """Ordered list of all distinct radicals over a charset."""

    radicals: list[str]
    index: dict[str, int] = field(init=False)

    def __post_init__(self) -> None:
        self.index = {r: i for i, r in enumerate(self.radicals)}
        if len(self.index) != len(self.radicals):
            raise ValueError("duplicate radicals in bank")

    @property
    def size(self) -> int:
        return len(self.radicals)


@dataclass
class Charset:
    """Recognizable characters plus trailing PAD/EOS/UNK class ids."""

    chars: list[str]
    index: dict[str, int] = field(init=False)

    def __post_init__(self) -> None:
        self.index = {c: i for i, c in enumerate(self.chars)}
        if len(self.index) != len(self.chars):
            raise ValueError("duplicate characters in charset")

    @property
    def pad_id(self) -> int:
        return len(self.chars)

    @property
    def eos_id(self) -> int:
        return len(self.chars) + 1

    @property
    def unk_id(self) -> int:
        return len(self.chars) + 2

    @property
    def num_classes(self) -> int:
        return len(self.chars) + 3

    def class_of(self, ch: str) -> int:
        return self.index.get(ch, self.unk_id)

    def char_of(self, class_id: int) -> str:
        if class_id < len(self.chars):
            return self.chars[class_id]
        return {self.pad_id: PAD, self.eos_id: EOS, self.unk_id: UNK}[class_id]


def build_bank(
    charset: Charset,
    table: DecompositionTable,
    warnings: list[str] | None = None,
) -> RadicalBank:
    """Union the bags of every CJK charset member into an ordered bank."""
    union: set[str] = set()
    any_cjk = False
    for ch in charset.chars:
        if not is_cjk(ch):
            continue
        any_cjk = True
        union |= decompose_char(ch, table, warnings)
    if not any_cjk:
        raise EmptyBank("charset contains no CJK character")
    return RadicalBank(sorted(union, key=_radical_sort_key))


def encode_char(
    c: str,
    bank: RadicalBank,
    table: DecompositionTable,
    warnings: list[str] | None = None,
) -> np.ndarray:
    """Multi-hot radical presence vector; zero vector for non-CJK input."""
    bits = np.zeros(bank.size, dtype=np.uint8)
    if not is_cjk(c):
        return bits
    for radical in decompose_char(c, table, warnings):
        idx = bank.index.get(radical)
        if idx is None:
            if warnings is not None:
                warnings.append(f"radical {radical!r} of {c!r} not in bank")
            continue
        bits[idx] = 1
    return bits


def build_bor_matrix(
    charset: Charset,
    bank: RadicalBank,
    table: DecompositionTable,
    warnings: list[str] | None = None,
) -> np.ndarray:
    """Stack one presence row per class id; PAD/EOS/UNK rows stay zero."""
    rows = np.zeros((charset.num_classes, bank.size), dtype=np.uint8)
    for i, ch in enumerate(charset.chars):
        rows[i] = encode_char(ch, bank, table, warnings)
    return rows


# --- file formats ---

def load_charset(path: str) -> Charset:
    """One character per line, UTF-8; blank lines skipped."""
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise FileUnreadable(f"{path}: {exc}") from exc
    chars = []
    for lineno, line in enumerate(lines, start=1):
        if not line:
            continue
        if len(line) != 1:
            raise ValueError(f"{path}:{lineno}: expected one character per line, got {line!r}")
        chars.append(line)
    return Charset(chars)


def save_charset(charset: Charset, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ch in charset.chars:
            fh.write(ch + "\n")


def save_bank(bank: RadicalBank, path: str) -> None:
    """Header line ``D=<n>`` then one radical per line."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"D={bank.size}\n")
        for r in bank.radicals:
            fh.write(r + "\n")


def load_bank(path: str) -> RadicalBank:
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise FileUnreadable(f"{path}: {exc}") from exc
    if not lines or not lines[0].startswith("D="):
        raise ValueError(f"{path}: missing D=<n> header")
    declared = int(lines[0][2:])
    radicals = [line for line in lines[1:] if line]
    if len(radicals) != declared:
        raise ValueError(f"{path}: header says {declared} radicals, file has {len(radicals)}")
    return RadicalBank(radicals)


def save_bor_matrix(matrix: np.ndarray, path: str) -> None:
    """Rows of tab-separated 0/1 for inspection and diffing."""
    with open(path, "w", encoding="utf-8") as fh:
        for row in matrix:
            fh.write("\t".join(str(int(v)) for v in row) + "\n")
