"""Examples, trees, head-lexicalization and the line-delimited corpus format.

A constituency tree is a nested tuple of token indices: a leaf is an
``int`` and an internal node is a ``(left, right)`` pair.  Dependency heads
are a tuple of 1-based head positions with ``0`` marking the root.
"""

from __future__ import annotations

import enum
import json
import random
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence, Union

ConstTree = Union[int, tuple]

MASK = "*MASK*"
UNK = "<unk>"


class Label(enum.IntEnum):
    PLURAL = 0
    SINGULAR = 1

    @property
    def code(self) -> str:
        return "sg" if self is Label.SINGULAR else "pl"

    @classmethod
    def from_code(cls, code: str) -> "Label":
        try:
            return {"sg": cls.SINGULAR, "pl": cls.PLURAL}[code]
        except KeyError:
            raise ValueError(f"label must be 'sg' or 'pl', got {code!r}") from None


class TreeError(ValueError):
    pass


class CorpusFormatError(ValueError):
    pass


# --------------------------------------------------------------------------
# constituency trees


def leaves(tree: ConstTree) -> list[int]:
    out, stack = [], [tree]
    while stack:
        t = stack.pop()
        if isinstance(t, tuple):
            stack.append(t[1])
            stack.append(t[0])
        else:
            out.append(t)
    return out


def check_tree(tree: ConstTree, n_tokens: int) -> None:
    """Raise TreeError unless ``tree`` is strictly binary over ``0..n-1``."""
    stack = [tree]
    while stack:
        t = stack.pop()
        if isinstance(t, tuple):
            if len(t) != 2:
                raise TreeError(f"internal node has {len(t)} children, expected 2")
            stack.extend(t)
        elif not isinstance(t, int) or isinstance(t, bool):
            raise TreeError(f"leaf must be a token index, got {t!r}")
    if leaves(tree) != list(range(n_tokens)):
        raise TreeError(f"leaves are not 0..{n_tokens - 1} in order")


def serialize_tree(tree: ConstTree) -> str:
    if isinstance(tree, tuple):
        return f"({serialize_tree(tree[0])} {serialize_tree(tree[1])})"
    return str(tree)


def parse_tree(s: str, n_tokens: int | None = None) -> ConstTree:
    """Inverse of :func:`serialize_tree`.  Errors report the byte offset."""
    data = s.encode("utf-8")
    pos = 0

    def fail(msg, at):
        raise TreeError(f"{msg} at byte {at}")

    def skip_ws():
        nonlocal pos
        while pos < len(data) and data[pos] in b" \t\n\r":
            pos += 1

    def node():
        nonlocal pos
        skip_ws()
        if pos >= len(data):
            fail("unexpected end of input", pos)
        if data[pos] == ord("("):
            start = pos
            pos += 1
            kids = []
            while True:
                skip_ws()
                if pos >= len(data):
                    fail("unbalanced bracket opened", start)
                if data[pos] == ord(")"):
                    pos += 1
                    break
                kids.append(node())
            if len(kids) != 2:
                fail(f"node with {len(kids)} children (binary required)", start)
            return (kids[0], kids[1])
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            fail(f"unexpected character {chr(data[pos])!r}", pos)
        idx = int(data[start:pos])
        if n_tokens is not None and idx >= n_tokens:
            fail(f"leaf {idx} out of range for {n_tokens} tokens", start)
        return idx

    tree = node()
    skip_ws()
    if pos != len(data):
        fail("trailing characters", pos)
    if n_tokens is not None:
        try:
            check_tree(tree, n_tokens)
        except TreeError as e:
            raise TreeError(f"{e} at byte 0") from None
    return tree


# --------------------------------------------------------------------------
# dependency heads


def check_heads(heads: Sequence[int]) -> None:
    n = len(heads)
    roots = [i for i, h in enumerate(heads) if h == 0]
    if len(roots) != 1:
        raise TreeError(f"dependency heads need exactly one root, found {len(roots)}")
    for i, h in enumerate(heads):
        if not 0 <= h <= n or h == i + 1:
            raise TreeError(f"token {i} has invalid head {h}")
    for i in range(n):
        depth_in_dep_tree(heads, i)


def depth_in_dep_tree(heads: Sequence[int], token_index: int) -> int:
    """Number of head links from ``token_index`` up to the root."""
    n = len(heads)
    if not 0 <= token_index < n:
        raise IndexError(f"token index {token_index} out of range for {n} tokens")
    depth, i = 0, token_index
    while heads[i] != 0:
        i = heads[i] - 1
        depth += 1
        if depth > n:
            raise TreeError(f"cycle in dependency heads reached from token {token_index}")
    return depth


def dep_children(heads: Sequence[int]) -> list[list[int]]:
    kids: list[list[int]] = [[] for _ in heads]
    for i, h in enumerate(heads):
        if h:
            kids[h - 1].append(i)
    return kids


# --------------------------------------------------------------------------
# head-lexicalized trees


@dataclass(frozen=True)
class HeadLexNode:
    head: int
    left: "HeadLexNode | None" = None
    right: "HeadLexNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    def nodes(self):
        stack = [self]
        while stack:
            n = stack.pop()
            yield n
            if not n.is_leaf:
                stack.append(n.right)
                stack.append(n.left)

    def strip(self) -> ConstTree:
        if self.is_leaf:
            return self.head
        return (self.left.strip(), self.right.strip())


@lru_cache(maxsize=65536)
def head_lexicalize(tree: ConstTree, heads: tuple) -> HeadLexNode:
    """Tag every constituent with its shallowest word in the dependency tree.

    Ties on depth go to the leftmost word.
    """
    heads = tuple(heads)
    n = len(leaves(tree))
    if n != len(heads):
        raise TreeError(f"constituency tree covers {n} tokens but there are {len(heads)} heads")
    depth = [depth_in_dep_tree(heads, i) for i in range(n)]

    def build(t):
        if not isinstance(t, tuple):
            return HeadLexNode(t)
        left, right = build(t[0]), build(t[1])
        # (depth, position) ordering implements the leftmost tie-break
        head = min(left.head, right.head, key=lambda w: (depth[w], w))
        return HeadLexNode(head, left, right)

    return build(tree)


# --------------------------------------------------------------------------
# examples


@dataclass(frozen=True)
class Example:
    tokens: tuple
    mask_index: int
    label: Label
    const_tree: ConstTree
    dep_heads: tuple
    attractors: int = 0

    @property
    def sentence(self) -> str:
        return " ".join(self.tokens)

    def validate(self) -> None:
        n = len(self.tokens)
        if n == 0:
            raise ValueError("tokens: empty sentence")
        if not 0 <= self.mask_index < n:
            raise ValueError(f"mask_index: {self.mask_index} out of range for {n} tokens")
        if len(self.dep_heads) != n:
            raise ValueError(f"heads: {len(self.dep_heads)} entries for {n} tokens")
        try:
            check_heads(self.dep_heads)
        except TreeError as e:
            raise ValueError(f"heads: {e}") from None
        if self.dep_heads[self.mask_index] != 0:
            raise ValueError("heads: masked verb is not the dependency root")
        try:
            check_tree(self.const_tree, n)
        except TreeError as e:
            raise ValueError(f"const_tree: {e}") from None
        if self.attractors < 0:
            raise ValueError(f"attractors: negative count {self.attractors}")

    def to_record(self) -> dict:
        return {
            "tokens": list(self.tokens),
            "mask_index": self.mask_index,
            "label": self.label.code,
            "const_tree": serialize_tree(self.const_tree),
            "heads": list(self.dep_heads),
            "attractors": self.attractors,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Example":
        fields = ("tokens", "mask_index", "label", "const_tree", "heads", "attractors")
        for f in fields:
            if f not in rec:
                raise ValueError(f"{f}: missing field")
        tokens = rec["tokens"]
        if not isinstance(tokens, list) or not all(isinstance(t, str) for t in tokens):
            raise ValueError("tokens: expected an array of strings")
        for f in ("mask_index", "attractors"):
            if not isinstance(rec[f], int) or isinstance(rec[f], bool):
                raise ValueError(f"{f}: expected an integer")
        heads = rec["heads"]
        if not isinstance(heads, list) or not all(isinstance(h, int) for h in heads):
            raise ValueError("heads: expected an array of integers")
        if not isinstance(rec["const_tree"], str):
            raise ValueError("const_tree: expected a bracketed string")
        try:
            tree = parse_tree(rec["const_tree"], len(tokens))
        except TreeError as e:
            raise ValueError(f"const_tree: {e}") from None
        ex = cls(
            tokens=tuple(t.lower() for t in tokens),
            mask_index=rec["mask_index"],
            label=Label.from_code(rec["label"]),
            const_tree=tree,
            dep_heads=tuple(heads),
            attractors=rec["attractors"],
        )
        ex.validate()
        return ex


def write_corpus(path, examples: Iterable[Example]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_record(), ensure_ascii=False) + "\n")


def read_corpus(path) -> list[Example]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusFormatError(f"{path}:{lineno}: malformed JSON ({e.msg})") from None
            if not isinstance(rec, dict):
                raise CorpusFormatError(f"{path}:{lineno}: record is not an object")
            try:
                out.append(Example.from_record(rec))
            except ValueError as e:
                raise CorpusFormatError(f"{path}:{lineno}: {e}") from None
    return out


# --------------------------------------------------------------------------
# corpus manipulation


def balance_labels(examples: Sequence[Example], rng_seed: int) -> list[Example]:
    """Downsample the majority label so the label counts differ by at most one."""
    by_label = {lab: [e for e in examples if e.label == lab] for lab in Label}
    if not by_label[Label.SINGULAR] or not by_label[Label.PLURAL]:
        raise ValueError("balance_labels needs both labels present")
    rng = random.Random(rng_seed)
    k = min(len(v) for v in by_label.values())
    kept = []
    for lab in (Label.SINGULAR, Label.PLURAL):
        group = by_label[lab]
        kept.extend(group if len(group) == k else rng.sample(group, k))
    rng.shuffle(kept)
    return kept


ATTRACTOR_KEYS = ("0", "1", "2", "3", "4+")


def attractor_key(n: int) -> str:
    return "4+" if n >= 4 else str(n)


def split_by_attractors(examples: Iterable[Example]) -> dict[str, list[Example]]:
    out: dict[str, list[Example]] = {k: [] for k in ATTRACTOR_KEYS}
    for ex in examples:
        out[attractor_key(ex.attractors)].append(ex)
    return out


def any_attractors(split: dict[str, list[Example]]) -> list[Example]:
    return [e for k in ATTRACTOR_KEYS[1:] for e in split[k]]


def label_counts(examples: Iterable[Example]) -> Counter:
    return Counter(e.label for e in examples)


# --------------------------------------------------------------------------
# vocabulary


@dataclass
class Vocab:
    words: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if self.words[:2] != [MASK, UNK]:
            raise ValueError("vocab must start with the reserved *MASK* and UNK entries")
        if len(set(self.words)) != len(self.words):
            raise ValueError("vocab has duplicate entries")
        self.index = {w: i for i, w in enumerate(self.words)}

    @classmethod
    def build(cls, words: Iterable[str]) -> "Vocab":
        rest = sorted(set(words) - {MASK, UNK})
        return cls([MASK, UNK] + rest)

    @property
    def mask_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    def __len__(self):
        return len(self.words)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.words == other.words

    def id(self, word: str) -> int:
        return self.index.get(word, 1)

    def encode(self, tokens: Sequence[str], mask_index: int | None = None) -> list[int]:
        ids = [self.id(t) for t in tokens]
        if mask_index is not None:
            ids[mask_index] = 0
        return ids
