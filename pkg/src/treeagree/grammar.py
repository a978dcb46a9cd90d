"""The agreement PCFG, derivation sampling, and labelled corpus generation."""

from __future__ import annotations

import csv
import io
import random
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from .treebank import (
    Example,
    Label,
    Vocab,
    attractor_key,
    ATTRACTOR_KEYS,
)

VARIANTS = ("test", "augmentation")

# (Adj NP, NP PP, Noun) expansion weights for NP_s / NP_p
NP_WEIGHTS = {
    "test": (0.1, 0.1, 0.8),
    "augmentation": (0.69, 0.04, 0.27),
}

LEXICON = {
    "Det": ("the",),
    "Noun_s": (
        "plane", "plant", "bear", "bird", "car", "dancer", "singer",
        "president", "squirrel", "cloud", "actor", "doctor", "nurse", "chair",
        "student", "teacher", "fern",
    ),
    "Noun_p": (
        "planes", "plants", "bears", "birds", "cars", "dancers", "singers",
        "presidents", "squirrels", "clouds", "actors", "doctors", "nurses",
        "chairs", "students", "teachers", "ferns",
    ),
    "Verb_s": (
        "eats", "pleases", "loves", "likes", "hates", "destroys", "creates",
        "fights", "bites", "shoots", "arrests", "takes", "leaves", "buys",
        "brings", "carries", "kicks",
    ),
    "Verb_p": (
        "eat", "please", "love", "like", "hate", "destroy", "create", "fight",
        "bite", "shoot", "arrest", "take", "leave", "buy", "bring", "carry",
        "kick",
    ),
    "Adj": (
        "fancy", "green", "handsome", "pretty", "large", "big", "scary", "nice",
        "happy", "sad", "dangerous", "evil", "sloppy",
    ),
    "Prep": ("on", "by", "near", "around"),
}

PRETERMINALS = tuple(LEXICON)

# Maximum nesting of PPs inside noun phrases; deeper derivations are resampled.
MAX_EMBEDDING = 4


@dataclass(frozen=True)
class Production:
    lhs: str
    rhs: tuple
    prob: float


@dataclass(frozen=True)
class Grammar:
    variant: str
    productions: tuple
    lexicon: dict

    def expansions(self, lhs: str) -> list[Production]:
        return [p for p in self.productions if p.lhs == lhs]

    @property
    def nonterminals(self) -> tuple:
        return tuple(dict.fromkeys(p.lhs for p in self.productions))

    def lexical_productions(self) -> list[Production]:
        return [
            Production(tag, (w,), 1.0 / len(words))
            for tag, words in self.lexicon.items()
            for w in words
        ]


def load_builtin_grammar(variant: str = "test") -> Grammar:
    if variant not in VARIANTS:
        raise ValueError(f"unknown grammar variant {variant!r}; expected one of {VARIANTS}")
    adj, pp, noun = NP_WEIGHTS[variant]
    rules = [
        ("S", ("DetP_s", "VP_s"), 0.5),
        ("S", ("DetP_p", "VP_p"), 0.5),
        ("DetP_s", ("Det", "NP_s"), 1.0),
        ("DetP_p", ("Det", "NP_p"), 1.0),
    ]
    for n in ("s", "p"):
        rules += [
            (f"NP_{n}", ("Adj", f"NP_{n}"), adj),
            (f"NP_{n}", (f"NP_{n}", "PP"), pp),
            (f"NP_{n}", (f"Noun_{n}",), noun),
        ]
    rules += [
        ("PP", ("Prep", "DetP_s"), 0.5),
        ("PP", ("Prep", "DetP_p"), 0.5),
        ("VP_s", ("Verb_s", "DetP_s"), 0.5),
        ("VP_s", ("Verb_s", "DetP_p"), 0.5),
        ("VP_p", ("Verb_p", "DetP_s"), 0.5),
        ("VP_p", ("Verb_p", "DetP_p"), 0.5),
    ]
    prods = tuple(Production(l, r, p) for l, r, p in rules)
    return Grammar(variant, prods, dict(LEXICON))


def builtin_vocab() -> Vocab:
    return Vocab.build(w for words in LEXICON.values() for w in words)


# --------------------------------------------------------------------------
# derivations


@dataclass
class DNode:
    """Derivation tree node; preterminal nodes hold the token position."""

    label: str
    children: list = field(default_factory=list)
    index: int | None = None
    word: str | None = None

    @property
    def is_preterminal(self) -> bool:
        return self.word is not None


@dataclass
class Derivation:
    root: DNode
    productions: list          # (lhs, rhs) pairs in leftmost-derivation order
    tokens: list
    tags: list
    subject_index: int
    verb_index: int
    object_index: int

    @property
    def sentence(self) -> str:
        return " ".join(self.tokens)


class _Resample(Exception):
    pass


@dataclass
class SampleStats:
    samples: int = 0
    cap_resamples: int = 0


def _pick(rng: random.Random, prods: Sequence[Production]) -> Production:
    r = rng.random()
    acc = 0.0
    for p in prods:
        acc += p.prob
        if r < acc:
            return p
    return prods[-1]


def _phrase_head(node: DNode) -> DNode:
    """Preterminal that heads ``node`` under the construction's head rules."""
    while not node.is_preterminal:
        node = node.children[_head_child(node)]
    return node


def _head_child(node: DNode) -> int:
    lab = node.label
    if lab == "S":
        return 1
    if lab.startswith("DetP"):
        return 1
    if lab.startswith("NP"):
        # Adj NP -> NP ; NP PP -> NP ; Noun -> Noun
        return 1 if node.children[0].label == "Adj" else 0
    if lab == "PP" or lab.startswith("VP"):
        return 0
    raise ValueError(f"no head rule for {lab!r}")


def _finish(root: DNode) -> Derivation:
    tokens, tags, prods = [], [], []

    def walk(n: DNode):
        if n.is_preterminal:
            n.index = len(tokens)
            tokens.append(n.word)
            tags.append(n.label)
            prods.append((n.label, (n.word,)))
            return
        prods.append((n.label, tuple(c.label for c in n.children)))
        for c in n.children:
            walk(c)

    walk(root)
    if root.label != "S" or len(root.children) != 2:
        raise ValueError("derivation root must be S -> DetP VP")
    subj_np, vp = root.children
    verb = vp.children[0]
    return Derivation(
        root=root,
        productions=prods,
        tokens=tokens,
        tags=tags,
        subject_index=_phrase_head(subj_np).index,
        verb_index=verb.index,
        object_index=_phrase_head(vp.children[1]).index,
    )


def sample_derivation(grammar: Grammar, rng_seed, stats: SampleStats | None = None) -> Derivation:
    """Draw one derivation.  ``rng_seed`` is an int or a ``random.Random``."""
    rng = rng_seed if isinstance(rng_seed, random.Random) else random.Random(rng_seed)
    table = {lhs: grammar.expansions(lhs) for lhs in grammar.nonterminals}

    def expand(symbol: str, depth: int) -> DNode:
        if symbol in grammar.lexicon:
            return DNode(symbol, word=rng.choice(grammar.lexicon[symbol]))
        if symbol == "PP":
            depth += 1
            if depth > MAX_EMBEDDING:
                raise _Resample
        prod = _pick(rng, table[symbol])
        return DNode(symbol, [expand(s, depth) for s in prod.rhs])

    while True:
        if stats is not None:
            stats.samples += 1
        try:
            root = expand("S", 0)
        except _Resample:
            if stats is not None:
                stats.cap_resamples += 1
            continue
        return _finish(root)


def derivation_from_brackets(s: str) -> Derivation:
    """Build a derivation from labelled brackets, e.g. ``(S (DetP_s (Det the) ...))``.

    Words need not come from the builtin lexicon.
    """
    toks = s.replace("(", " ( ").replace(")", " ) ").split()
    pos = 0

    def node():
        nonlocal pos
        if toks[pos] != "(":
            raise ValueError(f"expected '(' at token {pos}")
        label = toks[pos + 1]
        pos += 2
        if toks[pos] not in ("(", ")") and toks[pos + 1] == ")":
            word = toks[pos].lower()
            pos += 2
            return DNode(label, word=word)
        kids = []
        while toks[pos] != ")":
            kids.append(node())
        pos += 1
        return DNode(label, kids)

    root = node()
    if pos != len(toks):
        raise ValueError("trailing tokens after derivation")
    return _finish(root)


def yield_from_productions(productions: Iterable[tuple]) -> list[str]:
    """Replay a leftmost derivation and return its terminal string."""
    form = ["S"]
    for lhs, rhs in productions:
        for i, sym in enumerate(form):
            if isinstance(sym, str) and not sym.startswith("'"):
                if sym != lhs:
                    raise ValueError(f"leftmost nonterminal is {sym}, production rewrites {lhs}")
                break
        else:
            raise ValueError("no nonterminal left to rewrite")
        if lhs in LEXICON or (len(rhs) == 1 and rhs[0] not in _ALL_SYMBOLS):
            form[i:i + 1] = ["'" + rhs[0]]
        else:
            form[i:i + 1] = list(rhs)
    if any(not s.startswith("'") for s in form):
        raise ValueError("derivation is incomplete")
    return [s[1:] for s in form]


_ALL_SYMBOLS = {
    "S", "DetP_s", "DetP_p", "NP_s", "NP_p", "PP", "VP_s", "VP_p", *LEXICON,
}


# --------------------------------------------------------------------------
# structures derived from a derivation


def derive_const_tree(derivation: Derivation):
    """Strictly binary unlabelled tree; unary chains collapse to their leaf."""

    def conv(n: DNode):
        if n.is_preterminal:
            return n.index
        if len(n.children) == 1:
            return conv(n.children[0])
        left, right = n.children
        return (conv(left), conv(right))

    return conv(derivation.root)


def derive_dep_heads(derivation: Derivation) -> tuple:
    """1-based head positions from the construction's head rules; 0 = root."""
    heads = [0] * len(derivation.tokens)

    def walk(n: DNode) -> int:
        if n.is_preterminal:
            return n.index
        child_heads = [walk(c) for c in n.children]
        h = child_heads[_head_child(n)] if len(n.children) > 1 else child_heads[0]
        for ch in child_heads:
            if ch != h:
                heads[ch] = h + 1
        return h

    root = walk(derivation.root)
    heads[root] = 0
    return tuple(heads)


def noun_number(tag: str) -> str | None:
    """'sg', 'pl' or None for a preterminal or Penn tag."""
    if tag in ("Noun_s", "NN", "NNP"):
        return "sg"
    if tag in ("Noun_p", "NNS", "NNPS"):
        return "pl"
    return None


def count_attractors(tags: Sequence[str], subject_index: int, verb_index: int) -> int:
    """Nouns strictly between subject and verb whose number differs from the subject's."""
    if not subject_index < verb_index:
        raise ValueError("subject must precede the verb")
    subj = noun_number(tags[subject_index])
    count = 0
    for tag in tags[subject_index + 1:verb_index]:
        num = noun_number(tag)
        if num is not None and num != subj:
            count += 1
    return count


def has_pp(derivation: Derivation) -> bool:
    return "Prep" in derivation.tags


def make_example(derivation: Derivation) -> Example:
    verb_tag = derivation.tags[derivation.verb_index]
    label = Label.SINGULAR if verb_tag == "Verb_s" else Label.PLURAL
    return Example(
        tokens=tuple(derivation.tokens),
        mask_index=derivation.verb_index,
        label=label,
        const_tree=derive_const_tree(derivation),
        dep_heads=derive_dep_heads(derivation),
        attractors=count_attractors(
            derivation.tags, derivation.subject_index, derivation.verb_index),
    )


# --------------------------------------------------------------------------
# corpora


class UnsatisfiableError(RuntimeError):
    def __init__(self, attempts: int, accepted: int, wanted: int):
        super().__init__(
            f"could not satisfy corpus constraints: {accepted}/{wanted} examples "
            f"after {attempts} sampling attempts")
        self.attempts = attempts


def gen_corpus(
    grammar: Grammar,
    n: int,
    rng_seed: int,
    *,
    min_attractors: int | None = None,
    max_attractors: int | None = None,
    exclude: Iterable[str] = (),
    balance: bool = False,
    pp_rate: float | None = None,
    accept: Callable[[Derivation], bool] | None = None,
    max_attempts: int | None = None,
) -> list[Example]:
    """Sample ``n`` distinct examples meeting the constraints.

    With ``balance`` the singular class receives ``ceil(n/2)`` examples.
    With ``pp_rate`` each slot first draws whether it must contain a PP,
    then resamples until it matches, so the PP share tracks ``pp_rate``.
    ``accept`` is an extra predicate on the derivation.
    """
    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}")
    if pp_rate is not None and not 0.0 <= pp_rate <= 1.0:
        raise ValueError(f"pp_rate must lie in [0, 1], got {pp_rate}")
    rng = random.Random(rng_seed)
    excluded = set(exclude)
    seen: set[str] = set()
    quota = {Label.SINGULAR: (n + 1) // 2, Label.PLURAL: n // 2}
    counts = Counter()
    budget = max_attempts if max_attempts is not None else 1000 * n + 10000
    out: list[Example] = []
    attempts = 0
    want_pp = None
    while len(out) < n:
        if attempts >= budget:
            raise UnsatisfiableError(attempts, len(out), n)
        if pp_rate is not None and want_pp is None:
            want_pp = rng.random() < pp_rate
        d = sample_derivation(grammar, rng)
        attempts += 1
        if want_pp is not None and has_pp(d) != want_pp:
            continue
        if accept is not None and not accept(d):
            continue
        ex = make_example(d)
        if min_attractors is not None and ex.attractors < min_attractors:
            continue
        if max_attractors is not None and ex.attractors > max_attractors:
            continue
        if balance and counts[ex.label] >= quota[ex.label]:
            continue
        key = ex.sentence
        if key in seen or key in excluded:
            continue
        seen.add(key)
        counts[ex.label] += 1
        out.append(ex)
        want_pp = None
    return out


def is_minimal_clause(d: Derivation) -> bool:
    return len(d.tokens) == 5


def nouns_disagree(d: Derivation) -> bool:
    return noun_number(d.tags[d.subject_index]) != noun_number(d.tags[d.object_index])


# --------------------------------------------------------------------------
# corpus statistics


def corpus_stats(examples: Sequence[Example], lexicon: dict = LEXICON) -> list[tuple]:
    """Rows of ``(stat, key, value)`` describing a corpus."""
    preps = set(lexicon["Prep"])
    n = len(examples)
    rows = [("count", "examples", n)]
    labels = Counter(e.label.code for e in examples)
    for code in ("sg", "pl"):
        rows.append(("label", code, labels.get(code, 0)))
        rows.append(("label_share", code, round(labels.get(code, 0) / n, 4) if n else 0.0))
    attr = Counter(attractor_key(e.attractors) for e in examples)
    for k in ATTRACTOR_KEYS:
        rows.append(("attractors", k, attr.get(k, 0)))
    with_pp = sum(1 for e in examples if preps.intersection(e.tokens))
    rows.append(("pp_rate", "share", round(with_pp / n, 4) if n else 0.0))
    lengths = Counter(len(e.tokens) for e in examples)
    for length in sorted(lengths):
        rows.append(("length", str(length), lengths[length]))
    return rows


def stats_csv(rows: Sequence[tuple]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["stat", "key", "value"])
    w.writerows(rows)
    return buf.getvalue()
