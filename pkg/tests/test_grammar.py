import math
import random
from collections import Counter

import pytest

from treeagree.grammar import (
    LEXICON,
    MAX_EMBEDDING,
    SampleStats,
    UnsatisfiableError,
    corpus_stats,
    count_attractors,
    derivation_from_brackets,
    derive_const_tree,
    derive_dep_heads,
    gen_corpus,
    has_pp,
    is_minimal_clause,
    load_builtin_grammar,
    make_example,
    noun_number,
    nouns_disagree,
    sample_derivation,
    yield_from_productions,
)
from treeagree.treebank import Label, check_heads, check_tree, leaves, serialize_tree

SG_NOUNS = set(LEXICON["Noun_s"])
PL_NOUNS = set(LEXICON["Noun_p"])


def scan_attractors(tokens, subj, verb):
    """Oracle that only looks at surface words, never at derivation tags."""
    subj_pl = tokens[subj] in PL_NOUNS
    return sum(1 for w in tokens[subj + 1:verb]
               if (w in PL_NOUNS and not subj_pl) or (w in SG_NOUNS and subj_pl))


def prob(g, lhs, rhs):
    (p,) = [p.prob for p in g.expansions(lhs) if p.rhs == tuple(rhs)]
    return p


def test_configured_probabilities(test_grammar, aug_grammar):
    assert prob(test_grammar, "NP_s", ["Noun_s"]) == 0.8
    assert prob(aug_grammar, "NP_s", ["Adj", "NP_s"]) == 0.69
    assert prob(aug_grammar, "NP_p", ["NP_p", "PP"]) == 0.04
    for g in (test_grammar, aug_grammar):
        assert prob(g, "S", ["DetP_s", "VP_s"]) == 0.5
        for lhs in g.nonterminals:
            assert math.isclose(sum(p.prob for p in g.expansions(lhs)), 1.0)


def test_vp_p_has_both_object_numbers(test_grammar):
    rhs = {p.rhs for p in test_grammar.expansions("VP_p")}
    assert rhs == {("Verb_p", "DetP_s"), ("Verb_p", "DetP_p")}


def test_unknown_variant():
    with pytest.raises(ValueError):
        load_builtin_grammar("natural")


def test_lexicon_sizes():
    sizes = {k: len(v) for k, v in LEXICON.items()}
    assert sizes == {"Det": 1, "Noun_s": 17, "Noun_p": 17, "Verb_s": 17, "Verb_p": 17,
                     "Adj": 13, "Prep": 4}


def test_example_sentence_is_derivable(fern):
    assert " ".join(fern.tokens) == "the fern near the sad teachers hates the singer"
    for tag, word in zip(fern.tags, fern.tokens):
        assert word in LEXICON[tag]
    assert count_attractors(fern.tags, fern.subject_index, fern.verb_index) == 1
    assert scan_attractors(fern.tokens, fern.subject_index, fern.verb_index) == 1


def test_np_noun_frequency_monte_carlo(test_grammar):
    rng = random.Random(7)
    c = Counter()
    for _ in range(10_000):
        for lhs, rhs in sample_derivation(test_grammar, rng).productions:
            if lhs.startswith("NP"):
                c[len(rhs) == 1] += 1
    assert abs(c[True] / sum(c.values()) - 0.8) <= 0.02


def test_figure2_bracketing_and_heads(figure2):
    assert serialize_tree(derive_const_tree(figure2)) == "((0 (1 (2 (3 4)))) (5 (6 7)))"
    assert list(derive_dep_heads(figure2)) == [2, 6, 2, 5, 3, 0, 8, 6]


def test_two_word_constituent():
    d = derivation_from_brackets(
        "(S (DetP_s (Det the) (NP_s (Noun_s singer))) (VP_s (Verb_s hates)"
        " (DetP_s (Det the) (NP_s (Noun_s fern)))))")
    assert derive_const_tree(d)[0] == (0, 1)


def test_minimal_clause_heads():
    d = derivation_from_brackets(
        "(S (DetP_s (Det the) (NP_s (Noun_s fern))) (VP_s (Verb_s hates)"
        " (DetP_s (Det the) (NP_s (Noun_s singer)))))")
    assert list(derive_dep_heads(d)) == [2, 3, 0, 5, 3]
    assert is_minimal_clause(d) and not nouns_disagree(d)


def test_attractor_examples():
    assert count_attractors(["DT", "NNS", "VBP", "DT", "NN"], 1, 2) == 0
    # "Algorithmic problems such as type checking and type inference are ..."
    tags = ["JJ", "NNS", "JJ", "IN", "NN", "NN", "CC", "NN", "NN", "VBP"]
    assert count_attractors(tags, 1, 9) == 4
    with pytest.raises(ValueError):
        count_attractors(tags, 9, 1)


def test_noun_number():
    assert noun_number("Noun_s") == "sg" and noun_number("NNS") == "pl"
    assert noun_number("Verb_s") is None


def test_masked_verb_label():
    d = derivation_from_brackets(
        "(S (DetP_s (Det the) (NP_s (Noun_s girl))) (VP_s (Verb_s kicks)"
        " (DetP_s (Det the) (NP_s (Noun_s ball)))))")
    ex = make_example(d)
    assert ex.label is Label.SINGULAR and ex.mask_index == 2
    assert ex.tokens[2] == "kicks"


def test_label_balance_unconstrained(test_grammar):
    rng = random.Random(11)
    sg = sum(make_example(sample_derivation(test_grammar, rng)).label == Label.SINGULAR
             for _ in range(10_000))
    assert abs(sg / 10_000 - 0.5) <= 0.02


def test_structural_scan(test_grammar, aug_grammar):
    rng = random.Random(5)
    stats = SampleStats()
    for g in (test_grammar, aug_grammar):
        for _ in range(1000):
            d = sample_derivation(g, rng, stats)
            ex = make_example(d)
            check_tree(ex.const_tree, len(ex.tokens))
            check_heads(ex.dep_heads)
            assert [ex.tokens[i] for i in leaves(ex.const_tree)] == list(ex.tokens)
            assert yield_from_productions(d.productions) == d.tokens
            assert ex.dep_heads[ex.mask_index] == 0
            assert ex.attractors == scan_attractors(ex.tokens, d.subject_index, d.verb_index)
            subj_sg = ex.tokens[d.subject_index] in SG_NOUNS
            assert (ex.label == Label.SINGULAR) == subj_sg
            assert ex.tokens.count("near") + ex.tokens.count("on") + ex.tokens.count("by") \
                + ex.tokens.count("around") <= 2 * MAX_EMBEDDING
    assert stats.samples >= 2000


def test_sampling_is_deterministic(test_grammar):
    a = [sample_derivation(test_grammar, 3).tokens for _ in range(3)]
    assert all(t == a[0] for t in a)


def test_gen_corpus_excludes_augmentation(test_grammar, aug_grammar):
    aug = gen_corpus(aug_grammar, 500, 1, balance=True)
    assert len({e.sentence for e in aug}) == 500
    assert any(e.attractors >= 1 for e in aug)
    test = gen_corpus(test_grammar, 400, 2, exclude={e.sentence for e in aug})
    assert len({e.sentence for e in test}) == 400
    assert not {e.sentence for e in test} & {e.sentence for e in aug}


def test_gen_corpus_balance_and_constraints(test_grammar):
    ten = gen_corpus(test_grammar, 10, 0, balance=True)
    assert Counter(e.label for e in ten) == {Label.SINGULAR: 5, Label.PLURAL: 5}
    odd = gen_corpus(test_grammar, 7, 0, balance=True)
    assert Counter(e.label for e in odd) == {Label.SINGULAR: 4, Label.PLURAL: 3}
    hard = gen_corpus(test_grammar, 50, 0, min_attractors=1, max_attractors=2)
    assert all(1 <= e.attractors <= 2 for e in hard)
    assert gen_corpus(test_grammar, 30, 9) == gen_corpus(test_grammar, 30, 9)


def test_gen_corpus_errors(test_grammar):
    with pytest.raises(ValueError):
        gen_corpus(test_grammar, 0, 0)
    with pytest.raises(UnsatisfiableError, match="attempts"):
        gen_corpus(test_grammar, 5, 0, min_attractors=99, max_attempts=200)


def test_pp_rate_targeting(test_grammar):
    exs = gen_corpus(test_grammar, 1500, 4, pp_rate=1 / 3)
    rate = dict(((s, k), v) for s, k, v in corpus_stats(exs))[("pp_rate", "share")]
    assert abs(rate - 1 / 3) <= 0.03


def test_has_pp(fern, figure2):
    assert has_pp(fern) and has_pp(figure2)


def test_corpus_stats_rows(test_grammar):
    exs = gen_corpus(test_grammar, 20, 0, balance=True)
    rows = {(s, k): v for s, k, v in corpus_stats(exs)}
    assert rows[("count", "examples")] == 20
    assert rows[("label", "sg")] == rows[("label", "pl")] == 10
    assert sum(rows[("attractors", k)] for k in ("0", "1", "2", "3", "4+")) == 20
