import pytest

from treeagree.grammar import derivation_from_brackets, load_builtin_grammar, builtin_vocab

FIGURE2 = (
    "(S (DetP_p (Det the) (NP_p (NP_p (Noun_p bakers))"
    " (PP (Prep near) (DetP_s (Det the) (NP_s (Noun_s table))))))"
    " (VP_p (Verb_p bake) (DetP_s (Det the) (NP_s (Noun_s cake)))))"
)
FERN = (
    "(S (DetP_s (Det the) (NP_s (NP_s (Noun_s fern))"
    " (PP (Prep near) (DetP_p (Det the) (NP_p (Adj sad) (NP_p (Noun_p teachers)))))))"
    " (VP_s (Verb_s hates) (DetP_s (Det the) (NP_s (Noun_s singer)))))"
)


@pytest.fixture
def figure2():
    return derivation_from_brackets(FIGURE2)


@pytest.fixture
def fern():
    return derivation_from_brackets(FERN)


@pytest.fixture(scope="session")
def test_grammar():
    return load_builtin_grammar("test")


@pytest.fixture(scope="session")
def aug_grammar():
    return load_builtin_grammar("augmentation")


@pytest.fixture(scope="session")
def vocab():
    return builtin_vocab()


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
