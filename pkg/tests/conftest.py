import numpy as np
import pytest

from mtgcn.corpus import build_vocabulary, corpus_from_texts


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def toy_corpus():
    texts = ["a b c d", "b c a", "d e", "a a b"]
    labels = {"sa": [0, 1, 0, 1], "ei": [0, None, 3, 2], "hs": [0, 0, 1, 0], "sar": [None, 1, 0, 0]}
    corpus = corpus_from_texts(texts, labels)
    return corpus, build_vocabulary(corpus)


def random_symmetric(rng, n, density=0.3, self_loops=True):
    a = rng.random((n, n)) * (rng.random((n, n)) < density)
    a = np.triu(a, 1)
    a = a + a.T
    if self_loops:
        np.fill_diagonal(a, 1.0)
    return a


_verdicts = []


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        status = "PASS" if report.passed else "FAIL"
        _verdicts.append((props["criterion"], status, props.get("detail", "")))


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance")
    for n, status, detail in sorted(_verdicts):
        terminalreporter.write_line(f"criterion {n:>2}: {status}  {detail}")
