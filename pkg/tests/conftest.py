import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from icdollo.lexproc import SegmentTable  # noqa: E402
from icdollo.phylo import parse_newick  # noqa: E402

CONSONANTS = "p b t d k g m n s l r h ŋ ṭ".split()
VOWELS = "a e i o u ə".split()


def balanced_newick(depth: int, branch: float = 0.25) -> str:
    """Ultrametric balanced tree with 2**depth tips L0.. and height depth*branch."""
    names = iter(f"L{i}" for i in range(2**depth))

    def rec(d):
        if d == depth:
            return next(names)
        return f"({rec(d + 1)}:{branch},{rec(d + 1)}:{branch})"

    return rec(0) + ";"


@pytest.fixture(scope="session")
def table():
    classes = {c: "C" for c in CONSONANTS}
    classes.update({v: "V" for v in VOWELS})
    classes["ts"] = "C"
    classes["˥"] = "O"
    return SegmentTable(classes)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def tree16():
    return parse_newick(balanced_newick(4))


@pytest.fixture(scope="session")
def tree4():
    return parse_newick("((A:1,B:0.5):0.7,(C:0.3,D:1.2):0.5):0.4;")


_VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_VERDICTS] = []


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    lines = request.config.stash[_VERDICTS]

    def record(criterion: str, ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'} {criterion}: {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
