import numpy as np
import pytest
import torch

from caiiswap.data import load_manifest
from caiiswap.encoders import build_suite
from caiiswap.synthetic import make_synthetic_corpus


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    """4 identities x 3 frames of synthetic faces with captions and masks."""
    d = tmp_path_factory.mktemp("corpus")
    return load_manifest(make_synthetic_corpus(d, n_identities=4, frames_per_identity=3, seed=0))


@pytest.fixture(scope="session")
def corpus_path(corpus):
    return corpus[0].image_path.parent.parent / "manifest.jsonl"


@pytest.fixture
def suite():
    return build_suite()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


# -- acceptance reporting ----------------------------------------------------------
# Each acceptance criterion records one PASS/FAIL line; the lines are echoed in the
# terminal summary so they survive output capture.

_lines = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_lines] = {}


@pytest.fixture
def criterion(request):
    lines = request.config.stash[_lines]

    def report(number, ok, detail):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines[request.node.nodeid] = line
        print(line)
        assert ok, line

    return report


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    rep = yield
    lines = item.config.stash[_lines]
    if rep.when == "call" and rep.failed and "criterion" in item.fixturenames and item.nodeid not in lines:
        lines[item.nodeid] = f"{item.name}: FAIL  raised before reporting ({call.excinfo.typename})"
    return rep


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash[_lines]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines.values()):
            terminalreporter.write_line(line)
