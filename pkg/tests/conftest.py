import numpy as np
import pytest

from resvmamba import autodiff as ad
from resvmamba.data import synth_dataset_generate


@pytest.fixture
def f64():
    with ad.precision("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    synth_dataset_generate(4, 12, 32, seed=0, out=root)
    return root


_LINES = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request, capsys):
    """Print one PASS/FAIL line per criterion, immediately and again in the run summary."""
    lines = request.config.stash.setdefault(_LINES, [])

    def report(n: int, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {n:>2}: {detail}"
        lines.append(line)
        with capsys.disabled():
            print("\n" + line)

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
