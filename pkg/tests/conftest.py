import pytest
import torch

from odecut.data import make_fixtures


@pytest.fixture(autouse=True)
def _threads():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def fixtures_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("fixtures")
    make_fixtures(root, n=8, seed=0, size=32)
    return root


def pytest_terminal_summary(terminalreporter):
    import sys
    results = {}
    for name, mod in list(sys.modules.items()):
        if name.endswith("test_acceptance") and hasattr(mod, "RESULTS"):
            results.update(mod.RESULTS)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
