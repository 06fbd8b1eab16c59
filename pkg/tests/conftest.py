import logging

import pytest

from osparse.synth import generate_dataset


@pytest.fixture(autouse=True)
def _quiet_warnings(caplog):
    # vanished-class warnings are expected on tiny feature maps
    caplog.set_level(logging.ERROR, logger="osparse")


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """Eight train supports/queries, six test supports, four test queries at 48x48."""
    root = tmp_path_factory.mktemp("tiny")
    return generate_dataset(3, (8, 8, 6, 4), 48, 48, root, fold=1, n_fixed=3)


_CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record one acceptance verdict; the terminal summary lists them all."""

    def record(n: int, ok: bool, detail: str) -> bool:
        _CRITERIA[n] = (bool(ok), detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
