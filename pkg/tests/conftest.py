import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# --- acceptance criterion bookkeeping -------------------------------------

_CRITERIA: dict[int, list[tuple[bool, str]]] = {}


class _Criterion:
    def __init__(self, number: int, what: str):
        self.number = number
        self.what = what

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        ok = exc_type is None
        detail = self.what if ok else f"{self.what}: {exc_type.__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        _CRITERIA.setdefault(self.number, []).append((ok, detail))
        line = f"criterion {self.number:2d} {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        return False


@pytest.fixture
def criterion():
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        checks = _CRITERIA[number]
        ok = all(c[0] for c in checks)
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}")
        for passed, detail in checks:
            terminalreporter.write_line(f"    [{'ok' if passed else 'x '}] {detail}")
