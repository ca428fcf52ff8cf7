import contextlib
import time

import pytest

_RESULTS = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """``with criterion(n, title, budget_s):`` records one pass/fail line.

    The block fails the test as usual; running past the budget fails it too.
    """
    lines = request.config.stash.setdefault(_RESULTS, [])

    @contextlib.contextmanager
    def run(n: int, title: str, budget: float | None = None):
        t0 = time.perf_counter()
        ok, why = False, ""
        try:
            yield
            ok = True
        except BaseException as exc:
            why = f"  ({type(exc).__name__}: {str(exc).splitlines()[0][:90] if str(exc) else ''})"
            raise
        finally:
            dt = time.perf_counter() - t0
            if ok and budget is not None and dt > budget:
                ok, why = False, f"  (over budget {budget:g}s)"
            line = f"criterion {n:>2}  {'PASS' if ok else 'FAIL'}  {title}  [{dt:.1f}s]{why}"
            lines.append(line)
            print(line)
        if budget is not None and dt > budget:
            pytest.fail(f"criterion {n} took {dt:.1f}s, budget {budget:g}s")

    return run


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_RESULTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
