import pytest

CRITERIA = {
    1: "entropy matches Monte Carlo collision probability",
    2: "closed-form spot values",
    3: "gradient check against finite differences",
    4: "synthetic distillation fidelity",
    5: "synthetic hallucination detection",
    6: "synthetic OOD verification",
    7: "metric oracles and bootstrap reproducibility",
    8: "consensus win rate with oracle student",
    9: "round trips and CLI determinism",
}

_results: dict = {}


class Recorder:
    def __call__(self, number: int, ok: bool, detail: str = ""):
        prev = _results.get(number, (True, []))
        _results[number] = (prev[0] and bool(ok), prev[1] + ([detail] if detail else []))
        assert ok, f"criterion {number}: {detail}"


@pytest.fixture(scope="session")
def criterion():
    return Recorder()


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        if n not in _results:
            terminalreporter.write_line(f"criterion {n}: NOT RUN  {name}")
            continue
        ok, details = _results[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {name}  [{'; '.join(details)}]")
