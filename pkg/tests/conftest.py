import pytest

CRITERIA = {
    1: "deletion-condition soundness on corollary instances",
    2: "closed-form D and C against the generic code",
    3: "path derivative, mean slope and curvature oracles",
    4: "survival frequencies under random deletion",
    5: "estimator gradients against finite differences",
    6: "retention sweep ordering (MLP and GRU)",
    7: "robustness gap sanity and arithmetic",
    8: "extra-class deletion improves accuracy somewhere",
    9: "matched train/test laws give D < 0",
}


class Recorder:
    def __init__(self):
        self.results = {}

    def __call__(self, n, ok, detail=""):
        prev = self.results.get(n)
        ok = bool(ok) and (prev is None or prev[0])
        detail = detail if prev is None else f"{prev[1]}; {detail}"
        self.results[n] = (ok, detail)
        return ok


_RECORDER = Recorder()


@pytest.fixture(scope="session")
def record():
    return _RECORDER


def pytest_terminal_summary(terminalreporter):
    if not _RECORDER.results:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        if n in _RECORDER.results:
            ok, detail = _RECORDER.results[n]
            terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} [{n}] {name}: {detail}")
        else:
            terminalreporter.write_line(f"NOT RUN [{n}] {name}")
