import json

import pytest

# small enough that every command finishes in a few seconds
SMALL_CONFIG = {
    "seed": 0,
    "samples": 4,
    "model": {"vocab": 16, "layers": 1, "hidden": 24, "hs": 6, "kv_hs": 3, "head_dim": 4, "init_std": 0.1},
    "trainer": {"epochs": 2, "grad_accum": 2, "cutoff_len": 32},
    "verify": {"grid": [{"seq_len": 32, "hs": 4, "dim": 4}, {"seq_len": 32, "hs": 6, "dim": 4, "kv_hs": 3}]},
    "comm": {"seq_lens": [64], "heads": [{"hs": 4, "dim": 8}, {"hs": 6, "dim": 8}]},
    "balance": {"seq_lens": [8, 16]},
    "pitfall": {"epochs": 1},
}


@pytest.fixture
def small_config(tmp_path):
    def write(**over):
        doc = {**SMALL_CONFIG, **over}
        path = tmp_path / f"config_{len(list(tmp_path.glob('config_*')))}.json"
        path.write_text(json.dumps(doc))
        return str(path)

    return write


_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for the end-of-run acceptance summary."""

    def record(number: int, ok: bool, text: str):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {text}"
        print(line)
        request.config.stash[_LINES].append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
