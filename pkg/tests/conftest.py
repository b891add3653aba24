import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

ML100K = Path(__file__).resolve().parents[1] / "data" / "ml-100k" / "u.data"


@pytest.fixture(scope="session")
def ml100k_path():
    if not ML100K.exists():
        pytest.skip("MovieLens-100K not present; run scripts/fetch_ml100k.py")
    return ML100K


@pytest.fixture
def write_log(tmp_path):
    def _write(text, name="log.txt"):
        p = tmp_path / name
        p.write_text(text)
        return p
    return _write


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.report_lines():
        terminalreporter.write_line(line)
