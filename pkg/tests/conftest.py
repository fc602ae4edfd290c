from collections import OrderedDict

import pytest

# criterion id -> list of (part, ok, detail), filled by the acceptance tests
CRITERIA = OrderedDict()


@pytest.fixture
def criterion():
    def record(cid, title, part, ok, detail=""):
        entry = CRITERIA.setdefault(cid, {"title": title, "parts": []})
        entry["parts"].append((part, bool(ok), detail))
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {cid} {title} / {part}: {detail}"
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for cid, entry in CRITERIA.items():
        parts = entry["parts"]
        ok = all(p[1] for p in parts)
        detail = "; ".join(f"{name} {'ok' if good else 'FAILED'} ({d})" for name, good, d in parts)
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {cid}. {entry['title']}: {detail}")
