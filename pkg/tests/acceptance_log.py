"""Collects one line per acceptance criterion for the terminal summary."""

LINES: list[str] = []


def record(number, status: str, detail: str) -> None:
    line = f"criterion {number:>2}: {status:<4}  {detail}"
    LINES.append(line)
    print(line)


def check(number, ok: bool, detail: str) -> None:
    record(number, "PASS" if ok else "FAIL", detail)
    assert ok, f"criterion {number}: {detail}"
