"""Collects one pass/fail line per acceptance criterion for the terminal summary."""

LINES: dict[int, str] = {}


def record(number: int, title: str, ok: bool, detail: str) -> bool:
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    LINES[number] = line
    print(line)
    return ok
