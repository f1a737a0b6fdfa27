"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

RESULTS: dict[int, str] = {}


def record(number: int, title: str, ok: bool, detail: str = "") -> bool:
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}" + (f"  ({detail})" if detail else "")
    RESULTS[number] = line
    print(line)
    return ok
