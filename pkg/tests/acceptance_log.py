"""Collects one pass/fail line per acceptance criterion for the terminal summary."""

LINES: list[str] = []


def report(n: int, ok: bool, detail: str) -> bool:
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    LINES.append(line)
    print(line)
    return ok
