"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

LINES: list[str] = []


def record(criterion: str, passed: bool, detail: str, seconds: float, budget: float) -> bool:
    ok = passed and seconds <= budget
    line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail} [{seconds:.1f} s of {budget:.0f} s]"
    LINES.append(line)
    print(line)
    return ok
