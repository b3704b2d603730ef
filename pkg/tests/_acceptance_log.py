"""Shared record of acceptance verdicts, printed at the end of the pytest session."""

VERDICTS: dict[int, tuple[bool, str]] = {}


def record(criterion: int, checks: list[tuple[str, bool]]) -> bool:
    passed = all(ok for _, ok in checks)
    failed = [name for name, ok in checks if not ok]
    detail = "all checks met" if passed else "failed: " + "; ".join(failed)
    VERDICTS[criterion] = (passed, detail)
    print(line(criterion))
    return passed


def line(criterion: int) -> str:
    passed, detail = VERDICTS[criterion]
    return f"ACCEPTANCE criterion {criterion}: {'PASS' if passed else 'FAIL'} ({detail})"
