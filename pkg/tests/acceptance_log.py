"""Shared pass/fail record for the acceptance criteria."""

RESULTS = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    RESULTS[criterion] = (bool(passed), detail)


def summary_lines():
    out = []
    for k in sorted(RESULTS):
        ok, detail = RESULTS[k]
        out.append(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
    return out
