"""Collects one pass/fail line per acceptance criterion for the terminal summary."""

from __future__ import annotations

VERDICTS: list[str] = []


def verdict(name: str, ok: bool, detail: str = "") -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
    VERDICTS.append(line)
    print(line)
