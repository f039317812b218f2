"""Shared store for per-criterion pass/fail lines of the acceptance suite."""
from __future__ import annotations

LINES: dict[str, str] = {}


def record(key: str, ok: bool, detail: str) -> bool:
    line = f"criterion {key}: {'PASS' if ok else 'FAIL'} | {detail}"
    LINES[key] = line
    print(line)
    return ok
