"""CSV artifact helpers: a stamp comment line, a fixed header, then rows."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Sequence


def write_rows(path: Path | str, header: Sequence[str], rows: Iterable[Sequence],
               stamp: str | None = None) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as f:
        if stamp:
            f.write(f"# {stamp}\n")
        w = csv.writer(f)
        w.writerow(list(header))
        for row in rows:
            w.writerow(list(row))


def read_rows(path: Path | str, expected_header: Sequence[str]) -> tuple[str | None, list[list[str]]]:
    """Returns (stamp, rows); raises ValueError on a header mismatch."""
    stamp: str | None = None
    rows: list[list[str]] = []
    with Path(path).open(newline="", encoding="utf-8") as f:
        first = f.readline()
        if first.startswith("#"):
            stamp = first[1:].strip()
        else:
            f.seek(0)
        reader = csv.reader(f)
        header = next(reader, None)
        if header != list(expected_header):
            raise ValueError(f"{path}: expected header {list(expected_header)}, got {header}")
        rows.extend(reader)
    return stamp, rows


def parse_stamp(stamp: str | None) -> dict[str, str]:
    out: dict[str, str] = {}
    if not stamp:
        return out
    for part in stamp.split():
        if "=" in part:
            key, value = part.split("=", 1)
            out[key] = value
    return out
