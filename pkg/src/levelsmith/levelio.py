"""Level set persistence.

Two formats, both exact round-trip:

* text (``.txt``): ``level <id> <width> <height>`` header followed by
  ``height`` rows of tile-code digits. Lines starting with ``#`` are ignored.
* records (``.jsonl``): one JSON object per level with ``id``, ``width``,
  ``height``, ``grid`` (row-major digit string) and ``tags``.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .grid_env import LevelParams

HEADER = "# levelsmith level set v1"


class LevelFormatError(ValueError):
    pass


def _grid_string(grid: np.ndarray) -> str:
    return "".join(str(int(v)) for v in grid.ravel())


def _parse_grid(digits: str, width: int, height: int) -> np.ndarray:
    if len(digits) != width * height or not digits.isdigit():
        raise LevelFormatError(f"expected {width * height} digits, got {digits[:20]!r}...")
    return np.frombuffer(digits.encode(), dtype=np.uint8).astype(np.int8).reshape(height, width) - ord("0")


def dumps_text(levels) -> str:
    lines = [HEADER]
    for lv in levels:
        if any(ch.isspace() for ch in lv.id):
            raise LevelFormatError(f"level id may not contain whitespace: {lv.id!r}")
        lines.append(f"level {lv.id or '-'} {lv.width} {lv.height}")
        lines.extend("".join(str(int(v)) for v in row) for row in lv.grid)
    return "\n".join(lines) + "\n"


def loads_text(text: str) -> list[LevelParams]:
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    out, i = [], 0
    while i < len(lines):
        parts = lines[i].split()
        if len(parts) != 4 or parts[0] != "level":
            raise LevelFormatError(f"bad header line: {lines[i]!r}")
        lid, width, height = parts[1], int(parts[2]), int(parts[3])
        rows = lines[i + 1 : i + 1 + height]
        if len(rows) != height or any(len(r) != width for r in rows):
            raise LevelFormatError(f"level {lid}: malformed rows")
        out.append(LevelParams(_parse_grid("".join(rows), width, height), "" if lid == "-" else lid))
        i += 1 + height
    return out


def dumps_records(levels) -> str:
    recs = []
    for lv in levels:
        rec = {"id": lv.id, "width": lv.width, "height": lv.height,
               "grid": _grid_string(lv.grid), "tags": lv.tags}
        recs.append(json.dumps(rec, sort_keys=True))
    return "".join(r + "\n" for r in recs)


def loads_records(text: str) -> list[LevelParams]:
    out = []
    for line in text.splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        grid = _parse_grid(rec["grid"], rec["width"], rec["height"])
        out.append(LevelParams(grid, rec["id"], rec.get("tags", {})))
    return out


def save_levels(levels, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = dumps_records(levels) if path.suffix == ".jsonl" else dumps_text(levels)
    path.write_text(text, encoding="utf-8")
    return path


def load_levels(path) -> list[LevelParams]:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    return loads_records(text) if path.suffix == ".jsonl" else loads_text(text)
