"""Metrics persistence: annotated CSV files and run directories.

A metrics file is plain CSV preceded by comment lines::

    # config_hash: 3f2a...
    # seed: 7
    # variant: relabel-on
    iteration,env_steps_cumulative,...
    0,100,...

Meta lines are ``# key: value`` with sorted keys. Floats are written
with repr, so writing the rows read from a file reproduces it byte for
byte, and a fixed seed reproduces an identical file digest.

A run directory holds everything needed to reproduce a training run:

    config.txt     the fully resolved configuration
    run.json       root seed plus content hashes of every input artifact
    metrics.csv    one row per training iteration
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path


def _format_cell(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_cell(text: str):
    if text == "true":
        return True
    if text == "false":
        return False
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def write_metrics(path: str | Path, rows: list[dict], meta: dict | None = None) -> Path:
    """Write rows (identical key sets, insertion order of the first row)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for k in sorted((meta or {}).keys()):
        lines.append(f"# {k}: {(meta or {})[k]}")
    if rows:
        cols = list(rows[0].keys())
        for i, row in enumerate(rows):
            if list(row.keys()) != cols:
                raise ValueError(f"row {i} columns disagree with row 0")
        lines.append(",".join(cols))
        for row in rows:
            lines.append(",".join(_format_cell(row[c]) for c in cols))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_metrics(path: str | Path) -> tuple[list[dict], dict]:
    """Read back (rows, meta); numeric cells become int or float."""
    meta: dict = {}
    rows: list[dict] = []
    cols: list[str] | None = None
    for raw in Path(path).read_text().splitlines():
        if not raw.strip():
            continue
        if raw.startswith("#"):
            body = raw[1:].strip()
            key, _, val = body.partition(":")
            meta[key.strip()] = val.strip()
            continue
        cells = raw.split(",")
        if cols is None:
            cols = cells
            continue
        if len(cells) != len(cols):
            raise ValueError(f"row has {len(cells)} cells, header has {len(cols)}")
        rows.append({c: _parse_cell(v) for c, v in zip(cols, cells)})
    return rows, meta


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def init_run_dir(
    path: str | Path,
    config_text: str,
    seed: int,
    input_hashes: dict[str, str] | None = None,
) -> Path:
    """Create a run directory with the resolved config and provenance."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "config.txt").write_text(config_text)
    run = {"seed": seed, "inputs": dict(sorted((input_hashes or {}).items()))}
    (path / "run.json").write_text(json.dumps(run, indent=2, sort_keys=True) + "\n")
    return path
