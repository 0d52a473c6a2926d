"""Turn a long-format CSV of a real time series into JSON-lines episodes.

Each row is one time step.  Rows are grouped by an optional id column, each
group is cut into consecutive buckets of ``bucket_length`` rows, and every
bucket becomes one episode.  A row carries an intervention when any of its
intervention cells is non-empty; empty cells inside such a row count as 0.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from ..episodes import Episode, write_episodes


@dataclass
class IngestSchema:
    time_column: str
    observation_columns: list[str]
    intervention_columns: list[str] = field(default_factory=list)
    id_column: str | None = None
    bucket_length: int = 30
    time_scale: float = 1.0
    rebase_time: bool = True
    drop_incomplete: bool = True

    def __post_init__(self):
        if not self.observation_columns:
            raise ValueError("schema needs at least one observation column")
        if self.bucket_length < 2:
            raise ValueError("bucket_length must be at least 2")
        if self.time_scale <= 0:
            raise ValueError("time_scale must be positive")

    @classmethod
    def from_dict(cls, payload: dict) -> IngestSchema:
        unknown = set(payload) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown schema keys: {sorted(unknown)}")
        return cls(**payload)

    @classmethod
    def read(cls, path) -> IngestSchema:
        return cls.from_dict(json.loads(Path(path).read_text()))


def _parse(cell: str, lineno: int, column: str) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise ValueError(f"line {lineno}: cannot parse {column}={cell!r}") from None
    if not np.isfinite(value):
        raise ValueError(f"line {lineno}: non-finite {column}={cell!r}")
    return value


def read_rows(path, schema: IngestSchema) -> dict[str, list[tuple[float, np.ndarray, np.ndarray | None]]]:
    """Rows grouped by id, in file order, as ``(t, x, a or None)``."""
    groups: dict[str, list] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        needed = [schema.time_column, *schema.observation_columns, *schema.intervention_columns]
        if schema.id_column:
            needed.append(schema.id_column)
        missing = [c for c in needed if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: missing columns {missing}")
        for lineno, row in enumerate(reader, 2):
            t = _parse(row[schema.time_column], lineno, schema.time_column) * schema.time_scale
            x = np.array([_parse(row[c], lineno, c) for c in schema.observation_columns])
            cells = [(row[c] or "").strip() for c in schema.intervention_columns]
            a = None
            if any(cells):
                a = np.array([_parse(v, lineno, c) if v else 0.0 for v, c in zip(cells, schema.intervention_columns)])
            key = row[schema.id_column] if schema.id_column else ""
            rows = groups.setdefault(key, [])
            if rows and t <= rows[-1][0]:
                raise ValueError(f"line {lineno}: time {t} does not increase within group {key!r}")
            rows.append((t, x, a))
    return groups


def ingest_csv(path, schema: IngestSchema) -> list[Episode]:
    episodes = []
    n = schema.bucket_length
    for rows in read_rows(path, schema).values():
        for start in range(0, len(rows), n):
            bucket = rows[start : start + n]
            if len(bucket) < n and (schema.drop_incomplete or len(bucket) < 2):
                continue
            t0 = bucket[0][0] if schema.rebase_time else 0.0
            times = [t - t0 for t, _, _ in bucket]
            episodes.append(
                Episode(
                    times=times,
                    x=np.stack([x for _, x, _ in bucket]),
                    interventions=[(t - t0, a) for t, _, a in bucket if a is not None],
                )
            )
    return episodes


def ingest_to_file(path, schema: IngestSchema, out_path) -> int:
    episodes = ingest_csv(path, schema)
    write_episodes(out_path, episodes)
    return len(episodes)
