"""CSV and JSON files written by the CLI: datasets, traces, round logs, summaries.

Every file is written to a temporary sibling first and moved into place, so a
reader never sees a half-written output.
"""
import csv
import io
import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, List, Sequence, Union

import numpy as np

from mlrbench.mlr_model import Dataset, FederatedDataset
from mlrbench.models import ROUND_COLUMNS, TRACE_COLUMNS, ConfigError, RoundLog, Trace, row_values

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def atomic_write_text(path: PathLike, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def csv_text(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _fmt(value: float) -> str:
    return format(float(value), ".17g")


def write_trace(trace: Trace, path: PathLike) -> Path:
    return atomic_write_text(path, csv_text(TRACE_COLUMNS, [row_values(r, TRACE_COLUMNS) for r in trace.rows]))


def write_rounds(logs: List[RoundLog], path: PathLike) -> Path:
    return atomic_write_text(path, csv_text(ROUND_COLUMNS, [row_values(r, ROUND_COLUMNS) for r in logs]))


def write_json(payload: Any, path: PathLike) -> Path:
    return atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_json(path: PathLike) -> Any:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"File not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"Invalid JSON in {path}: {e}") from e


def save_dataset(data: Dataset, path: PathLike) -> Path:
    """Header ``x_0..x_{d-1},y[,z]``; floats with 17 significant digits."""
    header = [f"x_{j}" for j in range(data.d)] + ["y"]
    if data.zs is not None:
        header.append("z")
    rows = []
    for i in range(data.n):
        row = [_fmt(v) for v in data.xs[i]] + [_fmt(data.ys[i])]
        if data.zs is not None:
            row.append(str(int(data.zs[i])))
        rows.append(row)
    return atomic_write_text(path, csv_text(header, rows))


def load_dataset(path: PathLike) -> Dataset:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Dataset file not found: {path}")
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        rows = list(reader)
    if not header or "y" not in header:
        raise ConfigError(f"{path} has no 'y' column")
    x_cols = [i for i, name in enumerate(header) if name.startswith("x_")]
    y_col = header.index("y")
    z_col = header.index("z") if "z" in header else None
    if not x_cols:
        raise ConfigError(f"{path} has no x_ columns")
    try:
        table = np.array([[float(row[i]) for i in x_cols + [y_col]] for row in rows], dtype=float)
        zs = np.array([int(row[z_col]) for row in rows]) if z_col is not None else None
    except (ValueError, IndexError) as e:
        raise ConfigError(f"Malformed row in {path}: {e}") from e
    table = table.reshape(len(rows), len(x_cols) + 1)
    return Dataset(xs=table[:, :-1], ys=table[:, -1], zs=zs)


def agents_path(path: PathLike) -> Path:
    path = Path(path)
    return path.with_name(f"{path.stem}.agents.csv")


def save_federated(fed: FederatedDataset, path: PathLike) -> Path:
    """Pooled samples at ``path`` plus a sidecar ``agent_id,row_start,row_count[,z_m]``."""
    save_dataset(fed.pooled(), path)
    header = ["agent_id", "row_start", "row_count"]
    if fed.assignment is not None:
        header.append("z_m")
    rows = []
    start = 0
    for m, size in enumerate(fed.sizes):
        row = [str(m), str(start), str(size)]
        if fed.assignment is not None:
            row.append(str(int(fed.assignment[m])))
        rows.append(row)
        start += size
    atomic_write_text(agents_path(path), csv_text(header, rows))
    return Path(path)


def load_federated(path: PathLike) -> FederatedDataset:
    pooled = load_dataset(path)
    sidecar = agents_path(path)
    if not sidecar.is_file():
        raise ConfigError(f"Agent sidecar not found: {sidecar}")
    with open(sidecar, "r", encoding="utf-8", newline="") as f:
        records = list(csv.DictReader(f))
    records.sort(key=lambda r: int(r["agent_id"]))
    shards = []
    for r in records:
        start, count = int(r["row_start"]), int(r["row_count"])
        if start + count > pooled.n:
            raise ConfigError(f"agent {r['agent_id']} rows {start}..{start + count} exceed {pooled.n} samples")
        shards.append(pooled.subset(start, start + count))
    assignment = None
    if records and "z_m" in records[0]:
        assignment = np.array([int(r["z_m"]) for r in records])
    return FederatedDataset(shards=shards, assignment=assignment)
