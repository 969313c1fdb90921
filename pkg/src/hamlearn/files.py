"""On-disk formats: dataset CSV, loss history, sweep results, aggregates.

Every file starts with ``#`` header lines holding the tool version and the
resolved configuration, so a file alone is enough to reproduce it.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import __version__
from .config import dumps
from .training import TrajectoryDataset


def fmt(x) -> str:
    return format(float(x), ".17g")


def header_lines(cfg: dict | None, **extra) -> list[str]:
    lines = [f"# hamlearn {__version__}"]
    if cfg is not None:
        lines.append(f"# config {dumps(cfg)}")
    for key, val in extra.items():
        lines.append(f"# {key} {json.dumps(val, sort_keys=True, separators=(',', ':'))}")
    return lines


def read_header(path) -> dict:
    """Parsed ``# key json`` lines at the top of a file."""
    out = {}
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            key, _, rest = line[1:].strip().partition(" ")
            try:
                out[key] = json.loads(rest)
            except json.JSONDecodeError:
                out[key] = rest
    return out


def _write(path, lines):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")


# datasets --------------------------------------------------------------------

def write_dataset(path, ds: TrajectoryDataset, cfg: dict | None = None):
    """CSV with columns traj_id,step,t,q_1..q_n,p_1..p_n; chain states are
    flattened row-major (q_1..q_3 belong to the first pendulum)."""
    N, M = ds.N, ds.M
    n = int(np.prod(ds.q.shape[2:]))
    prov = dict(ds.provenance, state_shape=list(ds.q.shape[2:]))
    lines = header_lines(cfg, provenance=prov)
    lines.append(",".join(["traj_id", "step", "t"] + [f"q_{i}" for i in range(1, n + 1)]
                          + [f"p_{i}" for i in range(1, n + 1)]))
    q = ds.q.reshape(N, M, n)
    p = ds.p.reshape(N, M, n)
    times = ds.times
    for i in range(N):
        for j in range(M):
            vals = [fmt(v) for v in q[i, j]] + [fmt(v) for v in p[i, j]]
            lines.append(f"{i},{j + 1},{fmt(times[j])}," + ",".join(vals))
    _write(path, lines)


def read_dataset(path) -> TrajectoryDataset:
    head = read_header(path)
    prov = head.get("provenance")
    if not isinstance(prov, dict) or "dt" not in prov:
        raise ValueError(f"{path}: missing provenance header")
    shape = tuple(prov.pop("state_shape", ()))
    with open(path) as fh:
        body = [ln for ln in fh if not ln.startswith("#")][1:]
    if not body:
        raise ValueError(f"{path}: no data rows")
    rows = np.loadtxt(body, delimiter=",", ndmin=2)
    if rows.size == 0:
        raise ValueError(f"{path}: no data rows")
    ids = rows[:, 0].astype(int)
    steps = rows[:, 1].astype(int)
    N, M = ids.max() + 1, steps.max()
    if rows.shape[0] != N * M:
        raise ValueError(f"{path}: expected {N * M} rows, found {rows.shape[0]}")
    n = (rows.shape[1] - 3) // 2
    if not shape:
        shape = (n,)
    if int(np.prod(shape)) != n:
        raise ValueError(f"{path}: state shape {shape} does not match {n} columns")
    order = np.lexsort((steps, ids))
    rows = rows[order]
    q = rows[:, 3:3 + n].reshape((N, M) + shape)
    p = rows[:, 3 + n:].reshape((N, M) + shape)
    return TrajectoryDataset(q, p, float(prov["dt"]), prov)


# tables ------------------------------------------------------------------------

def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_table(path, columns, rows, cfg: dict | None = None, append: bool = False, **extra):
    """CSV table of dict rows; with ``append`` an existing file gains rows only."""
    path = Path(path)
    body = [",".join(_cell(r.get(c)) for c in columns) for r in rows]
    if append and path.exists() and path.stat().st_size > 0:
        with open(path, "a") as fh:
            fh.write("\n".join(body) + "\n")
        return
    _write(path, header_lines(cfg, **extra) + [",".join(columns)] + body)


def read_table(path) -> list[dict]:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if not ln.startswith("#")]
    cols = lines[0].split(",")
    return [dict(zip(cols, ln.split(","))) for ln in lines[1:] if ln]


def write_loss_history(path, history, cfg: dict | None = None):
    write_table(path, ("epoch", "loss"), [{"epoch": i + 1, "loss": v} for i, v in enumerate(history)], cfg)
