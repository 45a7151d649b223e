"""Ensemble metrics and the metric-record CSV schema."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields

import numpy as np


def _pair(generated, reference):
    G = np.atleast_2d(np.asarray(generated, dtype=float))
    R = np.atleast_2d(np.asarray(reference, dtype=float))
    if G.shape[0] == 0 or R.shape[0] == 0:
        raise ValueError("ensembles must be nonempty")
    if G.shape[1] != R.shape[1]:
        raise ValueError(f"ensemble widths differ: {G.shape[1]} vs {R.shape[1]}")
    return G, R


def mmse(generated, reference) -> float:
    """Mean over entries of the squared difference of ensemble means."""
    G, R = _pair(generated, reference)
    d = G.mean(axis=0) - R.mean(axis=0)
    return float(np.mean(d * d))


def smse(generated, reference) -> float:
    """Mean over entries of the squared difference of (n-1) standard deviations."""
    G, R = _pair(generated, reference)
    if G.shape[0] < 2 or R.shape[0] < 2:
        raise ValueError("standard deviations need at least two samples")
    d = G.std(axis=0, ddof=1) - R.std(axis=0, ddof=1)
    return float(np.mean(d * d))


def pde_error(op, samples) -> float:
    """Average residual norm over an ensemble."""
    return float(np.mean(op.norm(np.atleast_2d(samples))))


def block_mse(x, truth, sl=slice(None)) -> float:
    x = np.atleast_2d(x)[:, sl]
    t = np.atleast_2d(truth)[:, sl]
    return float(np.mean((x - t) ** 2))


@dataclass
class MetricRecord:
    method: str
    task: str
    mmse: float
    smse: float
    mmse_u: float
    smse_u: float
    pde_error: float
    mse: float
    nfe: int
    seed: int
    wall_time: float

    def __post_init__(self):
        for name in ("mmse", "smse", "mmse_u", "smse_u", "pde_error", "mse", "wall_time"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")
        if self.nfe < 0:
            raise ValueError("nfe must be non-negative")


FIELDS = [f.name for f in fields(MetricRecord)]


def write_records(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=FIELDS)
        w.writeheader()
        for r in records:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in asdict(r).items()})


def read_records(path) -> list:
    out = []
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames != FIELDS:
            raise ValueError(f"{path}: unexpected header {rd.fieldnames}")
        for row in rd:
            out.append(MetricRecord(
                row["method"], row["task"],
                *(float(row[k]) for k in FIELDS[2:8]),
                int(row["nfe"]), int(row["seed"]), float(row["wall_time"])))
    return out


def markdown_table(records, columns=None) -> str:
    cols = columns or FIELDS
    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for r in records:
        d = asdict(r)
        cells = [f"{d[c]:.4g}" if isinstance(d[c], float) else str(d[c]) for c in cols]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines)
