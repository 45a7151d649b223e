"""PFD1 field files and CSV manifests.

A PFD1 file is one ASCII header line::

    PFD1 n_x n_t extent_x extent_t channels [n_scalar]

followed by little-endian float64 records. Each record holds ``channels``
grids of ``n_t * n_x`` values (time-major) and then ``n_scalar`` trailing
scalars. The record count follows from the payload size.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .fields import GridSpec, Layout


def layout_channels(layout: Layout) -> tuple[int, int]:
    """``(channels, n_scalar)`` for a joint layout."""
    if layout.coef == "field":
        return 2, 0
    return 1, layout.n_coef


def write_pfd(path, data, grid: GridSpec, channels: int = 1, n_scalar: int = 0) -> None:
    data = np.atleast_2d(np.asarray(data, dtype=float))
    rec = channels * grid.size + n_scalar
    if data.shape[1] != rec:
        raise ValueError(f"records of width {data.shape[1]} do not match header width {rec}")
    head = f"PFD1 {grid.n_x} {grid.n_t} {grid.extent_x!r} {grid.extent_t!r} {channels}"
    if n_scalar:
        head += f" {n_scalar}"
    with open(path, "wb") as fh:
        fh.write((head + "\n").encode("ascii"))
        fh.write(data.astype("<f8").tobytes())


def read_pfd(path):
    """Return ``(data, grid, channels, n_scalar)`` with ``data`` of shape ``(n, width)``."""
    with open(path, "rb") as fh:
        tokens = fh.readline().decode("ascii").split()
        payload = fh.read()
    if len(tokens) not in (6, 7) or tokens[0] != "PFD1":
        raise ValueError(f"{path}: not a PFD1 file")
    grid = GridSpec(int(tokens[1]), int(tokens[2]), float(tokens[3]), float(tokens[4]))
    channels = int(tokens[5])
    n_scalar = int(tokens[6]) if len(tokens) == 7 else 0
    rec = channels * grid.size + n_scalar
    flat = np.frombuffer(payload, dtype="<f8").astype(float)
    if flat.size % rec:
        raise ValueError(f"{path}: payload of {flat.size} values is not a whole number of records")
    return flat.reshape(-1, rec), grid, channels, n_scalar


def write_samples(path, data, layout: Layout) -> None:
    channels, n_scalar = layout_channels(layout)
    write_pfd(path, data, layout.grid, channels, n_scalar)


def read_samples(path):
    """Read a joint-sample file; returns ``(data, layout)``."""
    data, grid, channels, n_scalar = read_pfd(path)
    if channels == 2:
        layout = Layout(grid, "field")
    elif channels == 1 and n_scalar:
        layout = Layout(grid, "scalar", n_scalar)
    else:
        raise ValueError(f"{path}: cannot infer a joint layout from {channels} channel(s)")
    return data, layout


def write_manifest(path, rows, header) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def read_manifest(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def save_dataset(stem, data, layout: Layout, coefs, seed: int) -> tuple[Path, Path]:
    """Write ``stem.pfd`` and the sidecar ``stem.csv`` (index, coefficient, seed)."""
    stem = Path(stem)
    pfd, man = stem.with_suffix(".pfd"), stem.with_suffix(".csv")
    write_samples(pfd, data, layout)
    write_manifest(man, [(i, float(c), seed) for i, c in enumerate(coefs)],
                   ["index", "coefficient", "seed"])
    return pfd, man


def save_pairs(stem, pairs, layout: Layout) -> None:
    """Noise and sample files plus a manifest naming the teacher."""
    stem = Path(stem)
    write_samples(stem.with_name(stem.name + "_eps.pfd"), pairs.eps, layout)
    write_samples(stem.with_name(stem.name + "_x0.pfd"), pairs.x0, layout)
    write_manifest(stem.with_suffix(".csv"), [(len(pairs), pairs.teacher, pairs.n_steps, pairs.nfe)],
                   ["n_pairs", "teacher", "n_steps", "nfe"])


def load_pairs(stem):
    from .distill import PairDataset

    stem = Path(stem)
    eps, _ = read_samples(stem.with_name(stem.name + "_eps.pfd"))
    x0, _ = read_samples(stem.with_name(stem.name + "_x0.pfd"))
    info = read_manifest(stem.with_suffix(".csv"))[0]
    return PairDataset(eps, x0, info["teacher"], int(info["n_steps"]), int(info["nfe"]))
