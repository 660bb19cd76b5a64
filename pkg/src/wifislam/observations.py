"""Observation records, visibility models, and the CSV observation log.

A record is one timestamped RSSI vector with a per-AP visibility mask.
Masked entries are carried as NaN both in memory and on disk so that any
estimator reading past the mask fails loudly instead of silently using a
stale value.

Log format (comma separated, header row):

    t,mask,y_1,...,y_B[,truth_x,truth_y]

`mask` is a bitstring like ``10110`` (1 = AP visible), masked y columns hold
``nan``, and the two truth columns are present only for simulated/test data
(blank fields mean "no truth for this record"). Floats are written with 17
significant digits so a round trip is bit-exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class LogFormatError(ValueError):
    """Malformed observation-log content; message carries the line number."""


@dataclass
class ObservationRecord:
    t: int
    y: np.ndarray
    mask: np.ndarray
    truth: tuple[int, int] | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.y.shape != self.mask.shape:
            raise ValueError("y and mask must have the same length")

    @property
    def n_aps(self) -> int:
        return self.y.shape[0]

    def masked_y(self) -> np.ndarray:
        """y with hidden entries replaced by the NaN sentinel."""
        out = self.y.copy()
        out[~self.mask] = np.nan
        return out


def make_visibility(kind: str = "full", p=None, radius: float | None = None):
    """Return visibility(rng, cell_index, grid) -> (B,) bool mask.

    kind: "full" (all APs), "bernoulli" (each AP independently visible with
    probability p, scalar or per-AP), or "range" (visible iff the AP is
    within `radius` grid units of the current cell).
    """
    if kind == "full":
        return lambda rng, x, grid: np.ones(grid.n_aps, dtype=bool)
    if kind == "bernoulli":
        if p is None:
            raise ValueError("bernoulli visibility needs p")
        p_arr = np.asarray(p, dtype=np.float64)
        return lambda rng, x, grid: rng.random(grid.n_aps) < p_arr
    if kind == "range":
        if radius is None:
            raise ValueError("range visibility needs radius")
        return lambda rng, x, grid: grid.distances[:, x] <= radius
    raise ValueError(f"unknown visibility kind {kind!r}")


def _fmt(v: float) -> str:
    return f"{v:.17g}"


def write_observation_log(path, records: list[ObservationRecord], n_aps: int | None = None) -> None:
    path = Path(path)
    if records:
        n_aps = records[0].n_aps
    elif n_aps is None:
        raise ValueError("empty log needs an explicit n_aps for the header")
    header = ["t", "mask"] + [f"y_{j + 1}" for j in range(n_aps)] + ["truth_x", "truth_y"]
    lines = [",".join(header)]
    for rec in records:
        mask_bits = "".join("1" if m else "0" for m in rec.mask)
        y = rec.masked_y()
        row = [str(rec.t), mask_bits] + [_fmt(v) for v in y]
        row += [str(rec.truth[0]), str(rec.truth[1])] if rec.truth is not None else ["", ""]
        lines.append(",".join(row))
    path.write_text("\n".join(lines) + "\n")


def read_observation_log(path) -> list[ObservationRecord]:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise LogFormatError("line 1: empty file, expected a header row")
    header = lines[0].split(",")
    y_cols = [i for i, name in enumerate(header) if name.startswith("y_")]
    if header[:2] != ["t", "mask"] or not y_cols:
        raise LogFormatError("line 1: unrecognized header")
    has_truth = "truth_x" in header and "truth_y" in header
    tx = header.index("truth_x") if has_truth else -1
    ty = header.index("truth_y") if has_truth else -1
    n_aps = len(y_cols)

    records: list[ObservationRecord] = []
    prev_t = None
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != len(header):
            raise LogFormatError(f"line {ln}: expected {len(header)} fields, got {len(parts)}")
        try:
            t = int(parts[0])
            mask = np.array([ch == "1" for ch in parts[1]], dtype=bool)
            if mask.shape[0] != n_aps:
                raise ValueError(f"mask has {mask.shape[0]} bits, expected {n_aps}")
            y = np.array([float(parts[i]) for i in y_cols])
            truth = None
            if has_truth and parts[tx] != "":
                truth = (int(parts[tx]), int(parts[ty]))
        except (ValueError, IndexError) as exc:
            raise LogFormatError(f"line {ln}: {exc}") from exc
        if prev_t is not None and t <= prev_t:
            raise LogFormatError(f"line {ln}: step index {t} does not increase (previous {prev_t})")
        prev_t = t
        records.append(ObservationRecord(t=t, y=y, mask=mask, truth=truth))
    return records
