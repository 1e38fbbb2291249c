"""Tabular ingestion, missingness generation, whitening and attribute doubling.

Missing cells are tracked by an explicit boolean mask; the value slots under
the mask are kept at 0.0 and never read by the statistics below.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

MECHANISMS = ("independent", "patch", "square")
MISSING_TOKENS = {"", "nan", "NaN", "NAN"}


class CSVParseError(ValueError):
    def __init__(self, message, row=None, column=None):
        loc = []
        if row is not None:
            loc.append(f"row {row}")
        if column is not None:
            loc.append(f"column {column}")
        super().__init__(f"{message} ({', '.join(loc)})" if loc else message)
        self.row = row
        self.column = column


@dataclass
class Dataset:
    """Numeric table plus a missing-cell mask (``True`` = missing).

    ``truth`` optionally carries the complete values for scoring, in the same
    coordinates as ``values``.
    """

    values: np.ndarray
    missing: np.ndarray
    columns: list = field(default_factory=list)
    grid_shape: tuple | None = None
    truth: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("values must be a 2-d matrix")
        self.missing = np.asarray(self.missing, dtype=bool)
        if self.missing.shape != self.values.shape:
            raise ValueError("mask shape must match values")
        self.values = np.where(self.missing, 0.0, self.values)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("observed entries must be finite")
        if not self.columns:
            self.columns = [f"x{j}" for j in range(self.values.shape[1])]
        if len(self.columns) != self.values.shape[1]:
            raise ValueError("one column name per attribute required")
        if self.grid_shape is not None:
            h, w = self.grid_shape
            if h * w != self.values.shape[1]:
                raise ValueError("grid shape does not match the number of columns")
            self.grid_shape = (int(h), int(w))
        if self.truth is not None:
            self.truth = np.asarray(self.truth, dtype=np.float64)

    @property
    def shape(self):
        return self.values.shape

    def with_nans(self):
        return np.where(self.missing, np.nan, self.values)

    @classmethod
    def from_array(cls, X, **kwargs):
        """Build from an array where NaN marks missing entries."""
        X = np.asarray(X, dtype=np.float64)
        return cls(np.nan_to_num(X), np.isnan(X), **kwargs)


def load_csv(path, grid_shape=None):
    """Read a headed numeric CSV. Empty cells and ``NaN`` tokens are missing."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CSVParseError("empty file") from None
        rows, mask = [], []
        for r, record in enumerate(reader, start=1):
            if not record:
                continue
            if len(record) != len(header):
                raise CSVParseError(f"expected {len(header)} cells, found {len(record)}", row=r)
            vals, miss = [], []
            for c, cell in enumerate(record):
                cell = cell.strip()
                if cell in MISSING_TOKENS:
                    vals.append(0.0)
                    miss.append(True)
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise CSVParseError(f"non-numeric cell {cell!r}", row=r, column=header[c]) from None
                if not math.isfinite(v):
                    raise CSVParseError(f"non-finite cell {cell!r}", row=r, column=header[c])
                vals.append(v)
                miss.append(False)
            rows.append(vals)
            mask.append(miss)
    values = np.array(rows, dtype=np.float64).reshape(len(rows), len(header))
    return Dataset(values, np.array(mask, dtype=bool).reshape(values.shape),
                   [h.strip() for h in header], grid_shape)


def _fmt(v):
    return repr(float(v))


def write_csv(path, values, columns, missing=None):
    values = np.asarray(values)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for i, row in enumerate(values):
            if missing is None:
                w.writerow([_fmt(v) for v in row])
            else:
                w.writerow(["" if m else _fmt(v) for v, m in zip(row, missing[i])])


def write_mask_csv(path, missing, columns):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in np.asarray(missing, dtype=bool):
            w.writerow([int(v) for v in row])


@dataclass(frozen=True)
class MaskSpec:
    """Missingness mechanism: ``independent``, ``patch`` or ``square`` (observation)."""

    mechanism: str = "independent"
    rate: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.mechanism not in MECHANISMS:
            raise ValueError(f"mechanism must be one of {MECHANISMS}")
        if not 0.0 <= self.rate < 1.0:
            raise ValueError("rate must lie in [0, 1)")


def _patch_mask(h, w, rate, rng):
    mask = np.zeros((h, w), dtype=bool)
    area = rate * h * w
    if area <= 0:
        return mask
    side = math.sqrt(area)
    lo, hi = 0.5 * side, min(w, 2.0 * side)
    width = int(min(w, max(1, round(rng.uniform(lo, max(lo, hi))))))
    height = int(min(h, max(1, round(area / width))))
    top = int(rng.integers(0, h - height + 1))
    left = int(rng.integers(0, w - width + 1))
    mask[top:top + height, left:left + width] = True
    return mask


def _square_observation_mask(h, w, rate, rng):
    side = int(min(h, w, max(1, round(math.sqrt((1.0 - rate) * h * w)))))
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    mask = np.ones((h, w), dtype=bool)
    mask[top:top + side, left:left + side] = False
    return mask


def square_side(h, w, rate):
    """Side length of the observed square for a square-observation rate."""
    return int(min(h, w, max(1, round(math.sqrt((1.0 - rate) * h * w)))))


def apply_mask(table, spec, rng=None):
    """Mask ``table`` per ``spec``; the complete values are kept as ``truth``.

    Without an explicit ``rng`` the generator is seeded from ``spec.seed``.
    Cells already missing stay missing.
    """
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    n, d = table.shape
    if spec.mechanism == "independent":
        new = rng.random((n, d)) < spec.rate
    else:
        if table.grid_shape is None:
            raise ValueError(f"{spec.mechanism} missingness needs a grid-shaped table")
        h, w = table.grid_shape
        make = _patch_mask if spec.mechanism == "patch" else _square_observation_mask
        new = np.stack([make(h, w, spec.rate, rng).ravel() for _ in range(n)]) if n else np.zeros((0, d), bool)
    truth = table.truth if table.truth is not None else table.values.copy()
    return replace(table, missing=table.missing | new, truth=truth)


@dataclass
class WhiteningStats:
    """Per-attribute observed mean/std and observed range (original units)."""

    mean: np.ndarray
    std: np.ndarray
    min: np.ndarray
    max: np.ndarray

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in ("mean", "std", "min", "max")}

    @classmethod
    def from_dict(cls, doc):
        return cls(*(np.asarray(doc[k], dtype=np.float64) for k in ("mean", "std", "min", "max")))

    def apply(self, X):
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.std

    def invert(self, X):
        return np.asarray(X, dtype=np.float64) * self.std + self.mean


def observed_stats(ds):
    obs = ~ds.missing
    count = obs.sum(axis=0)
    if np.any(count == 0):
        bad = [ds.columns[j] for j in np.flatnonzero(count == 0)]
        raise ValueError(f"columns with no observed entries: {bad}")
    mean = (ds.values * obs).sum(axis=0) / count
    var = (((ds.values - mean) * obs) ** 2).sum(axis=0) / count
    std = np.sqrt(var)
    if np.any(std == 0):
        bad = [ds.columns[j] for j in np.flatnonzero(std == 0)]
        raise ValueError(f"constant observed columns cannot be whitened: {bad}")
    lo = np.where(obs, ds.values, np.inf).min(axis=0)
    hi = np.where(obs, ds.values, -np.inf).max(axis=0)
    return WhiteningStats(mean, std, lo, hi)


def whiten(ds, stats=None):
    """Standardize every attribute by its observed mean and std."""
    stats = observed_stats(ds) if stats is None else stats
    truth = None if ds.truth is None else stats.apply(ds.truth)
    return replace(ds, values=np.where(ds.missing, 0.0, stats.apply(ds.values)), truth=truth), stats


def unwhiten(ds, stats):
    truth = None if ds.truth is None else stats.invert(ds.truth)
    return replace(ds, values=np.where(ds.missing, 0.0, stats.invert(ds.values)), truth=truth)


def double_attributes(ds):
    """Copy every column (and its mask) so the width doubles."""
    return Dataset(np.hstack([ds.values, ds.values]), np.hstack([ds.missing, ds.missing]),
                   list(ds.columns) + [f"{c}_copy" for c in ds.columns], None,
                   None if ds.truth is None else np.hstack([ds.truth, ds.truth]))
