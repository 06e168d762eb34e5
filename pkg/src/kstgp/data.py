"""CSV ingestion, [-1, 1] scaling, noise-column injection and the random split."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from kstgp.errors import DegenerateColumn, DimensionMismatch, InvalidConfig, NonBinaryLabel, ParseError

NOISE_NAME = "noise"


@dataclass
class RawTable:
    features: np.ndarray  # (N, D) in source units
    labels: np.ndarray  # (N,) int
    feature_names: list[str]


@dataclass
class Dataset:
    features: np.ndarray  # (N, D), scaled to [-1, 1]
    labels: np.ndarray
    feature_names: list[str]
    ranges: list[tuple[float, float]] = field(default_factory=list)

    def __len__(self):
        return len(self.labels)

    @property
    def dims(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> Dataset:
        return Dataset(self.features[idx], self.labels[idx], list(self.feature_names), list(self.ranges))


@dataclass
class SplitDataset:
    train: Dataset
    validation: Dataset
    split_seed: int
    train_index: np.ndarray
    validation_index: np.ndarray


def _is_number(tok: str) -> bool:
    try:
        float(tok)
    except ValueError:
        return False
    return True


def load_csv(path, label_column: int = -1) -> RawTable:
    """Read a comma-separated numeric table; a non-numeric first row is a header."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(tok.strip() for tok in r)]
    if not rows:
        raise ParseError(f"{path}: no data rows")
    header = None
    if not all(_is_number(tok) for tok in rows[0]):
        header = [tok.strip() for tok in rows[0]]
        rows = rows[1:]
        if not rows:
            raise ParseError(f"{path}: header but no data rows")
    width = len(header) if header else len(rows[0])
    if width < 2:
        raise ParseError(f"{path}: need at least one feature and a label", row=1)
    col = label_column % width if -width <= label_column < width else None
    if col is None:
        raise InvalidConfig(f"label column {label_column} out of range for {width} columns")
    values = np.empty((len(rows), width))
    first = 2 if header else 1
    for i, row in enumerate(rows):
        if len(row) != width:
            raise ParseError(f"{path}: expected {width} fields, found {len(row)}", row=i + first)
        for j, tok in enumerate(row):
            try:
                v = float(tok)
            except ValueError:
                raise ParseError(f"{path}: not a number {tok!r}", row=i + first, column=j + 1) from None
            if not np.isfinite(v):
                raise ParseError(f"{path}: non-finite value {tok!r}", row=i + first, column=j + 1)
            values[i, j] = v
    labels = values[:, col]
    bad = ~np.isin(labels, (0.0, 1.0))
    if bad.any():
        i = int(np.argmax(bad))
        raise NonBinaryLabel(f"{path}: label {labels[i]:g} at row {i + first} is not 0 or 1")
    keep = [j for j in range(width) if j != col]
    names = [header[j] for j in keep] if header else [f"x{k + 1}" for k in range(len(keep))]
    return RawTable(values[:, keep], labels.astype(int), names)


def standardize(raw: RawTable) -> Dataset:
    """Affine-map every column onto [-1, 1] using its own min and max."""
    lo = raw.features.min(axis=0)
    hi = raw.features.max(axis=0)
    for j in np.flatnonzero(hi <= lo):
        raise DegenerateColumn(f"column {raw.feature_names[j]!r} is constant")
    ranges = [(float(a), float(b)) for a, b in zip(lo, hi)]
    return Dataset(apply_ranges(raw.features, ranges), raw.labels.copy(), list(raw.feature_names), ranges)


def apply_ranges(values, ranges):
    lo, hi = np.array(ranges, dtype=float).T
    return 2.0 * (np.asarray(values, dtype=float) - lo) / (hi - lo) - 1.0


def destandardize(values, ranges):
    lo, hi = np.array(ranges, dtype=float).T
    return (np.asarray(values, dtype=float) + 1.0) * (hi - lo) / 2.0 + lo


def inject_noise_attribute(ds: Dataset, seed: int) -> Dataset:
    """Append an i.i.d. uniform [-1, 1] column named ``noise``."""
    rng = np.random.default_rng(seed)
    col = rng.uniform(-1.0, 1.0, len(ds))
    return Dataset(
        np.column_stack([ds.features, col]),
        ds.labels.copy(),
        list(ds.feature_names) + [NOISE_NAME],
        list(ds.ranges) + [(-1.0, 1.0)],
    )


def split(ds: Dataset, ratio: float = 0.7, seed: int = 0) -> SplitDataset:
    """Random permutation by ``seed``; the first floor(ratio * N) rows train."""
    if not 0.0 < ratio < 1.0:
        raise InvalidConfig(f"split ratio must lie in (0, 1), got {ratio}")
    if len(ds) < 2:
        raise InvalidConfig("need at least two instances to split")
    perm = np.random.default_rng(seed).permutation(len(ds))
    cut = int(np.floor(ratio * len(ds)))
    tr, va = perm[:cut], perm[cut:]
    return SplitDataset(ds.subset(tr), ds.subset(va), seed, tr, va)


def prepare(path, label_column=-1, noise_seed=None, ranges=None) -> Dataset:
    """Load, scale (with ``ranges`` if given) and optionally add the noise column."""
    raw = load_csv(path, label_column)
    if ranges is None:
        ds = standardize(raw)
    else:
        if len(ranges) != raw.features.shape[1]:
            raise DimensionMismatch(
                f"data has {raw.features.shape[1]} features, model was trained on {len(ranges)}"
            )
        ds = Dataset(apply_ranges(raw.features, ranges), raw.labels.copy(), raw.feature_names, list(ranges))
    if noise_seed is not None:
        ds = inject_noise_attribute(ds, noise_seed)
    return ds
