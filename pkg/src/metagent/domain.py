"""Core value types: geometry bounds, datasets, normalization, and the CSV pair format."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_D = 14
DEFAULT_L = 201
VALIDATION_EVERY = 11  # every 11th appended pair goes to validation -> 10:1


class DimensionError(ValueError):
    """Raised when vector or table shapes disagree with the active (D, L)."""


class InfeasibleGeometryError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class GeometryBounds:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo, hi = _frozen(self.lower), _frozen(self.upper)
        if lo.ndim != 1 or lo.shape != hi.shape or lo.size < 1:
            raise DimensionError(f"bounds must be equal-length 1-d vectors, got {lo.shape} and {hi.shape}")
        if not np.all(lo < hi):
            bad = np.flatnonzero(~(lo < hi)).tolist()
            raise ValueError(f"lower < upper violated at dimensions {bad}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def default(cls, dim: int = DEFAULT_D) -> GeometryBounds:
        return cls(-np.ones(dim), np.ones(dim))

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def midpoint(self) -> np.ndarray:
        return self.center.copy()


@dataclass(frozen=True)
class FeasibilityReport:
    in_bounds: np.ndarray  # bool per dimension
    below: np.ndarray
    above: np.ndarray

    @property
    def feasible(self) -> bool:
        return bool(np.all(self.in_bounds))

    @property
    def violations(self) -> list[int]:
        return np.flatnonzero(~self.in_bounds).tolist()


def _check_dim(g: np.ndarray, b: GeometryBounds) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if g.shape[-1:] != (b.dim,):
        raise DimensionError(f"geometry has trailing dimension {g.shape[-1:]} but bounds have D={b.dim}")
    return g


def validate_geometry(g, b: GeometryBounds) -> FeasibilityReport:
    """Per-dimension bound check; both bounds are inclusive."""
    g = _check_dim(g, b)
    if g.ndim != 1:
        raise DimensionError("validate_geometry expects a single geometry vector")
    below = g < b.lower
    above = g > b.upper
    return FeasibilityReport(in_bounds=~(below | above) & np.isfinite(g), below=below, above=above)


def normalize(g, b: GeometryBounds) -> np.ndarray:
    """Affine map of the feasible box onto [-1, 1]^D. Accepts a vector or a (n, D) batch."""
    g = _check_dim(g, b)
    if np.any(g < b.lower) or np.any(g > b.upper) or not np.all(np.isfinite(g)):
        raise InfeasibleGeometryError("normalize requires a feasible geometry")
    return 2.0 * (g - b.lower) / b.width - 1.0


def denormalize(z, b: GeometryBounds) -> np.ndarray:
    z = _check_dim(z, b)
    return b.lower + 0.5 * (z + 1.0) * b.width


def split_indices(k: int) -> tuple[np.ndarray, np.ndarray]:
    """Train/validation index partition for a dataset of k pairs.

    Validation gets floor(k/11) pairs (every 11th). Below 11 pairs the rule would
    leave validation empty, so the last pair is held out instead.
    """
    idx = np.arange(k)
    val_mask = (idx + 1) % VALIDATION_EVERY == 0
    if k > 0 and k < VALIDATION_EVERY:
        val_mask[-1] = True
    return idx[~val_mask], idx[val_mask]


@dataclass(frozen=True)
class Dataset:
    """Append-only ordered geometry/spectrum pairs with a deterministic 10:1 split."""

    geometries: np.ndarray  # (k, D)
    spectra: np.ndarray  # (k, L)
    train_idx: np.ndarray = field(init=False, repr=False)
    val_idx: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        X = _frozen(self.geometries)
        Y = _frozen(self.spectra)
        if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
            raise DimensionError(f"geometries {X.shape} and spectra {Y.shape} are not paired tables")
        tr, va = split_indices(X.shape[0])
        tr.setflags(write=False)
        va.setflags(write=False)
        object.__setattr__(self, "geometries", X)
        object.__setattr__(self, "spectra", Y)
        object.__setattr__(self, "train_idx", tr)
        object.__setattr__(self, "val_idx", va)

    @classmethod
    def empty(cls, dim: int = DEFAULT_D, length: int = DEFAULT_L) -> Dataset:
        return cls(np.zeros((0, dim)), np.zeros((0, length)))

    def __len__(self) -> int:
        return self.geometries.shape[0]

    @property
    def dim(self) -> int:
        return self.geometries.shape[1]

    @property
    def length(self) -> int:
        return self.spectra.shape[1]

    def append(self, geometries, spectra) -> Dataset:
        X = np.asarray(geometries, dtype=np.float64).reshape(-1, self.dim)
        Y = np.asarray(spectra, dtype=np.float64).reshape(-1, self.length)
        return Dataset(np.vstack([self.geometries, X]), np.vstack([self.spectra, Y]))

    def head(self, k: int) -> Dataset:
        return Dataset(self.geometries[:k], self.spectra[:k])

    @property
    def train(self) -> tuple[np.ndarray, np.ndarray]:
        return self.geometries[self.train_idx], self.spectra[self.train_idx]

    @property
    def validation(self) -> tuple[np.ndarray, np.ndarray]:
        return self.geometries[self.val_idx], self.spectra[self.val_idx]


def _first_line_is_header(path: Path) -> bool:
    with open(path) as fh:
        first = fh.readline()
    try:
        [float(tok) for tok in first.strip().split(",") if tok.strip()]
    except ValueError:
        return True
    return False


def read_dataset_csv(path, dim: int = DEFAULT_D, length: int | None = None, max_rows: int | None = None) -> Dataset:
    """Read D geometry columns followed by L spectrum columns, with or without a header row."""
    path = Path(path)
    skip = 1 if _first_line_is_header(path) else 0
    table = np.loadtxt(path, delimiter=",", skiprows=skip, ndmin=2, max_rows=max_rows)
    if table.shape[0] == 0:
        return Dataset.empty(dim, length or DEFAULT_L)
    n_cols = table.shape[1]
    if n_cols <= dim or (length is not None and n_cols != dim + length):
        expected = f"{dim}+{length}" if length is not None else f">{dim}"
        raise DimensionError(f"{path}: {n_cols} columns, expected {expected}")
    return Dataset(table[:, :dim], table[:, dim:])


def count_csv_columns(path) -> int:
    path = Path(path)
    with open(path) as fh:
        line = fh.readline()
        if _first_line_is_header(path):
            line = fh.readline()
    return len([tok for tok in line.strip().split(",") if tok.strip()])


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "w") as fh:
        fh.write(text)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def write_dataset_csv(ds: Dataset, path, header: bool = True) -> None:
    cols = [f"g{d}" for d in range(ds.dim)] + [f"s{j}" for j in range(ds.length)]
    table = np.hstack([ds.geometries, ds.spectra])
    lines = [",".join(cols)] if header else []
    lines += [",".join(repr(float(v)) for v in row) for row in table]
    atomic_write_text(path, "\n".join(lines) + "\n")
