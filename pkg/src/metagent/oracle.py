"""Ground-truth spectra: an analytic four-resonator model and a file-backed replay sampler.

Parameter layout of the 14-dimensional (normalized) geometry::

    0      height h
    1      periodicity p
    2..5   semi-major axes r_ma, one per resonator
    6..9   semi-minor axes r_mi
    10..13 rotation angles theta
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from .domain import (
    DEFAULT_D,
    DEFAULT_L,
    Dataset,
    DimensionError,
    GeometryBounds,
    normalize,
    read_dataset_csv,
)

log = logging.getLogger(__name__)

N_RESONATORS = 4
H, P = 0, 1
R_MA = slice(2, 6)
R_MI = slice(6, 10)
THETA = slice(10, 14)


class OracleCapacityError(RuntimeError):
    def __init__(self, requested: int, available: int, path=None):
        super().__init__(f"oracle can supply {available} rows but {requested} were requested" + (f" ({path})" if path else ""))
        self.requested = requested
        self.available = available


@dataclass(frozen=True)
class OracleConfig:
    kind: Literal["synthetic", "file"] = "synthetic"
    dim: int = DEFAULT_D
    length: int = DEFAULT_L
    seed: int = 0
    path: str | None = None
    # physical ranges of the design parameters; None -> [-1, 1]
    lower: tuple[float, ...] | None = None
    upper: tuple[float, ...] | None = None
    _cache: dict = field(default_factory=dict, init=False, compare=False, repr=False)

    def __post_init__(self):
        if self.kind not in ("synthetic", "file"):
            raise ValueError(f"unknown oracle kind {self.kind!r}")
        if self.kind == "file" and not self.path:
            raise ValueError("file-backed oracle requires a path")
        if self.kind == "synthetic" and self.dim != 4 * N_RESONATORS - 2:
            raise ValueError("synthetic oracle needs D = 14 (h, p and four resonators)")
        if self.length < 2:
            raise ValueError("spectrum length must be at least 2")

    @property
    def bounds(self) -> GeometryBounds:
        if self.lower is None:
            return GeometryBounds.default(self.dim)
        return GeometryBounds(np.array(self.lower), np.array(self.upper))

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if not k.startswith("_")}


def frequency_grid(length: int = DEFAULT_L) -> np.ndarray:
    return np.arange(length) / (length - 1)


def resonator_params(z: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Centers, widths and depths of the four dips for normalized geometries z of shape (n, 14)."""
    h = z[:, H : H + 1]
    p = z[:, P : P + 1]
    r_ma, r_mi, theta = z[:, R_MA], z[:, R_MI], z[:, THETA]
    centers = 0.5 + 0.35 * (0.6 * r_ma + 0.25 * r_mi + 0.1 * h + 0.05 * p)
    widths = 0.015 + 0.025 * (r_mi + 1.0)
    depths = 0.4 + 0.25 * (1.0 + np.sin(np.pi * theta))
    return centers, widths, depths


def simulate(z, length: int = DEFAULT_L) -> np.ndarray:
    """Spectrum of one normalized geometry (14,) or a batch (n, 14); values clamped to [0, 1]."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    z2 = np.atleast_2d(z)
    if z2.ndim != 2 or z2.shape[1] != 14:
        raise DimensionError(f"synthetic oracle expects 14 parameters, got shape {z.shape}")
    if not np.all(np.isfinite(z2)):
        raise ValueError("geometry contains non-finite values")
    f = frequency_grid(length)
    c, w, a = resonator_params(z2)
    w2 = w[:, :, None] ** 2
    dips = a[:, :, None] * w2 / ((f[None, None, :] - c[:, :, None]) ** 2 + w2)
    s = np.clip(1.0 - dips.sum(axis=1), 0.0, 1.0)
    return s[0] if single else s


def simulate_physical(g, cfg: OracleConfig) -> np.ndarray:
    """Simulate geometries given in the oracle's configured parameter ranges."""
    if cfg.kind != "synthetic":
        raise ValueError("only the synthetic oracle can simulate new geometries")
    return simulate(normalize(g, cfg.bounds), cfg.length)


def sample_geometries(seed: int, start: int, stop: int, bounds: GeometryBounds) -> np.ndarray:
    """Uniform draws for global indices [start, stop), each keyed by (seed, index).

    Every index gets its own stream, so the draw for index i never depends on how
    the range was batched across calls.
    """
    out = np.empty((stop - start, bounds.dim))
    for row, i in enumerate(range(start, stop)):
        rng = np.random.default_rng([seed, i])
        out[row] = rng.uniform(bounds.lower, bounds.upper)
    return out


def _file_table(cfg: OracleConfig) -> Dataset:
    if "table" not in cfg._cache:
        cfg._cache["table"] = read_dataset_csv(cfg.path, dim=cfg.dim, length=cfg.length)
    return cfg._cache["table"]


def available_rows(cfg: OracleConfig) -> int | None:
    return len(_file_table(cfg)) if cfg.kind == "file" else None


def grow_dataset(current: Dataset, k_target: int, cfg: OracleConfig) -> Dataset:
    """Extend ``current`` to exactly k_target pairs; existing pairs are never touched."""
    k_prev = len(current)
    if k_target < k_prev:
        raise ValueError(f"cannot shrink dataset from {k_prev} to {k_target}")
    if current.dim != cfg.dim or current.length != cfg.length:
        raise DimensionError(f"dataset is ({current.dim}, {current.length}), oracle is ({cfg.dim}, {cfg.length})")
    if k_target == k_prev:
        return current
    if cfg.kind == "file":
        table = _file_table(cfg)
        if len(table) < k_target:
            raise OracleCapacityError(k_target, len(table), cfg.path)
        new_g = table.geometries[k_prev:k_target]
        new_s = table.spectra[k_prev:k_target]
    else:
        new_g = sample_geometries(cfg.seed, k_prev, k_target, cfg.bounds)
        new_s = simulate(normalize(new_g, cfg.bounds), cfg.length)
    log.debug("grew dataset %d -> %d", k_prev, k_target)
    return current.append(new_g, new_s)


def resimulate_error(g, target, cfg: OracleConfig) -> float:
    """MSE between the simulated spectrum of g and the target spectrum."""
    target = np.asarray(target, dtype=np.float64)
    if target.shape != (cfg.length,):
        raise DimensionError(f"target has shape {target.shape}, oracle length is {cfg.length}")
    s = simulate_physical(g, cfg)
    return float(np.mean((s - target) ** 2))


def pool_dataset(n: int, cfg: OracleConfig) -> Dataset:
    return grow_dataset(Dataset.empty(cfg.dim, cfg.length), n, cfg)


def write_pool(n: int, cfg: OracleConfig, path) -> Path:
    from .domain import write_dataset_csv

    path = Path(path)
    write_dataset_csv(pool_dataset(n, cfg), path)
    return path
