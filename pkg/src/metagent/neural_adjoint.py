"""Neural-adjoint inverse design: gradient descent on the inputs of a frozen surrogate."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .domain import DimensionError, GeometryBounds, atomic_write_text
from .oracle import OracleConfig, resimulate_error
from .surrogate import ModelBundle, input_gradient_batch, predict

log = logging.getLogger(__name__)


class OptimizationCollapse(RuntimeError):
    pass


@dataclass(frozen=True)
class NAConfig:
    n_candidates: int = 256
    n_steps: int = 300
    step_size: float = 0.01
    boundary_weight: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n_candidates <= 0 or self.n_steps < 0 or self.step_size <= 0 or self.boundary_weight < 0:
            raise ValueError("NA hyperparameters must be positive")


@dataclass
class DesignResult:
    geometry: np.ndarray
    surrogate_loss: float
    rank: int
    resim_error: float | None = None


def boundary_loss(g, b: GeometryBounds) -> tuple[np.ndarray | float, np.ndarray]:
    """Hinge on the distance outside the box: sum_d max(0, |g_d - mu_d| - R_d/2).

    Works on one geometry or a (n, D) batch; returns the loss and its subgradient.
    """
    g = np.asarray(g, dtype=np.float64)
    if g.shape[-1] != b.dim:
        raise DimensionError(f"geometry dimension {g.shape[-1]} != bounds dimension {b.dim}")
    offset = g - b.center
    excess = np.abs(offset) - 0.5 * b.width
    active = excess > 0
    value = np.where(active, excess, 0.0).sum(axis=-1)
    grad = np.where(active, np.sign(offset), 0.0)
    return (float(value) if g.ndim == 1 else value), grad


def inverse_design(
    target,
    bundle: ModelBundle,
    b: GeometryBounds,
    cfg: NAConfig = NAConfig(),
    initial=None,
    trace: list | None = None,
) -> list[DesignResult]:
    """Descend a population of candidates toward the target; return all of them ranked.

    ``initial`` rows, if given, replace the first rows of the random start population.
    ``trace`` receives the mean total loss (fit + boundary) before each step and after the last.
    Each candidate returns its lowest-loss iterate, clamped into the box.
    """
    target = np.asarray(target, dtype=np.float64)
    D, L = bundle.spec.input_dim, bundle.spec.output_dim
    if target.shape != (L,):
        raise DimensionError(f"target has shape {target.shape}, surrogate emits {L} points")
    if b.dim != D:
        raise DimensionError(f"bounds have D={b.dim}, surrogate takes {D}")
    rng = np.random.default_rng(cfg.seed)
    G = rng.uniform(b.lower, b.upper, size=(cfg.n_candidates, D))
    if initial is not None:
        init = np.atleast_2d(np.asarray(initial, dtype=np.float64))
        G[: len(init)] = init
    m = np.zeros_like(G)
    v = np.zeros_like(G)
    alive = np.ones(len(G), dtype=bool)
    # each candidate keeps its lowest-loss iterate: Adam's normalized steps jitter around a minimum
    best_G = G.copy()
    best_total = np.full(len(G), np.inf)
    b1, b2, eps = 0.9, 0.999, 1e-8

    def keep_best(total):
        idx = np.flatnonzero(alive)
        better = total < best_total[idx]
        best_total[idx[better]] = total[better]
        best_G[idx[better]] = G[idx[better]]

    for step in range(1, cfg.n_steps + 1):
        fit, grad = input_gradient_batch(bundle, G[alive], target)
        bnd, bgrad = boundary_loss(G[alive], b)
        total = fit + cfg.boundary_weight * bnd
        grad = grad + cfg.boundary_weight * bgrad
        if trace is not None:
            trace.append(float(np.mean(total)))
        ok = np.isfinite(total) & np.all(np.isfinite(grad), axis=1)
        if not np.all(ok):
            idx = np.flatnonzero(alive)
            log.warning("dropping %d candidates with non-finite gradients at step %d", int((~ok).sum()), step)
            alive[idx[~ok]] = False
            grad, total = grad[ok], total[ok]
            if not alive.any():
                raise OptimizationCollapse("every candidate produced non-finite gradients")
        keep_best(total)
        m[alive] = b1 * m[alive] + (1 - b1) * grad
        v[alive] = b2 * v[alive] + (1 - b2) * grad**2
        mhat = m[alive] / (1 - b1**step)
        vhat = v[alive] / (1 - b2**step)
        G[alive] -= cfg.step_size * mhat / (np.sqrt(vhat) + eps)

    fit = np.mean((predict(bundle, G[alive]) - target) ** 2, axis=1)
    total = fit + cfg.boundary_weight * boundary_loss(G[alive], b)[0]
    if trace is not None and cfg.n_steps > 0:
        trace.append(float(np.mean(total)))
    keep_best(np.where(np.isfinite(total), total, np.inf))

    G = np.clip(best_G[alive], b.lower, b.upper)
    losses = np.mean((predict(bundle, G) - target) ** 2, axis=1)
    if not np.all(np.isfinite(losses)):
        keep = np.isfinite(losses)
        G, losses = G[keep], losses[keep]
        if len(G) == 0:
            raise OptimizationCollapse("no candidate has a finite surrogate loss")
    order = np.argsort(losses, kind="stable")
    return [DesignResult(geometry=G[i].copy(), surrogate_loss=float(losses[i]), rank=r + 1) for r, i in enumerate(order)]


@dataclass
class DesignReport:
    results: list[DesignResult]
    best: float | None
    median: float | None
    p95: float | None
    simulated: int
    degraded: bool = False
    errors: list[str] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "best_resim_mse": self.best,
            "median_resim_mse": self.median,
            "p95_resim_mse": self.p95,
            "simulated": self.simulated,
            "degraded": self.degraded,
            "best_surrogate_loss": self.results[0].surrogate_loss if self.results else None,
        }


def summarize(errors) -> tuple[float | None, float | None, float | None]:
    e = np.asarray([x for x in errors if x is not None], dtype=np.float64)
    if e.size == 0:
        return None, None, None
    return float(e.min()), float(np.median(e)), float(np.percentile(e, 95))


def design_report(results: list[DesignResult], target, oracle_cfg: OracleConfig | None, top_m: int = 1, resim=resimulate_error) -> DesignReport:
    """Re-simulate the top_m candidates and summarize their errors."""
    errors: list[str] = []
    degraded = oracle_cfg is None
    n_sim = 0
    for r in results[:top_m]:
        if degraded:
            break
        try:
            r.resim_error = resim(r.geometry, target, oracle_cfg)
            n_sim += 1
        except Exception as e:  # oracle failures degrade the report, they do not abort it
            errors.append(f"rank {r.rank}: {e}")
            degraded = True
    best, med, p95 = summarize(r.resim_error for r in results[:top_m])
    return DesignReport(results, best, med, p95, n_sim, degraded, errors)


def write_designs_csv(results: list[DesignResult], path) -> None:
    """rank, D geometry columns, surrogate_loss, resim_error (empty when not simulated)."""
    if not results:
        atomic_write_text(path, "rank,surrogate_loss,resim_error\n")
        return
    D = results[0].geometry.size
    lines = [",".join(["rank"] + [f"g{d}" for d in range(D)] + ["surrogate_loss", "resim_error"])]
    for r in results:
        resim = "" if r.resim_error is None else repr(r.resim_error)
        lines.append(",".join([str(r.rank)] + [repr(float(x)) for x in r.geometry] + [repr(r.surrogate_loss), resim]))
    atomic_write_text(path, "\n".join(lines) + "\n")
