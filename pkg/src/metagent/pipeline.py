"""End-to-end drivers: the planner-led run and the two experiment harnesses."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .agents.llm import ChatClient, make_client
from .agents.memory import MemoryStore
from .agents.planner import (
    TaskSpec,
    code_modify,
    describe_task,
    plan_task,
    read_target_spectrum,
    verify_inputs,
)
from .controller import BudgetPolicy, ForwardTrainConfig, ForwardTrainResult, History, forward_train
from .domain import Dataset, atomic_write_text, normalize, read_dataset_csv
from .neural_adjoint import NAConfig, design_report, inverse_design, summarize, write_designs_csv
from .oracle import OracleConfig, available_rows, sample_geometries, simulate, OracleCapacityError
from .surrogate import BUNDLE_FORMAT_VERSION, ModelBundle, load_bundle, predict

log = logging.getLogger(__name__)

HELDOUT_OFFSET = 10**12  # held-out geometries use stream indices far beyond any data budget


@dataclass
class EngineConfig:
    oracle: OracleConfig = field(default_factory=OracleConfig)
    budgets: BudgetPolicy = field(default_factory=BudgetPolicy)
    k0: int = 550
    na: NAConfig = field(default_factory=NAConfig)
    controller_mode: str = "deterministic"  # deterministic | mock | llm
    proposer_mode: str = "deterministic"
    planner_mode: str = "deterministic"
    mock_script: str | None = None
    memory_dir: str | None = None
    out_dir: str = "out"
    seed: int = 0
    spec_overrides: dict = field(default_factory=dict)
    test_retrains: bool = True
    top_m: int = 1
    n_test_targets: int = 100
    n_forward_test: int = 1000
    test_path: str | None = None
    zero_timestamps: bool = False

    def __post_init__(self):
        if self.k0 < 11:
            raise ValueError("k0 must be >= 11")
        if self.k0 > self.budgets.data_budget:
            raise ValueError("k0 must not exceed the data budget")
        for m in (self.controller_mode, self.proposer_mode, self.planner_mode):
            if m not in ("deterministic", "mock", "llm"):
                raise ValueError(f"unknown mode {m!r}")

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            d[f.name] = v.to_dict() if hasattr(v, "to_dict") else asdict(v) if is_dataclass(v) else v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> EngineConfig:
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        oracle = d.pop("oracle", {}) or {}
        for key in ("lower", "upper"):
            if oracle.get(key) is not None:
                oracle[key] = tuple(oracle[key])
        return cls(
            oracle=OracleConfig(**oracle),
            budgets=BudgetPolicy(**(d.pop("budgets", {}) or {})),
            na=NAConfig(**(d.pop("na", {}) or {})),
            **d,
        )

    def client(self, mode: str) -> ChatClient | None:
        return make_client(mode, self.mock_script) if mode != "deterministic" else None


def forward_config(cfg: EngineConfig, client: ChatClient | None, out_dir: Path, memory: MemoryStore | None = None) -> ForwardTrainConfig:
    return ForwardTrainConfig(
        oracle=cfg.oracle,
        policy=cfg.budgets,
        k0=cfg.k0,
        controller_mode=cfg.controller_mode,
        proposer_mode=cfg.proposer_mode,
        client=client,
        memory=memory,
        history_path=out_dir / "history.json",
        zero_timestamps=cfg.zero_timestamps,
        spec_overrides=cfg.spec_overrides,
        test_retrains=cfg.test_retrains,
        seed_offset=cfg.seed,
    )


# --- report files ------------------------------------------------------------------


def write_trajectory(history: History, path) -> None:
    """round, k, metric, action per event (the MSE vs dataset size curve)."""
    lines = ["round,k,metric,action"]
    for e in history:
        m = repr(e.metric) if math.isfinite(e.metric) else "inf"
        lines.append(f"{e.round},{e.k},{m},{e.action.value}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_distribution(values, path, label: str = "mse") -> dict:
    """One row per sample then a summary row carrying mean/median/p95."""
    vals = np.asarray(values, dtype=np.float64)
    best, med, p95 = summarize(vals)
    summary = {"n": int(vals.size), "mean": float(vals.mean()) if vals.size else None, "min": best, "median": med, "p95": p95}
    lines = [f"index,{label}"] + [f"{i},{v!r}" for i, v in enumerate(vals.tolist())]
    lines.append("summary," + ";".join(f"{k}={v}" for k, v in summary.items()))
    atomic_write_text(path, "\n".join(lines) + "\n")
    return summary


def heldout_geometries(cfg: OracleConfig, n: int) -> np.ndarray:
    return sample_geometries(cfg.seed, HELDOUT_OFFSET, HELDOUT_OFFSET + n, cfg.bounds)


def heldout_set(cfg: EngineConfig, n: int) -> Dataset | None:
    """Test pairs never seen in training: fresh synthetic draws or an explicit test file."""
    if cfg.test_path:
        ds = read_dataset_csv(cfg.test_path, dim=cfg.oracle.dim, length=cfg.oracle.length)
        return ds.head(min(n, len(ds)))
    if cfg.oracle.kind == "synthetic":
        G = heldout_geometries(cfg.oracle, n)
        return Dataset(G, simulate(normalize(G, cfg.oracle.bounds), cfg.oracle.length))
    return None


def forward_test_mse(bundle: ModelBundle, test: Dataset) -> np.ndarray:
    return np.mean((predict(bundle, test.geometries) - test.spectra) ** 2, axis=1)


def inverse_evaluation(bundle: ModelBundle, cfg: EngineConfig, n_targets: int) -> tuple[np.ndarray, np.ndarray]:
    """Inverse-design n held-out simulated targets; return (re-simulation MSE, surrogate loss) per target."""
    if cfg.oracle.kind != "synthetic":
        raise ValueError("re-simulation needs the synthetic oracle")
    G = heldout_geometries(replace(cfg.oracle, seed=cfg.oracle.seed + 1), n_targets)
    targets = simulate(normalize(G, cfg.oracle.bounds), cfg.oracle.length)
    b = cfg.oracle.bounds
    resim, surr = [], []
    for i, t in enumerate(targets):
        results = inverse_design(t, bundle, b, replace(cfg.na, seed=cfg.na.seed + i))
        rep = design_report(results, t, cfg.oracle, top_m=1)
        resim.append(rep.best)
        surr.append(results[0].surrogate_loss)
        log.debug("target %d: resim %.3e surrogate %.3e", i, rep.best, results[0].surrogate_loss)
    return np.array(resim), np.array(surr)


def write_manifest(out_dir: Path, artifacts: dict, cfg: EngineConfig, extra: dict | None = None) -> Path:
    manifest = {
        "package_version": __version__,
        "bundle_format_version": BUNDLE_FORMAT_VERSION,
        "artifacts": {k: str(v) for k, v in artifacts.items()},
        "seeds": {"engine": cfg.seed, "oracle": cfg.oracle.seed, "na": cfg.na.seed},
        "deterministic_training": True,
        "config": cfg.to_dict(),
    }
    manifest.update(extra or {})
    path = out_dir / "manifest.json"
    atomic_write_text(path, json.dumps(manifest, indent=2, default=str))
    return path


def _dump(path: Path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, default=str))


# --- run -----------------------------------------------------------------------------


@dataclass
class RunOutcome:
    status: int
    artifacts: dict
    metrics: dict
    task: TaskSpec | None = None
    forward: ForwardTrainResult | None = None


def run_pipeline(cfg: EngineConfig, query: str, answers: dict | None = None, out_dir=None, ask=None) -> RunOutcome:
    """plan -> verify -> forward_train -> code_modify -> inverse_design -> design_report."""
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    memory = MemoryStore(cfg.memory_dir) if cfg.memory_dir else None
    artifacts: dict[str, Path] = {}
    metrics: dict = {"stages": {}}
    task = None
    fwd = None
    stage = "plan"
    t0 = time.time()
    try:
        answers = dict(answers or {})
        answers.setdefault("input_dim", cfg.oracle.dim)
        answers.setdefault("output_dim", cfg.oracle.length)
        task = plan_task(query, answers, cfg.planner_mode, cfg.client(cfg.planner_mode), ask=ask)
        metrics["task"] = task.to_dict()
        stage = "verify"
        verify_inputs(task)
        metrics["stages"]["verify"] = "ok"

        bundle = None
        if task.plan in ("forward-only", "both"):
            stage = "forward_train"
            fcfg = forward_config(cfg, cfg.client(cfg.controller_mode), out, memory)
            if task.mode == "fixed-dataset":
                fcfg = fixed_dataset_config(fcfg, task.dataset_path)
            fwd = forward_train(task, fcfg)
            artifacts["history"] = out / "history.json"
            metrics["forward"] = {
                "best_model_id": fwd.best_model_id,
                "latest_model_id": fwd.latest_model_id,
                "validation_mse": fwd.bundle.metric if fwd.bundle else None,
                "target_metric": task.target_metric,
                "target_met": bool(fwd.bundle and fwd.bundle.metric <= task.target_metric),
                "final_k": len(fwd.dataset),
                "rounds": fwd.history.last.round,
                "termination": fwd.termination,
            }
            if fwd.bundle is None:
                raise RuntimeError("no model trained successfully")
            stage = "code_modify"
            artifacts["forward_model"] = code_modify(fwd.bundle, out)
            bundle = load_bundle(artifacts["forward_model"])
            if not metrics["forward"]["target_met"]:
                log.warning("forward model MSE %.3e misses target %.3e; continuing with the best model", bundle.metric, task.target_metric)
        if task.plan in ("inverse-only", "both"):
            stage = "inverse_design"
            if bundle is None:
                bundle = load_bundle(task.bundle_path)
            target = np.array(read_target_spectrum(task.target_spectrum_path))
            results = inverse_design(target, bundle, cfg.oracle.bounds, cfg.na)
            oracle = cfg.oracle if cfg.oracle.kind == "synthetic" else None
            rep = design_report(results, target, oracle, top_m=cfg.top_m)
            artifacts["designs"] = out / "designs.csv"
            write_designs_csv(results, artifacts["designs"])
            metrics["inverse"] = rep.summary()
            metrics["inverse"]["best_geometry"] = results[0].geometry.tolist()
        status = 0
    except Exception as e:
        log.error("stage %s failed: %s", stage, e)
        metrics["error"] = {"stage": stage, "type": type(e).__name__, "message": str(e)}
        status = 2 if stage in ("plan", "verify") else 1
    metrics["elapsed_s"] = round(time.time() - t0, 3)
    artifacts["metrics"] = out / "metrics.json"
    _dump(artifacts["metrics"], metrics)
    write_manifest(out, artifacts, cfg)
    if status == 0 and not all(Path(p).exists() for p in artifacts.values()):
        status = 1
    return RunOutcome(status, artifacts, metrics, task, fwd)


def fixed_dataset_config(fcfg: ForwardTrainConfig, dataset_path) -> ForwardTrainConfig:
    """Pool file becomes the oracle; k0 and the data budget both equal its size, so nothing grows."""
    oracle = replace(fcfg.oracle, kind="file", path=str(dataset_path))
    n = available_rows(oracle)
    if n < 11:
        raise OracleCapacityError(11, n, dataset_path)
    policy = replace(fcfg.policy, data_budget=n)
    return replace(fcfg, oracle=oracle, policy=policy, k0=n)


# --- experiments ------------------------------------------------------------------------


def run_experiment(cfg: EngineConfig, which: str, out_dir=None, dataset_path=None, pool_size: int | None = None) -> RunOutcome:
    """target-mse grows data under the controller; fixed-dataset trains on a fixed pool only."""
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    artifacts: dict[str, Path] = {}
    metrics: dict = {"experiment": which}
    memory = MemoryStore(cfg.memory_dir) if cfg.memory_dir else None
    task = TaskSpec(
        input_dim=cfg.oracle.dim,
        output_dim=cfg.oracle.length,
        target_metric=cfg.budgets.target_metric,
        mode=which,
        plan="forward-only",
        dataset_path=str(dataset_path) if dataset_path else ("<pool>" if which == "fixed-dataset" else None),
        aide_task_description=describe_task(cfg.oracle.dim, cfg.oracle.length, cfg.budgets.target_metric, which),
    )
    fcfg = forward_config(cfg, cfg.client(cfg.controller_mode), out, memory)
    status = 0
    try:
        if which == "fixed-dataset":
            if dataset_path is None:
                if pool_size is None:
                    raise ValueError("fixed-dataset needs a dataset path or a pool size")
                from .oracle import write_pool

                dataset_path = write_pool(pool_size, cfg.oracle, out / "pool.csv")
                artifacts["pool"] = dataset_path
            fcfg = fixed_dataset_config(fcfg, dataset_path)
            if pool_size is not None and fcfg.k0 < pool_size:
                raise OracleCapacityError(pool_size, fcfg.k0, dataset_path)
        elif which != "target-mse":
            raise ValueError(f"unknown experiment {which!r}")
        fwd = forward_train(task, fcfg)
        artifacts["history"] = out / "history.json"
        artifacts["trajectory"] = out / "trajectory.csv"
        write_trajectory(fwd.history, artifacts["trajectory"])
        metrics["forward"] = {
            "validation_mse": fwd.bundle.metric if fwd.bundle else None,
            "target_metric": cfg.budgets.target_metric,
            "final_k": len(fwd.dataset),
            "rounds": fwd.history.last.round,
            "termination": fwd.termination,
            "best_model_id": fwd.best_model_id,
            "latest_model_id": fwd.latest_model_id,
        }
        if fwd.bundle is None:
            raise RuntimeError("no model trained successfully")
        artifacts["forward_model"] = code_modify(fwd.bundle, out)
        test = heldout_set(cfg, cfg.n_forward_test)
        if test is not None and len(test):
            artifacts["forward_mse_distribution"] = out / "forward_mse_distribution.csv"
            metrics["forward_test"] = write_distribution(forward_test_mse(fwd.bundle, test), artifacts["forward_mse_distribution"])
        if cfg.n_test_targets > 0 and cfg.oracle.kind == "synthetic":
            resim, surr = inverse_evaluation(fwd.bundle, cfg, cfg.n_test_targets)
            artifacts["inverse_mse_distribution"] = out / "inverse_mse_distribution.csv"
            metrics["inverse_test"] = write_distribution(resim, artifacts["inverse_mse_distribution"], "resim_mse")
            metrics["inverse_test"]["mean_surrogate_loss"] = float(np.mean(surr))
        metrics["result"] = fwd
    except Exception as e:
        log.error("experiment failed: %s", e)
        metrics["error"] = {"type": type(e).__name__, "message": str(e)}
        status = 1
    fwd = metrics.pop("result", None)
    metrics["elapsed_s"] = round(time.time() - t0, 3)
    artifacts["metrics"] = out / "metrics.json"
    _dump(artifacts["metrics"], metrics)
    write_manifest(out, artifacts, cfg, {"experiment": which})
    return RunOutcome(status, artifacts, metrics, task, fwd)
