"""The Forward_Train agentic loop: decide -> grow data -> generate/test -> log, until done or out of budget."""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Callable, Literal

from pydantic import BaseModel, Field, model_validator

from .agents.llm import ChatClient, LLMSchemaError, LLMTransportError, structured
from .agents.memory import MemoryStore
from .agents.planner import TaskSpec
from .domain import Dataset, atomic_write_text
from .oracle import OracleConfig, grow_dataset
from .surrogate import DivergenceError, ModelBundle, ModelSpec, evaluate, train

log = logging.getLogger(__name__)

ZERO_TIME = "1970-01-01T00:00:00Z"
INIT_REASON = "Initialization"


class Action(str, Enum):
    GENERATE = "generate"
    TEST = "test"
    DONE = "done"


class ExplorationExhausted(RuntimeError):
    pass


@dataclass(frozen=True)
class HistoryEvent:
    round: int
    k: int
    metric: float
    reason: str
    action: Action
    model_id: str | None = None
    timestamp: str = ZERO_TIME

    def to_json(self) -> dict:
        return {
            "round": self.round,
            "k": self.k,
            "metric": self.metric if math.isfinite(self.metric) else "inf",
            "reason": self.reason,
            "action": self.action.value,
            "model_id": self.model_id,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_json(cls, d: dict) -> HistoryEvent:
        metric = d["metric"]
        return cls(
            round=int(d["round"]),
            k=int(d["k"]),
            metric=math.inf if metric == "inf" else float(metric),
            reason=d["reason"],
            action=Action(d["action"]),
            model_id=d.get("model_id"),
            timestamp=d.get("timestamp", ZERO_TIME),
        )


class History:
    """Ordered event log; rewritten atomically to ``path`` after every append."""

    def __init__(self, path: str | Path | None = None, events: list[HistoryEvent] | None = None):
        self.path = Path(path) if path is not None else None
        self.events: list[HistoryEvent] = list(events or [])

    def __len__(self):
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def __getitem__(self, i):
        return self.events[i]

    @property
    def last(self) -> HistoryEvent:
        return self.events[-1]

    def append(self, ev: HistoryEvent) -> None:
        if self.events:
            prev = self.events[-1]
            if ev.round <= prev.round:
                raise ValueError(f"round must increase ({prev.round} -> {ev.round})")
            if ev.k < prev.k:
                raise ValueError(f"dataset size must not shrink ({prev.k} -> {ev.k})")
        elif ev.reason != INIT_REASON or ev.action is not Action.GENERATE:
            raise ValueError("the first event must be the Initialization/generate event")
        if not (ev.metric >= 0):
            raise ValueError("metric must be >= 0")
        self.events.append(ev)
        if self.path is not None:
            self.save(self.path)

    def to_json(self) -> str:
        return json.dumps([e.to_json() for e in self.events], indent=2)

    def save(self, path) -> None:
        atomic_write_text(path, self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> History:
        return cls(events=[HistoryEvent.from_json(d) for d in json.loads(Path(path).read_text())])

    def best_metric(self) -> float:
        ms = [e.metric for e in self.events if e.action is not Action.DONE]
        return min(ms) if ms else math.inf


@dataclass(frozen=True)
class ControllerDecision:
    action: Action
    k_next: int
    reason: str

    def __post_init__(self):
        if not self.reason:
            raise ValueError("a decision needs a reason")


@dataclass(frozen=True)
class BudgetPolicy:
    max_rounds: int = 50
    data_budget: int = 50_000
    target_metric: float = 2e-3

    def __post_init__(self):
        if self.max_rounds <= 0 or self.data_budget <= 0 or not (self.target_metric > 0):
            raise ValueError("budget policy values must be positive")


# --- deterministic policy --------------------------------------------------------

GROWTH_FACTOR = 1.5
SATURATION_RATIO = 0.1


def _rate(a: HistoryEvent, b: HistoryEvent) -> float | None:
    """Relative MSE improvement per added sample between two events, None if no data was added."""
    if b.k <= a.k or not (math.isfinite(a.metric) and math.isfinite(b.metric)) or a.metric <= 0:
        return None
    return (a.metric - b.metric) / a.metric / (b.k - a.k)


def diminishing_returns(history: History, ratio: float = SATURATION_RATIO) -> tuple[bool, str]:
    """Has adding data stopped paying off for the current model?

    Looks only at events since the latest generate (they share an architecture).
    The last data step is compared with the step before it; with a single data
    step, any non-improvement counts as saturated.
    """
    events = [e for e in history if e.action is not Action.DONE]
    start = max(i for i, e in enumerate(events) if e.action is Action.GENERATE)
    seg = events[start:]
    rates = [r for r in (_rate(a, b) for a, b in zip(seg, seg[1:])) if r is not None]
    if not rates:
        return False, ""
    last = rates[-1]
    if len(rates) == 1:
        if last <= 0:
            return True, f"no MSE gain from the last {seg[-1].k - seg[-2].k} samples"
        return False, ""
    prev = rates[-2]
    if prev <= 0 or last < ratio * prev:
        return True, f"gain per sample fell from {prev:.3g} to {last:.3g} (relative MSE per sample)"
    return False, ""


def stagnated(history: History) -> bool:
    """True when each of the last two generate events failed to beat the best metric before it."""
    events = [e for e in history if e.action is not Action.DONE]
    gens = [i for i, e in enumerate(events) if e.action is Action.GENERATE and i > 0]
    if len(gens) < 2:
        return False
    for i in gens[-2:]:
        before = min(e.metric for e in events[:i])
        if events[i].metric < before:
            return False
    return True


def decide_deterministic(
    history: History,
    policy: BudgetPolicy,
    growth: float = GROWTH_FACTOR,
    ratio: float = SATURATION_RATIO,
) -> ControllerDecision:
    last = history.last
    k = last.k
    if last.metric <= policy.target_metric:
        return ControllerDecision(Action.DONE, k, f"target reached: MSE {last.metric:.3e} <= {policy.target_metric:.3e}")
    if not math.isfinite(last.metric):
        return ControllerDecision(Action.GENERATE, k, "last model diverged; regenerate code")
    if stagnated(history):
        return ControllerDecision(
            Action.DONE, k, f"stagnation: last two generated models did not improve best MSE {history.best_metric():.3e}"
        )
    if k >= policy.data_budget:
        return ControllerDecision(Action.GENERATE, k, f"data budget {policy.data_budget} reached with MSE above target; regenerate code")
    sat, why = diminishing_returns(history, ratio)
    if sat:
        return ControllerDecision(Action.GENERATE, k, f"diminishing returns suggest saturation; regenerate code ({why})")
    k_next = min(math.ceil(growth * k), policy.data_budget)
    return ControllerDecision(
        Action.TEST, k_next, f"MSE {last.metric:.3e} above target {policy.target_metric:.3e} and still improving with data; test with k={k_next}"
    )


# --- LLM policy --------------------------------------------------------------------


class ControllerReply(BaseModel):
    action: Literal["generate", "test", "done"]
    k_next: int = Field(ge=0)
    reason: str = Field(min_length=1)


CONTROLLER_SYSTEM = (
    "You are the Controller of a surrogate-model training loop. Each turn you read the history of "
    "(round, k, metric, reason, action) events and the target validation MSE, then choose one action: "
    "'generate' (new model on k_next samples), 'test' (rerun the current model on a dataset grown to "
    "k_next samples) or 'done' (target met or converged). Choose progressively larger k_next; never "
    "exceed the data budget. Answer with a JSON object {action, k_next, reason}; keep reason short."
)


def controller_prompt(history: History, policy: BudgetPolicy) -> list[dict]:
    hist = [{k: v for k, v in e.to_json().items() if k != "timestamp"} for e in history]
    body = {
        "target_metric": policy.target_metric,
        "data_budget": policy.data_budget,
        "max_rounds": policy.max_rounds,
        "rounds_used": history.last.round,
        "history": hist,
    }
    return [{"role": "system", "content": CONTROLLER_SYSTEM}, {"role": "user", "content": json.dumps(body)}]


def clamp_decision(reply: ControllerReply, history: History, policy: BudgetPolicy) -> ControllerDecision:
    k = history.last.k
    k_next = reply.k_next
    reason = reply.reason
    if k_next < k or k_next > policy.data_budget:
        clamped = min(max(k_next, k), policy.data_budget)
        reason = f"{reason} [k_next {k_next} clamped to {clamped}]"
        k_next = clamped
    if reply.action == "done":
        k_next = k
    return ControllerDecision(Action(reply.action), k_next, reason)


def decide(
    history: History,
    policy: BudgetPolicy,
    mode: str = "deterministic",
    client: ChatClient | None = None,
    memory: MemoryStore | None = None,
    retries: int = 3,
) -> ControllerDecision:
    if len(history) == 0:
        raise ValueError("decide needs the initialization event in the history")
    if mode != "deterministic" and client is not None:
        try:
            reply = structured(
                controller_prompt(history, policy), client, ControllerReply,
                retries=retries, memory=memory, session="controller", channel="controller",
            )
            return clamp_decision(reply, history, policy)
        except (LLMSchemaError, LLMTransportError) as e:
            log.warning("controller LLM failed (%s); degraded to deterministic policy", e)
            d = decide_deterministic(history, policy)
            return replace(d, reason=f"[degraded: deterministic fallback] {d.reason}")
    return decide_deterministic(history, policy)


# --- model proposal ------------------------------------------------------------------

LADDER: list[dict] = [
    {"family": "plain-mlp", "hidden_dim": 256, "n_blocks": 2},
    {"family": "residual-mlp", "hidden_dim": 256, "n_blocks": 4},
    {"family": "se-residual-mlp", "hidden_dim": 256, "n_blocks": 4, "se_reduction": 16},
    {"family": "residual-mlp", "hidden_dim": 512, "n_blocks": 6},
]
LOSS_CYCLE = ("mse", "smooth-l1")
_ID_RE = re.compile(r"^m\d+-(?P<label>.+)$")


def ladder_specs(task: TaskSpec, overrides: dict | None = None) -> list[ModelSpec]:
    """Ladder order: each architecture in turn, loss alternating, then the ladder again with the other loss."""
    out = []
    for sweep in range(len(LOSS_CYCLE)):
        for i, arch in enumerate(LADDER):
            kw = dict(arch, loss=LOSS_CYCLE[(i + sweep) % len(LOSS_CYCLE)], input_dim=task.input_dim, output_dim=task.output_dim)
            kw.update(overrides or {})
            out.append(ModelSpec(**kw))
    return out


def used_labels(history: History) -> set[str]:
    out = set()
    for e in history:
        if e.model_id:
            m = _ID_RE.match(e.model_id)
            if m:
                out.add(m.group("label"))
    return out


def model_id(round_: int, spec: ModelSpec) -> str:
    return f"m{round_:02d}-{spec.label()}"


class ModelSpecReply(BaseModel):
    family: Literal["plain-mlp", "residual-mlp", "se-residual-mlp"]
    hidden_dim: int = Field(ge=1, le=4096)
    n_blocks: int = Field(ge=1, le=32)
    se_reduction: int = Field(default=16, ge=1)
    loss: Literal["mse", "smooth-l1"] = "mse"
    learning_rate: float | None = Field(default=None, gt=0, le=1.0)
    epochs: int | None = Field(default=None, ge=0, le=10_000)
    batch_size: int | None = Field(default=None, ge=1)

    @model_validator(mode="after")
    def _se_divides(self):
        if self.family == "se-residual-mlp" and self.hidden_dim % self.se_reduction:
            raise ValueError("se_reduction must divide hidden_dim")
        return self


PROPOSER_SYSTEM = (
    "You design neural-network forward models for a regression task. Propose ONE architecture as a JSON "
    "object with fields family (plain-mlp | residual-mlp | se-residual-mlp), hidden_dim, n_blocks, "
    "se_reduction, loss (mse | smooth-l1), learning_rate, epochs, batch_size. Do not repeat an "
    "architecture+loss already listed in the history."
)


def propose_model_spec(
    task: TaskSpec,
    history: History,
    mode: str = "deterministic",
    client: ChatClient | None = None,
    overrides: dict | None = None,
    memory: MemoryStore | None = None,
    retries: int = 3,
) -> ModelSpec:
    """Next architecture to train. Raises ExplorationExhausted when the ladder has nothing new."""
    if mode != "deterministic" and client is not None:
        msgs = [
            {"role": "system", "content": PROPOSER_SYSTEM},
            {"role": "user", "content": json.dumps({
                "task": task.aide_task_description,
                "input_dim": task.input_dim,
                "output_dim": task.output_dim,
                "history": [{k: v for k, v in e.to_json().items() if k != "timestamp"} for e in history],
            })},
        ]
        try:
            reply = structured(msgs, client, ModelSpecReply, retries=retries, memory=memory, session="proposer", channel="model_spec")
            base = ladder_specs(task, overrides)[0]
            kw = {k: v for k, v in reply.model_dump().items() if v is not None}
            return replace(base, **kw).validate()
        except (LLMSchemaError, LLMTransportError) as e:
            log.warning("model proposal LLM failed (%s); using the deterministic ladder", e)
    used = used_labels(history)
    for spec in ladder_specs(task, overrides):
        if spec.label() not in used:
            return spec
    raise ExplorationExhausted("every ladder architecture/loss combination has been tried")


# --- the loop ---------------------------------------------------------------------------


@dataclass
class ForwardTrainConfig:
    oracle: OracleConfig = field(default_factory=OracleConfig)
    policy: BudgetPolicy = field(default_factory=BudgetPolicy)
    k0: int = 550
    controller_mode: str = "deterministic"
    proposer_mode: str = "deterministic"
    client: ChatClient | None = None
    memory: MemoryStore | None = None
    history_path: str | Path | None = None
    zero_timestamps: bool = False
    spec_overrides: dict = field(default_factory=dict)
    # 'test' reruns the current architecture on the grown data; False evaluates the frozen model only
    test_retrains: bool = True
    growth_factor: float = GROWTH_FACTOR
    saturation_ratio: float = SATURATION_RATIO
    seed_offset: int = 0
    on_event: Callable[[HistoryEvent], None] | None = None

    def __post_init__(self):
        if self.k0 < 11:
            raise ValueError("k0 must be at least 11 so the 10:1 split has a validation pair")
        if self.k0 > self.policy.data_budget:
            raise ValueError("k0 exceeds the data budget")


@dataclass
class ForwardTrainResult:
    bundle: ModelBundle | None
    latest: ModelBundle | None
    history: History
    dataset: Dataset
    termination: str
    best_model_id: str | None = None
    latest_model_id: str | None = None
    bundles: dict = field(default_factory=dict)


def _now(cfg: ForwardTrainConfig) -> str:
    if cfg.zero_timestamps:
        return ZERO_TIME
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


class ForwardTrainError(RuntimeError):
    def __init__(self, message: str, history: History):
        super().__init__(message)
        self.history = history


def forward_train(task: TaskSpec, cfg: ForwardTrainConfig, dataset: Dataset | None = None) -> ForwardTrainResult:
    """Run the agentic loop and return the best bundle seen plus the persisted history."""
    history = History(cfg.history_path)
    policy = cfg.policy
    oracle = cfg.oracle
    data = dataset if dataset is not None else Dataset.empty(oracle.dim, oracle.length)

    best: ModelBundle | None = None
    best_id: str | None = None
    latest: ModelBundle | None = None
    latest_spec: ModelSpec | None = None
    latest_id: str | None = None
    latest_k = 0
    bundles: dict[str, ModelBundle] = {}

    def fit(spec: ModelSpec, rnd: int) -> tuple[ModelBundle | None, float]:
        s = replace(spec, init_seed=spec.init_seed + cfg.seed_offset)
        try:
            b = train(s, data, provenance={"round": rnd})
        except DivergenceError as e:
            log.warning("round %d: %s", rnd, e)
            return None, math.inf
        return b, b.metric

    def record(rnd, action, reason, metric):
        ev = HistoryEvent(rnd, len(data), metric, reason, action, latest_id, _now(cfg))
        history.append(ev)
        log.info("round %d %-8s k=%d metric=%s  %s", rnd, action.value, ev.k, f"{metric:.4e}", reason)
        if cfg.on_event:
            cfg.on_event(ev)

    def adopt(b, metric, mid):
        nonlocal best, best_id
        if b is not None:
            bundles[mid] = b
        if b is not None and metric < (best.metric if best is not None else math.inf):
            best, best_id = b, mid

    def wrap(e: Exception) -> ForwardTrainError:
        err = ForwardTrainError(f"forward_train stopped: {e}", history)
        err.__cause__ = e
        return err

    try:
        data = grow_dataset(data, cfg.k0, oracle)
    except Exception as e:
        raise wrap(e)
    latest_spec = propose_model_spec(task, history, cfg.proposer_mode, cfg.client, cfg.spec_overrides, cfg.memory)
    latest_id = model_id(0, latest_spec)
    latest, metric = fit(latest_spec, 0)
    latest_k = len(data)
    adopt(latest, metric, latest_id)
    record(0, Action.GENERATE, INIT_REASON, metric)

    termination = f"max rounds ({policy.max_rounds}) reached"
    for rnd in range(1, policy.max_rounds + 1):
        if cfg.controller_mode == "deterministic" or cfg.client is None:
            d = decide_deterministic(history, policy, cfg.growth_factor, cfg.saturation_ratio)
        else:
            d = decide(history, policy, cfg.controller_mode, cfg.client, cfg.memory)
        if d.action is Action.DONE:
            record(rnd, Action.DONE, d.reason, history.last.metric)
            termination = "done"
            break
        try:
            data = grow_dataset(data, d.k_next, oracle)
        except Exception as e:
            raise wrap(e)
        if d.action is Action.GENERATE:
            try:
                spec = propose_model_spec(task, history, cfg.proposer_mode, cfg.client, cfg.spec_overrides, cfg.memory)
            except ExplorationExhausted as e:
                record(rnd, Action.DONE, f"{d.reason}; but {e}", history.last.metric)
                termination = "exploration exhausted"
                break
            latest_spec, latest_id = spec, model_id(rnd, spec)
            latest, metric = fit(spec, rnd)
            latest_k = len(data)
            adopt(latest, metric, latest_id)
        else:
            if latest is not None and (len(data) == latest_k or not cfg.test_retrains):
                metric = evaluate(latest, data)
            else:
                retrained, metric = fit(latest_spec, rnd)
                latest_k = len(data)
                if retrained is not None:
                    latest = retrained
                    latest_id = model_id(rnd, latest_spec)
                    adopt(latest, metric, latest_id)
            if latest is not None and math.isfinite(metric) and metric < (best.metric if best is not None else math.inf):
                # evaluate-only tests can still lower the best score of the current model
                best, best_id = replace(latest, metric=metric), latest_id
        record(rnd, d.action, d.reason, metric)

    return ForwardTrainResult(
        bundle=best,
        latest=latest,
        history=history,
        dataset=data,
        termination=termination,
        best_model_id=best_id,
        latest_model_id=latest_id,
        bundles=bundles,
    )
