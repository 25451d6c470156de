"""Planner intake, the input verifier and the Code_Modify export step."""

from __future__ import annotations

import logging
import os
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, Field

from ..domain import DEFAULT_D, DEFAULT_L, count_csv_columns
from ..surrogate import BundleError, ModelBundle, export_bundle_dir, load_bundle
from .llm import ChatClient, LLMSchemaError, LLMTransportError, structured

log = logging.getLogger(__name__)

FORWARD_MODEL_NAME = "forward_model"

Plan = Literal["forward-only", "inverse-only", "both"]
Mode = Literal["target-mse", "fixed-dataset"]


class MissingInputError(ValueError):
    def __init__(self, fields: list[str], hints: list[str] | None = None):
        msg = "missing required input(s): " + ", ".join(fields)
        if hints:
            msg += "\n" + "\n".join(f"  - {h}" for h in hints)
        super().__init__(msg)
        self.fields = fields
        self.hints = hints or []


class InputVerificationError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("input verification failed:\n" + "\n".join(f"  - {p}" for p in problems))
        self.problems = problems


class NotTrainedError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    input_dim: int = DEFAULT_D
    output_dim: int = DEFAULT_L
    target_metric: float = 2e-3
    target_spectrum_path: str | None = None
    dataset_path: str | None = None
    bundle_path: str | None = None
    mode: Mode = "target-mse"
    plan: Plan = "both"
    aide_task_description: str = ""

    def __post_init__(self):
        missing = []
        if self.plan in ("inverse-only", "both") and not self.target_spectrum_path:
            missing.append("target_spectrum_path")
        if self.mode == "fixed-dataset" and not self.dataset_path:
            missing.append("dataset_path")
        if self.plan == "inverse-only" and not self.bundle_path:
            missing.append("bundle_path")
        if missing:
            raise MissingInputError(missing, [f"{m} is required for plan={self.plan}, mode={self.mode}" for m in missing])

    def to_dict(self) -> dict:
        return asdict(self)


def describe_task(input_dim: int, output_dim: int, target_metric: float, mode: str) -> str:
    """Task description handed to the model proposer (dimensions, metric, candidate solutions)."""
    return (
        f"Supervised regression: predict a {output_dim}-point electromagnetic spectrum from "
        f"{input_dim} geometry parameters. Evaluation metric: validation mean squared error in "
        f"spectrum units; target <= {target_metric:g}. Data mode: {mode}. Candidate solutions: "
        "plain MLPs, residual MLPs, residual MLPs with squeeze-and-excitation gating; losses MSE or "
        "Smooth L1. Inputs and outputs are standardized with statistics from the training split."
    )


# --- file_check ----------------------------------------------------------------

FileStatus = Literal["exists", "missing", "permission-denied"]


def file_check(paths: list[str | os.PathLike]) -> dict[str, FileStatus]:
    """Existence report per path, in input order. Never touches the filesystem beyond stat/access."""
    if not paths:
        raise ValueError("file_check needs at least one path")
    out: dict[str, FileStatus] = {}
    for p in paths:
        key = os.fspath(p)
        try:
            os.stat(key)
        except PermissionError:
            out[key] = "permission-denied"
            continue
        except (FileNotFoundError, NotADirectoryError):
            out[key] = "missing"
            continue
        out[key] = "exists" if os.access(key, os.R_OK) else "permission-denied"
    return out


# --- planner -------------------------------------------------------------------

_FLOAT = r"([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)"
_TIMES = re.compile(r"([0-9]*\.?[0-9]+)\s*(?:\\times|x|×|\*)\s*10\s*\^\s*\{?\s*(-?[0-9]+)\s*\}?")


def parse_target_metric(query: str) -> float | None:
    """Pull an MSE target such as '2e-3', '0.002' or '2\\times10^{-3}' out of free text."""
    m = re.search(r"(?:MSE|mse)[^0-9]{0,30}", query)
    tail = query[m.end() :] if m else query
    for text in (tail, query):
        t = _TIMES.search(text.replace("$", ""))
        if t:
            return float(t.group(1)) * 10 ** int(t.group(2))
        f = re.search(_FLOAT, text)
        if f and m is not None:
            return float(f.group(1))
    return None


def wants_inverse(query: str) -> bool:
    return bool(re.search(r"inverse|design (?:a|the) geometry|target spectrum", query, re.I))


def wants_forward(query: str) -> bool:
    return bool(re.search(r"forward|regression model|surrogate|predict", query, re.I))


def select_plan(answers: dict) -> Plan:
    """Fallback plan rules: target + usable bundle -> inverse-only; no target -> forward-only; else both."""
    target = answers.get("target_spectrum_path")
    bundle = answers.get("bundle_path")
    if not target:
        return "forward-only"
    if bundle and _bundle_usable(bundle):
        return "inverse-only"
    return "both"


def _bundle_usable(path) -> bool:
    try:
        return load_bundle(path).trained
    except (BundleError, OSError, ValueError):
        return False


class TaskReply(BaseModel):
    input_dim: int = Field(gt=0)
    output_dim: int = Field(gt=0)
    target_metric: float = Field(gt=0)
    mode: Literal["target-mse", "fixed-dataset"] = "target-mse"
    plan: Literal["forward-only", "inverse-only", "both"]
    missing: list[str] = Field(default_factory=list)
    question: str = ""


PLANNER_SYSTEM = (
    "You are the Planner of an inverse-design agent for metamaterials. From the user's request "
    "and the answers gathered so far, fill in the task: input/output dimensions, the target "
    "validation MSE, the data mode and the plan (forward-only, inverse-only or both). List any "
    "field you still need in 'missing' and phrase one 'question' to ask the user for it."
)


def plan_task(
    user_query: str,
    answers: dict | None = None,
    mode: str = "deterministic",
    client: ChatClient | None = None,
    ask=None,
    max_turns: int = 4,
) -> TaskSpec:
    """Build a TaskSpec from a request plus an answer map.

    In llm mode the planner may ask follow-up questions through ``ask(question) -> dict``;
    without ``ask`` it must manage with the answers given. Any failure of the LLM path
    falls back to the deterministic rules.
    """
    answers = dict(answers or {})
    if mode in ("llm", "mock") and client is not None:
        try:
            return _plan_llm(user_query, answers, client, ask, max_turns)
        except (LLMSchemaError, LLMTransportError) as e:
            log.warning("planner LLM unavailable (%s); using deterministic rules", e)
    return _plan_deterministic(user_query, answers)


def _plan_deterministic(user_query: str, answers: dict) -> TaskSpec:
    metric = answers.get("target_metric")
    if metric is None:
        metric = parse_target_metric(user_query)
    if metric is None:
        raise MissingInputError(["target_metric"], ["state the target validation MSE, e.g. 'MSE target 2e-3'"])
    input_dim = int(answers.get("input_dim", DEFAULT_D))
    output_dim = int(answers.get("output_dim", DEFAULT_L))
    mode = answers.get("mode") or ("fixed-dataset" if answers.get("dataset_path") and answers.get("fixed_dataset") else "target-mse")
    plan = answers.get("plan")
    if plan is None:
        plan = select_plan(answers)
        if plan == "forward-only" and user_query and wants_inverse(user_query):
            raise MissingInputError(["target_spectrum_path"], ["inverse design was requested; provide the target spectrum file"])
    return TaskSpec(
        input_dim=input_dim,
        output_dim=output_dim,
        target_metric=float(metric),
        target_spectrum_path=answers.get("target_spectrum_path"),
        dataset_path=answers.get("dataset_path"),
        bundle_path=answers.get("bundle_path"),
        mode=mode,
        plan=plan,
        aide_task_description=describe_task(input_dim, output_dim, float(metric), mode),
    )


def _plan_llm(user_query, answers, client, ask, max_turns) -> TaskSpec:
    reply = None
    for _ in range(max_turns):
        msgs = [
            {"role": "system", "content": PLANNER_SYSTEM},
            {"role": "user", "content": f"Request: {user_query}\nAnswers so far: {answers}"},
        ]
        reply = structured(msgs, client, TaskReply, channel="planner", session="planner")
        if not reply.missing:
            break
        if ask is None:
            raise MissingInputError(reply.missing, [reply.question] if reply.question else None)
        answers.update(ask(reply.question) or {})
    merged = {
        "input_dim": reply.input_dim,
        "output_dim": reply.output_dim,
        "target_metric": reply.target_metric,
        "mode": reply.mode,
        "plan": reply.plan,
    }
    merged.update({k: v for k, v in answers.items() if v is not None})
    return _plan_deterministic(user_query, merged)


# --- input verifier ------------------------------------------------------------


def read_target_spectrum(path) -> list[float]:
    """One value per line or a single comma-separated row."""
    text = Path(path).read_text()
    tokens = [t for t in re.split(r"[,\s]+", text.strip()) if t]
    return [float(t) for t in tokens]


def verify_inputs(spec: TaskSpec) -> TaskSpec:
    """Check every referenced file exists and has the shape the task expects. Read-only."""
    paths = [p for p in (spec.target_spectrum_path, spec.dataset_path, spec.bundle_path) if p]
    problems: list[str] = []
    status = file_check(paths) if paths else {}
    for p, st in status.items():
        if st != "exists":
            problems.append(f"{p}: {st}; provide or correct this file")
    if spec.target_spectrum_path and status.get(spec.target_spectrum_path) == "exists":
        try:
            n = len(read_target_spectrum(spec.target_spectrum_path))
        except ValueError as e:
            problems.append(f"{spec.target_spectrum_path}: unreadable target spectrum ({e})")
        else:
            if n != spec.output_dim:
                problems.append(f"{spec.target_spectrum_path}: target spectrum has {n} values, expected L={spec.output_dim}")
    if spec.dataset_path and status.get(spec.dataset_path) == "exists":
        cols = count_csv_columns(spec.dataset_path)
        if cols != spec.input_dim + spec.output_dim:
            problems.append(
                f"{spec.dataset_path}: {cols} columns, expected {spec.input_dim} geometry + {spec.output_dim} spectrum"
            )
    if spec.bundle_path and status.get(spec.bundle_path) == "exists":
        try:
            b = load_bundle(spec.bundle_path)
            if (b.spec.input_dim, b.spec.output_dim) != (spec.input_dim, spec.output_dim):
                problems.append(f"{spec.bundle_path}: bundle maps {b.spec.input_dim}->{b.spec.output_dim}, task needs {spec.input_dim}->{spec.output_dim}")
        except BundleError as e:
            problems.append(f"{spec.bundle_path}: {e}")
    if problems:
        raise InputVerificationError(problems)
    return spec


# --- Code_Modify -----------------------------------------------------------------


def code_modify(bundle: ModelBundle, out_path) -> Path:
    """Export a trained bundle as ``<out_path>/forward_model`` in the neural-adjoint format."""
    if not bundle.trained:
        raise NotTrainedError("refusing to export an untrained bundle")
    target = Path(out_path)
    if target.name != FORWARD_MODEL_NAME:
        target = target / FORWARD_MODEL_NAME
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create export directory {target.parent}: {e}") from e
    return export_bundle_dir(bundle, target)


def with_plan(spec: TaskSpec, plan: Plan) -> TaskSpec:
    return replace(spec, plan=plan)
