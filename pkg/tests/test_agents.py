import json
import os
import subprocess
import sys

import httpx
import numpy as np
import pytest
from pydantic import BaseModel, Field

from metagent.agents.llm import (
    HTTPChatClient,
    LLMConfig,
    LLMSchemaError,
    LLMTransportError,
    MockLLM,
    backoff_delays,
    llm_chat,
    prompt_hash,
    structured,
)
from metagent.agents.memory import MemoryStore
from metagent.agents.planner import (
    FORWARD_MODEL_NAME,
    InputVerificationError,
    MissingInputError,
    NotTrainedError,
    TaskSpec,
    code_modify,
    file_check,
    parse_target_metric,
    plan_task,
    verify_inputs,
)
from metagent.domain import Dataset, write_dataset_csv
from metagent.surrogate import ModelSpec, build_model, load_bundle, train


class Reply(BaseModel):
    action: str
    k: int = Field(ge=0)


MSG = [{"role": "user", "content": "hi"}]
QUERY = (
    "Build a supervised regression model that maps geometry to spectrum with MSE target "
    "$2\\times10^{-3}$ and afterwards run inverse design against my target spectrum"
)


@pytest.fixture
def target_file(tmp_path):
    p = tmp_path / "target.txt"
    p.write_text("\n".join(str(x) for x in np.linspace(0, 1, 201)))
    return p


@pytest.fixture
def trained_bundle_dir(tmp_path):
    r = np.random.default_rng(0)
    ds = Dataset(r.uniform(-1, 1, (22, 14)), r.uniform(size=(22, 201)))
    b = train(ModelSpec(hidden_dim=8, n_blocks=1, epochs=1), ds)
    return code_modify(b, tmp_path / "export")


# --- llm_chat -----------------------------------------------------------------------------


def test_valid_reply_one_call():
    m = MockLLM(sequence=[{"action": "test", "k": 5}])
    out = llm_chat(MSG, m, Reply)
    assert json.loads(out.content) == {"action": "test", "k": 5} and len(m.calls) == 1


def test_invalid_then_valid_two_calls():
    m = MockLLM(sequence=["nope", {"action": "test", "k": 5}])
    out = llm_chat(MSG, m, Reply)
    assert len(m.calls) == 2 and json.loads(out.content)["k"] == 5
    # the retry carries a corrective message
    assert "did not match" in m.calls[1][1][-1]["content"]


def test_all_invalid_four_attempts():
    m = MockLLM(defaults={"*": {"action": "x", "k": -1}})
    with pytest.raises(LLMSchemaError) as e:
        llm_chat(MSG, m, Reply, retries=3)
    assert len(m.calls) == 4 and e.value.attempts == 4
    assert json.loads(e.value.raw_reply)["k"] == -1


def test_code_fenced_json_accepted():
    m = MockLLM(sequence=['```json\n{"action": "done", "k": 0}\n```'])
    assert structured(MSG, m, Reply).action == "done"


def test_chat_recorded_in_memory():
    mem = MemoryStore()
    llm_chat(MSG, MockLLM(sequence=["plain text"]), memory=mem, session="s1")
    assert [(x.role, x.content) for x in mem.get("s1")] == [("user", "hi"), ("assistant", "plain text")]


def test_mock_lookup_order():
    h = prompt_hash(MSG)
    m = MockLLM(sequence=["seq"], channels={"c": ["chan"]}, by_hash={h: "hash"}, defaults={"c": "dflt"})
    assert m.complete(MSG, "c") == "hash"
    other = [{"role": "user", "content": "x"}]
    assert m.complete(other, "c") == "chan"
    assert m.complete(other, "c") == "seq"
    assert m.complete(other, "c") == "dflt"
    with pytest.raises(LLMTransportError):
        m.complete(other, "unknown")


def test_mock_script_file(tmp_path):
    p = tmp_path / "s.json"
    p.write_text(json.dumps({"sequence": [{"__raise__": True}, "ok"]}))
    m = MockLLM.from_file(p)
    with pytest.raises(LLMTransportError):
        m.complete(MSG)
    assert m.complete(MSG) == "ok"


# --- HTTP client -------------------------------------------------------------------------------


def _ok(content):
    return httpx.Response(200, json={"choices": [{"message": {"role": "assistant", "content": content}}]})


def test_http_request_shape():
    seen = {}

    def handler(request):
        seen["url"] = str(request.url)
        seen["auth"] = request.headers.get("authorization")
        seen["body"] = json.loads(request.content)
        return _ok("hello")

    cfg = LLMConfig(base_url="http://llm.invalid/v1", api_key="k", model="m")
    out = HTTPChatClient(cfg, transport=httpx.MockTransport(handler)).complete(MSG)
    assert out == "hello"
    assert seen["url"] == "http://llm.invalid/v1/chat/completions"
    assert seen["auth"] == "Bearer k"
    assert seen["body"] == {"model": "m", "messages": MSG, "temperature": 0.0}


def test_http_backoff_then_success():
    calls, sleeps = [], []

    def handler(request):
        calls.append(1)
        return httpx.Response(503) if len(calls) < 3 else _ok("fine")

    client = HTTPChatClient(LLMConfig(base_url="http://llm.invalid"), sleep=sleeps.append, transport=httpx.MockTransport(handler))
    assert client.complete(MSG) == "fine"
    assert sleeps == [1.0, 2.0]


def test_http_gives_up_with_transport_error():
    sleeps = []
    client = HTTPChatClient(
        LLMConfig(base_url="http://llm.invalid", transport_retries=3),
        sleep=sleeps.append,
        transport=httpx.MockTransport(lambda r: httpx.Response(500)),
    )
    with pytest.raises(LLMTransportError):
        client.complete(MSG)
    assert sleeps == [1.0, 2.0, 4.0]


def test_backoff_is_capped():
    assert backoff_delays(7) == [1, 2, 4, 8, 16, 30, 30]


def test_env_config_required(monkeypatch):
    with pytest.raises(LLMTransportError):
        LLMConfig.from_env()
    monkeypatch.setenv("AGENT_LLM_BASE_URL", "http://x.invalid")
    monkeypatch.setenv("AGENT_LLM_MODEL", "m2")
    assert LLMConfig.from_env().model == "m2"


# --- memory ---------------------------------------------------------------------------------------


def test_memory_order_and_isolation(tmp_path):
    mem = MemoryStore(tmp_path)
    for i in range(3):
        mem.append("a", "user", f"a{i}")
        mem.append("b", "assistant", f"b{i}")
    assert [m.content for m in mem.get("a")] == ["a0", "a1", "a2"]
    assert [m.sequence for m in mem.get("b")] == [0, 1, 2]
    assert mem.get("nobody") == []


def test_memory_survives_restart(tmp_path):
    MemoryStore(tmp_path).append("s", "user", "remember me")
    code = (
        "from metagent.agents.memory import MemoryStore;import sys;"
        "print(MemoryStore(sys.argv[1]).get('s')[0].content)"
    )
    out = subprocess.run([sys.executable, "-c", code, str(tmp_path)], capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "remember me"


def test_memory_rejects_bad_session():
    with pytest.raises(ValueError):
        MemoryStore().append("../escape", "user", "x")


# --- file_check / verify --------------------------------------------------------------------------


def test_file_check_statuses(tmp_path, target_file):
    missing = tmp_path / "nope.txt"
    out = file_check([target_file, missing, target_file.parent])
    assert list(out.values()) == ["exists", "missing", "exists"]
    assert list(out) == [str(target_file), str(missing), str(target_file.parent)]


@pytest.mark.skipif(os.geteuid() == 0, reason="root bypasses permission bits")
def test_file_check_permission_denied(tmp_path):
    d = tmp_path / "locked"
    d.mkdir()
    (d / "f").write_text("x")
    d.chmod(0)
    try:
        assert file_check([d / "f"])[str(d / "f")] == "permission-denied"
    finally:
        d.chmod(0o755)


def test_file_check_never_creates(tmp_path):
    before = sorted(tmp_path.iterdir())
    file_check([tmp_path / "a" / "b"])
    assert sorted(tmp_path.iterdir()) == before


def test_verify_consistent_inputs(tmp_path, target_file):
    r = np.random.default_rng(0)
    ds_path = tmp_path / "d.csv"
    write_dataset_csv(Dataset(r.normal(size=(12, 14)), r.uniform(size=(12, 201))), ds_path)
    spec = TaskSpec(target_spectrum_path=str(target_file), dataset_path=str(ds_path), mode="fixed-dataset")
    before = sorted(p.name for p in tmp_path.iterdir())
    assert verify_inputs(spec) is spec
    assert sorted(p.name for p in tmp_path.iterdir()) == before


def test_verify_wrong_target_length(tmp_path):
    p = tmp_path / "t.txt"
    p.write_text(",".join(["0.5"] * 200))
    with pytest.raises(InputVerificationError) as e:
        verify_inputs(TaskSpec(target_spectrum_path=str(p)))
    assert "L=201" in str(e.value)


def test_verify_lists_every_problem(tmp_path):
    spec = TaskSpec(target_spectrum_path=str(tmp_path / "x"), dataset_path=str(tmp_path / "y"), mode="fixed-dataset")
    with pytest.raises(InputVerificationError) as e:
        verify_inputs(spec)
    assert len(e.value.problems) == 2 and all("provide or correct" in p for p in e.value.problems)


def test_fixed_dataset_needs_dataset_path():
    with pytest.raises(MissingInputError) as e:
        TaskSpec(plan="forward-only", mode="fixed-dataset")
    assert e.value.fields == ["dataset_path"]


# --- planner ------------------------------------------------------------------------------------


@pytest.mark.parametrize(
    "text,value",
    [(QUERY, 2e-3), ("mse target 2e-3", 2e-3), ("target MSE of 0.0015", 1.5e-3), ("MSE 3 x 10^-4", 3e-4), ("no number", None)],
)
def test_parse_target_metric(text, value):
    got = parse_target_metric(text)
    assert got == (pytest.approx(value) if value is not None else None)


def test_query_with_target_plans_both(target_file):
    spec = plan_task(QUERY, {"target_spectrum_path": str(target_file)})
    assert spec.target_metric == pytest.approx(2e-3) and spec.plan == "both"
    assert "14 geometry parameters" in spec.aide_task_description


def test_target_and_bundle_plan_inverse_only(target_file, trained_bundle_dir):
    spec = plan_task("MSE 2e-3", {"target_spectrum_path": str(target_file), "bundle_path": str(trained_bundle_dir)})
    assert spec.plan == "inverse-only"


def test_no_target_plans_forward_only():
    assert plan_task("train a forward model, MSE 2e-3", {}).plan == "forward-only"


def test_inverse_request_without_target_is_missing_input():
    with pytest.raises(MissingInputError) as e:
        plan_task(QUERY, {})
    assert "target_spectrum_path" in e.value.fields


def test_missing_metric_is_missing_input():
    with pytest.raises(MissingInputError) as e:
        plan_task("train something", {})
    assert e.value.fields == ["target_metric"]


def test_llm_planner_asks_until_complete(target_file):
    replies = [
        {"input_dim": 14, "output_dim": 201, "target_metric": 0.002, "plan": "both", "missing": ["target_spectrum_path"], "question": "Where is the target spectrum?"},
        {"input_dim": 14, "output_dim": 201, "target_metric": 0.002, "plan": "both", "missing": []},
    ]
    asked = []

    def ask(q):
        asked.append(q)
        return {"target_spectrum_path": str(target_file)}

    spec = plan_task(QUERY, {}, mode="mock", client=MockLLM(channels={"planner": replies}), ask=ask)
    assert asked == ["Where is the target spectrum?"] and spec.plan == "both"


def test_llm_planner_failure_falls_back(target_file):
    spec = plan_task(QUERY, {"target_spectrum_path": str(target_file)}, mode="mock", client=MockLLM(defaults={"*": "garbage"}))
    assert spec.plan == "both"


# --- code_modify ---------------------------------------------------------------------------------


def test_export_round_trip(tmp_path):
    r = np.random.default_rng(1)
    ds = Dataset(r.uniform(-1, 1, (22, 14)), r.uniform(size=(22, 201)))
    b = train(ModelSpec(hidden_dim=8, n_blocks=1, epochs=1), ds)
    p = code_modify(b, tmp_path)
    assert p.name == FORWARD_MODEL_NAME
    back = load_bundle(p)
    assert np.array_equal(back.weights, b.weights) and back.spec == b.spec


def test_reexport_is_idempotent(tmp_path, trained_bundle_dir):
    b = load_bundle(trained_bundle_dir)
    (trained_bundle_dir / "stale.tmp").write_text("x")
    code_modify(b, trained_bundle_dir.parent)
    assert sorted(p.name for p in trained_bundle_dir.iterdir()) == ["manifest.json", "scaler.bin", "weights.bin"]
    assert np.array_equal(load_bundle(trained_bundle_dir).weights, b.weights)


def test_untrained_export_rejected(tmp_path):
    with pytest.raises(NotTrainedError):
        code_modify(build_model(ModelSpec(hidden_dim=4)), tmp_path)
