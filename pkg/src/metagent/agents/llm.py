"""Chat-completion access: an HTTP client, a scripted mock, and schema-validated calls."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Protocol

from pydantic import BaseModel, ValidationError

from .memory import ChatMessage, MemoryStore

log = logging.getLogger(__name__)

ENV_BASE_URL = "AGENT_LLM_BASE_URL"
ENV_API_KEY = "AGENT_LLM_API_KEY"
ENV_MODEL = "AGENT_LLM_MODEL"


class LLMTransportError(RuntimeError):
    pass


class LLMSchemaError(RuntimeError):
    def __init__(self, message: str, raw_reply: str, attempts: int):
        super().__init__(message)
        self.raw_reply = raw_reply
        self.attempts = attempts


class ChatClient(Protocol):
    def complete(self, messages: list[dict], channel: str | None = None) -> str: ...


@dataclass(frozen=True)
class LLMConfig:
    base_url: str
    api_key: str = ""
    model: str = "gpt-4o"
    temperature: float = 0.0
    timeout: float = 60.0
    transport_retries: int = 3
    backoff_base: float = 1.0
    backoff_cap: float = 30.0

    @classmethod
    def from_env(cls) -> LLMConfig:
        url = os.environ.get(ENV_BASE_URL)
        if not url:
            raise LLMTransportError(f"{ENV_BASE_URL} is not set")
        return cls(base_url=url, api_key=os.environ.get(ENV_API_KEY, ""), model=os.environ.get(ENV_MODEL, cls.model))


def backoff_delays(n: int, base: float = 1.0, cap: float = 30.0) -> list[float]:
    return [min(cap, base * 2**i) for i in range(n)]


class HTTPChatClient:
    """POSTs {model, messages, temperature} and returns the first choice's message content."""

    def __init__(self, cfg: LLMConfig, sleep: Callable[[float], None] = time.sleep, transport=None):
        self.cfg = cfg
        self._sleep = sleep
        self._transport = transport

    @property
    def url(self) -> str:
        url = self.cfg.base_url.rstrip("/")
        return url if url.endswith("/chat/completions") else url + "/chat/completions"

    def complete(self, messages: list[dict], channel: str | None = None) -> str:
        import httpx

        body = {"model": self.cfg.model, "messages": messages, "temperature": self.cfg.temperature}
        headers = {"Authorization": f"Bearer {self.cfg.api_key}"} if self.cfg.api_key else {}
        delays = backoff_delays(self.cfg.transport_retries, self.cfg.backoff_base, self.cfg.backoff_cap)
        last: Exception | None = None
        for attempt in range(len(delays) + 1):
            try:
                with httpx.Client(timeout=self.cfg.timeout, transport=self._transport) as client:
                    resp = client.post(self.url, json=body, headers=headers)
                if resp.status_code == 429 or resp.status_code >= 500:
                    raise httpx.HTTPStatusError(f"server returned {resp.status_code}", request=resp.request, response=resp)
                resp.raise_for_status()
                return resp.json()["choices"][0]["message"]["content"]
            except (httpx.HTTPError, KeyError, IndexError, ValueError) as e:
                last = e
                if isinstance(e, httpx.HTTPStatusError) and 400 <= e.response.status_code < 500 and e.response.status_code != 429:
                    break
                if attempt < len(delays):
                    log.warning("chat request failed (%s); retrying in %.0fs", e, delays[attempt])
                    self._sleep(delays[attempt])
        raise LLMTransportError(f"chat completion failed: {last}") from last


def prompt_hash(messages: list[dict]) -> str:
    return hashlib.sha256(json.dumps(messages, sort_keys=True).encode()).hexdigest()[:16]


class MockLLM:
    """Scripted replies, looked up by prompt hash, then per-channel queue, then global queue.

    Script file (JSON)::

        {"by_hash": {"<16 hex>": reply},
         "channels": {"controller": [reply, ...], "model_spec": [...]},
         "sequence": [reply, ...],
         "defaults": {"controller": reply}}

    A reply is a string or any JSON value (serialized before returning).
    """

    def __init__(self, sequence=None, channels=None, by_hash=None, defaults=None):
        self.sequence = list(sequence or [])
        self.channels = {k: list(v) for k, v in (channels or {}).items()}
        self.by_hash = dict(by_hash or {})
        self.defaults = dict(defaults or {})
        self.calls: list[tuple[str | None, list[dict]]] = []

    @classmethod
    def from_file(cls, path) -> MockLLM:
        script = json.loads(Path(path).read_text())
        if isinstance(script, list):
            return cls(sequence=script)
        return cls(
            sequence=script.get("sequence"),
            channels=script.get("channels"),
            by_hash=script.get("by_hash"),
            defaults=script.get("defaults"),
        )

    def complete(self, messages: list[dict], channel: str | None = None) -> str:
        self.calls.append((channel, messages))
        h = prompt_hash(messages)
        if h in self.by_hash:
            reply = self.by_hash[h]
        elif channel in self.channels and self.channels[channel]:
            reply = self.channels[channel].pop(0)
        elif self.sequence:
            reply = self.sequence.pop(0)
        elif channel in self.defaults:
            reply = self.defaults[channel]
        elif "*" in self.defaults:
            reply = self.defaults["*"]
        else:
            raise LLMTransportError(f"mock script exhausted (channel={channel!r})")
        if isinstance(reply, dict) and reply.get("__raise__"):
            raise LLMTransportError(reply.get("message", "scripted transport failure"))
        return reply if isinstance(reply, str) else json.dumps(reply)


_FENCE = re.compile(r"^\s*```(?:json)?\s*(.*?)\s*```\s*$", re.S)


def extract_json(text: str) -> str:
    m = _FENCE.match(text)
    return m.group(1) if m else text.strip()


def llm_chat(
    messages: list[dict],
    client: ChatClient,
    schema: type[BaseModel] | None = None,
    retries: int = 3,
    memory: MemoryStore | None = None,
    session: str = "default",
    channel: str | None = None,
) -> ChatMessage:
    """One chat turn. With a schema the reply is validated; invalid replies get a
    corrective message and up to ``retries`` more attempts before LLMSchemaError."""
    convo = list(messages)
    if memory is not None:
        for m in messages:
            memory.append(session, m["role"], m["content"])
    raw = ""
    for attempt in range(retries + 1):
        raw = client.complete(convo, channel=channel)
        if memory is not None:
            memory.append(session, "assistant", raw)
        if schema is None:
            return ChatMessage("assistant", raw, session, attempt)
        try:
            schema.model_validate_json(extract_json(raw))
            return ChatMessage("assistant", extract_json(raw), session, attempt)
        except ValidationError as e:
            problems = "; ".join(f"{'.'.join(map(str, err['loc'])) or '<root>'}: {err['msg']}" for err in e.errors())
            fix = (
                f"Your reply did not match the required schema ({problems}). "
                f"Reply with only a JSON object matching: {json.dumps(schema.model_json_schema())}"
            )
            convo = convo + [{"role": "assistant", "content": raw}, {"role": "user", "content": fix}]
            if memory is not None:
                memory.append(session, "user", fix)
            log.info("schema rejection %d/%d for %s", attempt + 1, retries + 1, schema.__name__)
    raise LLMSchemaError(f"reply never matched {schema.__name__} after {retries + 1} attempts", raw, retries + 1)


def structured(messages, client, schema: type[BaseModel], **kw) -> Any:
    reply = llm_chat(messages, client, schema=schema, **kw)
    return schema.model_validate_json(reply.content)


def make_client(mode: str, mock_script: str | None = None) -> ChatClient | None:
    """Client for an LLM mode: 'mock' reads a script, 'llm' uses the HTTP endpoint, else None."""
    if mode == "mock":
        return MockLLM.from_file(mock_script) if mock_script else MockLLM()
    if mode == "llm":
        return HTTPChatClient(LLMConfig.from_env())
    return None
