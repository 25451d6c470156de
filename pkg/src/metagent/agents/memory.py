"""Per-session chat transcripts persisted as JSON files."""

from __future__ import annotations

import json
import re
import threading
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Literal

from ..domain import atomic_write_text

Role = Literal["system", "user", "assistant", "tool"]
_SESSION_RE = re.compile(r"^[A-Za-z0-9_.-]{1,128}$")


@dataclass(frozen=True)
class ChatMessage:
    role: Role
    content: str
    session_id: str = ""
    sequence: int = 0

    def as_api(self) -> dict:
        return {"role": self.role, "content": self.content}


class MemoryStore:
    """Append-only transcripts. With ``root=None`` everything stays in memory."""

    def __init__(self, root: str | Path | None = None):
        self.root = Path(root) if root is not None else None
        self._sessions: dict[str, list[ChatMessage]] = {}
        self._lock = threading.Lock()

    def _path(self, session: str) -> Path:
        return self.root / f"{session}.json"

    def _load(self, session: str) -> list[ChatMessage]:
        if session in self._sessions:
            return self._sessions[session]
        msgs: list[ChatMessage] = []
        if self.root is not None and self._path(session).exists():
            msgs = [ChatMessage(**m) for m in json.loads(self._path(session).read_text())]
        self._sessions[session] = msgs
        return msgs

    def append(self, session: str, role: Role, content: str) -> ChatMessage:
        if not _SESSION_RE.match(session):
            raise ValueError(f"invalid session id {session!r}")
        with self._lock:
            msgs = self._load(session)
            msg = ChatMessage(role=role, content=content, session_id=session, sequence=len(msgs))
            msgs.append(msg)
            if self.root is not None:
                atomic_write_text(self._path(session), json.dumps([asdict(m) for m in msgs], indent=1))
        return msg

    def get(self, session: str) -> list[ChatMessage]:
        if not _SESSION_RE.match(session):
            return []
        with self._lock:
            return list(self._load(session))

    def sessions(self) -> list[str]:
        names = set(self._sessions)
        if self.root is not None and self.root.exists():
            names |= {p.stem for p in self.root.glob("*.json")}
        return sorted(names)
