"""Chat-completion access with record/replay cassettes.

Requests are content-addressed by a SHA-256 over (model_id, messages,
temperature). A cassette in REPLAY mode answers from its store and never
touches the transport, which makes model-backed runs hermetic.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import warnings
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Mapping, Protocol, Sequence

import httpx

from .errors import BudgetExceeded, CassetteMiss, TransportError, UnboundSlot, UnusedBinding

logger = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    messages: tuple[Mapping[str, str], ...]
    temperature: float = 0.0
    max_output_chars: int = 20000

    def __post_init__(self):
        msgs = tuple({"role": m["role"], "content": m["content"]} for m in self.messages)
        if not msgs:
            raise ValueError("a chat request needs at least one message")
        for m in msgs:
            if m["role"] not in ROLES:
                raise ValueError(f"unknown role {m['role']!r}")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        if self.max_output_chars <= 0:
            raise ValueError("max_output_chars must be positive")
        object.__setattr__(self, "messages", msgs)

    def to_dict(self) -> dict[str, Any]:
        return {
            "model_id": self.model_id,
            "messages": [dict(m) for m in self.messages],
            "temperature": self.temperature,
        }

    @property
    def digest(self) -> str:
        return request_digest(self)


def request_digest(request: ChatRequest) -> str:
    payload = json.dumps(request.to_dict(), sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class CassetteMode(Enum):
    RECORD = "record"
    REPLAY = "replay"
    PASSTHROUGH = "passthrough"


class Cassette:
    """Digest -> response store, optionally backed by a JSONL file.

    Later lines for the same digest win on load. Trailing partial lines from
    an interrupted writer are skipped.
    """

    def __init__(self, mode: CassetteMode | str = CassetteMode.PASSTHROUGH, path: str | Path | None = None):
        self.mode = CassetteMode(mode)
        self.path = Path(path) if path is not None else None
        self.entries: dict[str, str] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self) -> None:
        with open(self.path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    row = json.loads(line)
                except json.JSONDecodeError:
                    continue
                self.entries[row["digest"]] = row["response"]

    def __len__(self) -> int:
        return len(self.entries)

    def lookup(self, request: ChatRequest) -> str:
        try:
            return self.entries[request.digest]
        except KeyError:
            raise CassetteMiss(f"no cassette entry for request {request.digest[:12]}") from None

    def store(self, request: ChatRequest, response: str) -> None:
        with self._lock:
            self.entries[request.digest] = response
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                row = {"digest": request.digest, "request": request.to_dict(), "response": response}
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(row, ensure_ascii=False) + "\n")


class Transport(Protocol):
    def send(self, request: ChatRequest) -> str: ...


class HttpTransport:
    """OpenAI-compatible ``/chat/completions`` client."""

    def __init__(
        self,
        base_url: str,
        api_key: str | None = None,
        timeout: float = 120.0,
        client: httpx.Client | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self._client = client or httpx.Client(timeout=timeout)

    @classmethod
    def from_env(cls, client: httpx.Client | None = None) -> "HttpTransport":
        base = os.environ.get("EVOLOOP_API_BASE")
        if not base:
            raise TransportError("EVOLOOP_API_BASE is not set")
        return cls(base, os.environ.get("EVOLOOP_API_KEY"), client=client)

    def send(self, request: ChatRequest) -> str:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = {
            "model": request.model_id,
            "messages": [dict(m) for m in request.messages],
            "temperature": request.temperature,
        }
        try:
            resp = self._client.post(f"{self.base_url}/chat/completions", json=body, headers=headers)
        except httpx.HTTPError as exc:
            raise TransportError(f"request failed: {exc}") from exc
        if resp.status_code >= 400:
            raise TransportError(f"endpoint returned an error: {resp.text[:200]}", resp.status_code)
        try:
            return resp.json()["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"unexpected response body: {exc}", resp.status_code) from exc


class NullTransport:
    """Transport for runs that must never reach a model."""

    def send(self, request: ChatRequest) -> str:
        raise TransportError("no transport configured")


def complete(request: ChatRequest, cassette: Cassette, transport: Transport) -> str:
    if cassette.mode is CassetteMode.REPLAY:
        response = cassette.lookup(request)
    else:
        response = transport.send(request)
        if cassette.mode is CassetteMode.RECORD:
            cassette.store(request, response)
    if len(response) > request.max_output_chars:
        raise BudgetExceeded(
            f"response of {len(response)} chars exceeds budget {request.max_output_chars}"
        )
    return response


class Gateway:
    """Binds a cassette and transport; what blamers, mutators and runtimes call."""

    def __init__(self, cassette: Cassette | None = None, transport: Transport | None = None):
        self.cassette = cassette if cassette is not None else Cassette(CassetteMode.PASSTHROUGH)
        self.transport = transport if transport is not None else NullTransport()

    def complete(self, request: ChatRequest) -> str:
        return complete(request, self.cassette, self.transport)


_SLOT = re.compile(r"\{\{\s*([A-Za-z_][A-Za-z0-9_]*)\s*\}\}")


def template_slots(template: str) -> set[str]:
    return set(_SLOT.findall(template))


def render_template(template: str, bindings: Mapping[str, str]) -> str:
    """Substitute ``{{slot}}`` markers in one pass; bound values are never re-expanded."""
    unbound = sorted(template_slots(template) - set(bindings))
    if unbound:
        raise UnboundSlot(f"no binding for slot(s): {', '.join(unbound)}")
    unused = sorted(set(bindings) - template_slots(template))
    if unused:
        warnings.warn(f"unused binding(s): {', '.join(unused)}", UnusedBinding, stacklevel=2)
    return _SLOT.sub(lambda m: str(bindings[m.group(1)]), template)


def chat(model_id: str, system: str | None, user: str, temperature: float = 0.0,
         max_output_chars: int = 20000, history: Sequence[Mapping[str, str]] = ()) -> ChatRequest:
    messages = []
    if system is not None:
        messages.append({"role": "system", "content": system})
    messages.append({"role": "user", "content": user})
    messages.extend(history)
    return ChatRequest(model_id, tuple(messages), temperature, max_output_chars)
