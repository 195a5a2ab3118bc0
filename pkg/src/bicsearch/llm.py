"""Chat-completion client with function calling and offline replay.

Speaks the common JSON chat-completions dialect over HTTP.  Transports
are pluggable: a live HTTP transport, a recording wrapper that captures
raw responses into a cassette keyed by a whitespace-normalized request
digest, and a replay transport that serves a cassette back and fails
loudly on unseen requests.  All tests run on replay or fake transports;
nothing here is contacted during the test suite.

Credentials come from the environment only:

    BICSEARCH_API_BASE   endpoint base URL (".../v1" style)
    BICSEARCH_MODEL      model name
    BICSEARCH_API_KEY    bearer token
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Protocol, Sequence

import requests

from .agent import (
    PolicyFailure,
    SearchState,
    TOOL_SCHEMAS,
    ToolRequest,
)

log = logging.getLogger(__name__)

ENV_API_BASE = "BICSEARCH_API_BASE"
ENV_MODEL = "BICSEARCH_MODEL"
ENV_API_KEY = "BICSEARCH_API_KEY"

CASSETTE_SCHEMA_VERSION = 1


class LlmError(Exception):
    pass


class AuthFailure(LlmError):
    """The endpoint rejected the credential."""


class RateLimited(LlmError):
    """Still throttled after all retries."""


class MalformedResponse(LlmError):
    """The endpoint's reply does not fit the protocol."""


class TransportFailure(LlmError):
    """Connection or server failure that survived the retries."""


class CassetteMiss(LlmError):
    """Replay transport saw a request that was never recorded."""


class MissingCredential(LlmError):
    """Required environment variables are not set."""


@dataclass(frozen=True)
class LlmConfig:
    api_base: str
    model: str
    api_key: str = field(repr=False)
    temperature: float = 0.0
    max_retries: int = 3
    backoff_base: float = 0.5
    backoff_cap: float = 8.0
    timeout: float = 120.0

    @classmethod
    def from_env(cls, environ: Mapping[str, str] = os.environ) -> "LlmConfig":
        missing = [
            name
            for name in (ENV_API_BASE, ENV_MODEL, ENV_API_KEY)
            if not environ.get(name)
        ]
        if missing:
            raise MissingCredential(
                "set " + ", ".join(missing) + " in the environment"
            )
        return cls(
            api_base=environ[ENV_API_BASE],
            model=environ[ENV_MODEL],
            api_key=environ[ENV_API_KEY],
        )


@dataclass(frozen=True)
class ToolCall:
    name: str
    arguments: dict


@dataclass(frozen=True)
class LlmResponse:
    tool_call: Optional[ToolCall]
    text: Optional[str]
    tokens_in: int
    tokens_out: int


@dataclass(frozen=True)
class ChatExchange:
    messages: tuple
    tool_names: tuple
    response: LlmResponse


# -- request digest ----------------------------------------------------------


def _normalize(obj):
    if isinstance(obj, dict):
        return {k: _normalize(v) for k, v in sorted(obj.items())}
    if isinstance(obj, (list, tuple)):
        return [_normalize(v) for v in obj]
    if isinstance(obj, str):
        return " ".join(obj.split())
    return obj


def request_digest(body: Mapping) -> str:
    """Stable key for one request: model, messages with whitespace
    collapsed, and the declared tool names."""
    tools = body.get("tools") or []
    names = sorted(
        t.get("function", {}).get("name", "") for t in tools if isinstance(t, dict)
    )
    keyed = {
        "model": body.get("model"),
        "messages": _normalize(body.get("messages", [])),
        "tool_names": names,
    }
    encoded = json.dumps(keyed, sort_keys=True, ensure_ascii=True)
    return hashlib.sha256(encoded.encode("utf-8")).hexdigest()


# -- transports --------------------------------------------------------------


class Transport(Protocol):
    def send(self, body: dict) -> dict: ...


class HttpTransport:
    """POSTs to ``<api_base>/chat/completions`` with a bearer token."""

    def __init__(self, config: LlmConfig, session: Optional[requests.Session] = None):
        self._config = config
        self._session = session or requests.Session()

    def send(self, body: dict) -> dict:
        url = self._config.api_base.rstrip("/") + "/chat/completions"
        try:
            reply = self._session.post(
                url,
                json=body,
                headers={"Authorization": f"Bearer {self._config.api_key}"},
                timeout=self._config.timeout,
            )
        except requests.RequestException as exc:
            raise TransportFailure(f"request failed: {exc}") from exc
        if reply.status_code in (401, 403):
            raise AuthFailure(f"endpoint returned {reply.status_code}")
        if reply.status_code == 429:
            raise RateLimited("endpoint returned 429")
        if reply.status_code >= 500:
            raise TransportFailure(f"endpoint returned {reply.status_code}")
        if reply.status_code >= 400:
            raise MalformedResponse(
                f"endpoint rejected the request ({reply.status_code}): {reply.text[:200]}"
            )
        try:
            return reply.json()
        except ValueError as exc:
            raise MalformedResponse(f"non-JSON reply: {exc}") from exc


class Cassette:
    """Recorded raw responses keyed by request digest.

    Remembers the model name the recording ran under, so replay can
    rebuild byte-identical request digests without live credentials.
    """

    def __init__(
        self,
        entries: Optional[dict[str, dict]] = None,
        model: Optional[str] = None,
    ):
        self.entries: dict[str, dict] = dict(entries or {})
        self.model = model

    def put(self, digest: str, raw_response: dict) -> None:
        self.entries[digest] = raw_response

    def get(self, digest: str) -> Optional[dict]:
        return self.entries.get(digest)

    def to_document(self) -> dict:
        document: dict = {
            "schema_version": CASSETTE_SCHEMA_VERSION,
            "entries": {k: self.entries[k] for k in sorted(self.entries)},
        }
        if self.model is not None:
            document["model"] = self.model
        return document

    @classmethod
    def from_document(cls, document: dict) -> "Cassette":
        try:
            if document["schema_version"] != CASSETTE_SCHEMA_VERSION:
                raise MalformedResponse(
                    f"unsupported cassette schema {document['schema_version']!r}"
                )
            entries = document["entries"]
            if not isinstance(entries, dict):
                raise TypeError("entries must be an object")
        except (KeyError, TypeError) as exc:
            raise MalformedResponse(f"bad cassette document: {exc}") from exc
        return cls(entries, model=document.get("model"))

    def dumps(self) -> str:
        return json.dumps(self.to_document(), sort_keys=True, indent=2)

    @classmethod
    def loads(cls, text: str) -> "Cassette":
        try:
            document = json.loads(text)
        except json.JSONDecodeError as exc:
            raise MalformedResponse(f"cassette is not valid JSON: {exc}") from exc
        return cls.from_document(document)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> "Cassette":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.loads(fh.read())


class ReplayTransport:
    def __init__(self, cassette: Cassette):
        self._cassette = cassette

    def send(self, body: dict) -> dict:
        digest = request_digest(body)
        raw = self._cassette.get(digest)
        if raw is None:
            raise CassetteMiss(f"no recorded response for request {digest[:16]}")
        return raw


class RecordingTransport:
    def __init__(self, inner: Transport, cassette: Cassette):
        self._inner = inner
        self.cassette = cassette

    def send(self, body: dict) -> dict:
        raw = self._inner.send(body)
        if self.cassette.model is None:
            self.cassette.model = body.get("model")
        self.cassette.put(request_digest(body), raw)
        return raw


# -- client ------------------------------------------------------------------


class LlmClient:
    """Thread-safe completion client with retries and usage accounting."""

    def __init__(
        self,
        config: LlmConfig,
        transport: Optional[Transport] = None,
        sleeper: Callable[[float], None] = time.sleep,
    ):
        self.config = config
        self.transport = transport if transport is not None else HttpTransport(config)
        self._sleep = sleeper
        self._lock = threading.Lock()
        self.exchanges: list[ChatExchange] = []
        self.total_tokens_in = 0
        self.total_tokens_out = 0

    def complete(
        self,
        messages: Sequence[Mapping],
        tool_schemas: Optional[Sequence[Mapping]] = None,
    ) -> LlmResponse:
        """One exchange.  Transient failures (connection trouble, 429,
        5xx) retry with capped exponential backoff; the final failure
        propagates typed."""
        body: dict = {
            "model": self.config.model,
            "temperature": self.config.temperature,
            "messages": list(messages),
        }
        declared: tuple = ()
        if tool_schemas:
            body["tools"] = [
                {"type": "function", "function": dict(schema)}
                for schema in tool_schemas
            ]
            declared = tuple(s["name"] for s in tool_schemas)
        raw = self._send_with_retries(body)
        response = _parse_response(raw, declared)
        with self._lock:
            self.exchanges.append(
                ChatExchange(
                    messages=tuple(
                        json.dumps(m, sort_keys=True, default=str) for m in messages
                    ),
                    tool_names=declared,
                    response=response,
                )
            )
            self.total_tokens_in += response.tokens_in
            self.total_tokens_out += response.tokens_out
        return response

    def _send_with_retries(self, body: dict) -> dict:
        attempts = self.config.max_retries + 1
        last: Optional[LlmError] = None
        for attempt in range(attempts):
            try:
                return self.transport.send(body)
            except (RateLimited, TransportFailure) as exc:
                last = exc
                if attempt + 1 < attempts:
                    delay = min(
                        self.config.backoff_base * (2**attempt),
                        self.config.backoff_cap,
                    )
                    log.warning("retrying after %s (%.1fs)", exc, delay)
                    self._sleep(delay)
        assert last is not None
        raise last


def _parse_response(raw: dict, declared: tuple) -> LlmResponse:
    try:
        message = raw["choices"][0]["message"]
        usage = raw.get("usage") or {}
        tokens_in = int(usage.get("prompt_tokens", 0))
        tokens_out = int(usage.get("completion_tokens", 0))
        tool_call = None
        calls = message.get("tool_calls")
        if calls:
            function = calls[0]["function"]
            name = function["name"]
            if declared and name not in declared:
                raise MalformedResponse(f"response names undeclared tool {name!r}")
            raw_args = function.get("arguments") or "{}"
            arguments = json.loads(raw_args) if isinstance(raw_args, str) else raw_args
            if not isinstance(arguments, dict):
                raise MalformedResponse("tool arguments must be an object")
            tool_call = ToolCall(name=name, arguments=arguments)
        text = message.get("content")
    except MalformedResponse:
        raise
    except (KeyError, IndexError, TypeError, ValueError) as exc:
        raise MalformedResponse(f"unparseable reply: {exc}") from exc
    if tool_call is None and not text:
        raise MalformedResponse("reply carries neither a tool call nor text")
    return LlmResponse(
        tool_call=tool_call, text=text, tokens_in=tokens_in, tokens_out=tokens_out
    )


# -- policies ----------------------------------------------------------------

SYSTEM_PROMPT = (
    "You are investigating which earlier commit introduced the bug that a "
    "given fix commit repairs. You see a ranked candidate list (higher "
    "fitness means directly blamed code; lower means more distant history) "
    "and may call tools to inspect commits and their relationships. Diff "
    "reads are scarce; spend them only on the most promising candidates. "
    "When confident, call decide with the chosen commit sha and a short "
    "reason. Always respond with exactly one tool call."
)

SIMPLE_PROMPT = (
    "You are picking which of the listed commits most likely introduced the "
    "bug repaired by the fix described below. Answer with the chosen commit "
    "sha on a line of its own, nothing else."
)

_KNOWN_TOOLS = {schema["name"] for schema in TOOL_SCHEMAS}


class LlmPolicy:
    """Tool-calling decision policy backed by a completion client.

    Stateless between consultations: the whole conversation is rebuilt
    from the search transcript each time, so one instance is safely
    shared by concurrent loops.  Token usage is tracked per thread and
    handed to the loop through ``pop_usage``.
    """

    def __init__(
        self,
        client: LlmClient,
        system_prompt: str = SYSTEM_PROMPT,
        max_invalid_retries: int = 2,
    ):
        self._client = client
        self._system_prompt = system_prompt
        self._max_invalid_retries = max_invalid_retries
        self._local = threading.local()

    def pop_usage(self) -> tuple[int, int]:
        pending = getattr(self._local, "pending", (0, 0))
        self._local.pending = (0, 0)
        return pending

    def _charge(self, response: LlmResponse) -> None:
        tin, tout = getattr(self._local, "pending", (0, 0))
        self._local.pending = (tin + response.tokens_in, tout + response.tokens_out)

    def next_request(self, state: SearchState) -> ToolRequest:
        messages = self._render_messages(state)
        last_error = "no response"
        for _ in range(self._max_invalid_retries + 1):
            try:
                response = self._client.complete(messages, TOOL_SCHEMAS)
            except LlmError as exc:
                raise PolicyFailure(f"completion failed: {exc}") from exc
            self._charge(response)
            call = response.tool_call
            if call is not None and call.name in _KNOWN_TOOLS:
                return ToolRequest(call.name, call.arguments)
            last_error = (
                f"unusable reply (tool={getattr(call, 'name', None)!r})"
            )
            messages = messages + [
                {
                    "role": "user",
                    "content": "Respond with exactly one tool call from the "
                    "declared tools.",
                }
            ]
        raise PolicyFailure(last_error)

    def _render_messages(self, state: SearchState) -> list[dict]:
        messages: list[dict] = [
            {"role": "system", "content": self._system_prompt},
            {"role": "user", "content": _render_task(state)},
        ]
        for i, entry in enumerate(state.transcript):
            if entry.step == 0:
                continue  # the opening candidate list is part of the task text
            call_id = f"call_{i}"
            messages.append(
                {
                    "role": "assistant",
                    "content": None,
                    "tool_calls": [
                        {
                            "id": call_id,
                            "type": "function",
                            "function": {
                                "name": entry.request.name,
                                "arguments": json.dumps(
                                    dict(entry.request.args), sort_keys=True
                                ),
                            },
                        }
                    ],
                }
            )
            if entry.response.ok:
                content = json.dumps(entry.response.payload, sort_keys=True, default=str)
            else:
                content = json.dumps({"error": entry.response.error})
            messages.append(
                {"role": "tool", "tool_call_id": call_id, "content": content}
            )
        return messages


def _render_task(state: SearchState) -> str:
    graph = state.graph
    bfc = graph.bfc
    lines = [
        "Fix commit under investigation:",
        f"  sha: {bfc.sha}",
        f"  files: {', '.join(graph.files_of(bfc.sha)) or '(none)'}",
        "  message:",
    ]
    for raw in bfc.message.rstrip("\n").split("\n"):
        lines.append(f"    {raw}")
    if bfc.blame_stats is not None:
        stats = bfc.blame_stats
        lines.append(
            f"  blame: {stats.total_blame_commits} origin commit(s), "
            f"dominant={stats.dominant_commit or 'none'} "
            f"({stats.dominant_fraction:.2f})"
        )
    if bfc.used_fallback:
        lines.append("  note: fix adds lines only; blame used surrounding context")
    lines.append("")
    lines.append("Ranked candidates:")
    for candidate in state.candidates:
        lines.append(
            f"  {candidate.rank:>3}. {candidate.commit}  kind={candidate.kind}  "
            f"fitness={candidate.fitness}"
        )
    if not state.candidates:
        lines.append("  (none)")
    remaining_reads = state.budget.max_diff_reads - state.budget.diff_reads_used
    remaining_steps = state.budget.max_steps - state.budget.steps_used
    lines.append("")
    lines.append(
        f"Budget: {remaining_steps} step(s) and {remaining_reads} diff read(s) left."
    )
    return "\n".join(lines)


def make_text_completer(
    client: LlmClient, system_prompt: str = SIMPLE_PROMPT
) -> Callable[[str], str]:
    """Plain-text completion adapter for the no-tools pipeline variant."""

    def complete(prompt: str) -> str:
        response = client.complete(
            [
                {"role": "system", "content": system_prompt},
                {"role": "user", "content": prompt},
            ]
        )
        return response.text or ""

    return complete
