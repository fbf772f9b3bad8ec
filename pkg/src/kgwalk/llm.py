"""Chat-completion backends: an OpenAI-compatible HTTP client and a scripted replayer."""
from __future__ import annotations

import json
import logging
import os
import random
import threading
import time
from dataclasses import dataclass, field
from typing import IO, Callable, Literal, Protocol, runtime_checkable

import httpx

from kgwalk.prompts import CALL_STAGES, Stage

log = logging.getLogger(__name__)

Role = Literal["system", "user", "assistant"]


class LlmError(RuntimeError):
    pass


class TransportError(LlmError):
    """HTTP failure that persisted through every retry."""

    def __init__(self, message: str, attempts: int):
        self.attempts = attempts
        super().__init__(f"{message} (after {attempts} attempt(s))")


class ProtocolError(LlmError):
    """The endpoint answered but without assistant content."""


class ScriptError(LlmError):
    """A scripted transcript was exhausted or did not match the requested stage."""


class TranscriptLoadError(ValueError):
    pass


@dataclass(frozen=True)
class Message:
    role: Role
    content: str

    def to_dict(self) -> dict:
        return {"role": self.role, "content": self.content}


@dataclass
class MessageContext:
    messages: list[Message] = field(default_factory=list)

    @classmethod
    def start(cls, system_prompt: str, query: str) -> MessageContext:
        return cls([Message("system", system_prompt), Message("user", query)])

    def add(self, role: Role, content: str) -> None:
        self.messages.append(Message(role, content))

    def reset(self, summary: str) -> None:
        """Keep the system prompt and query, then the summary."""
        self.messages = [self.messages[0], self.messages[1], Message("assistant", summary)]

    def footprint(self) -> int:
        return sum(len(m.content) for m in self.messages)

    def __len__(self) -> int:
        return len(self.messages)

    def to_list(self) -> list[dict]:
        return [m.to_dict() for m in self.messages]


@dataclass(frozen=True)
class CompletionParams:
    temperature: float = 0.0
    max_output_tokens: int = 1024
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be positive")


@runtime_checkable
class LlmBackend(Protocol):
    model: str
    supports_temperature: bool

    def complete(self, context: MessageContext, params: CompletionParams, stage: Stage | None = None) -> str:
        ...


def _check_context(context: MessageContext) -> None:
    if not context.messages or context.messages[0].role != "system":
        raise ValueError("context must start with a system message")


# -- scripted backend ----------------------------------------------------------

@dataclass
class ScriptedTranscript:
    entries: list[tuple[Stage, str]]
    strictness: Literal["by_order", "by_stage"] = "by_stage"
    cursor: int = 0

    def __len__(self) -> int:
        return len(self.entries)

    def copy(self) -> ScriptedTranscript:
        return ScriptedTranscript(list(self.entries), self.strictness, 0)

    def to_dict(self) -> dict:
        return {
            "strictness": self.strictness,
            "entries": [{"stage": s.value, "response": r} for s, r in self.entries],
        }


def _parse_entries(raw_entries: object, where: str = "") -> list[tuple[Stage, str]]:
    if not isinstance(raw_entries, list):
        raise TranscriptLoadError(f"{where}entries must be a list")
    entries = []
    for index, entry in enumerate(raw_entries):
        if not isinstance(entry, dict) or "stage" not in entry or "response" not in entry:
            raise TranscriptLoadError(f"{where}entry {index}: expected an object with stage and response")
        try:
            stage = Stage(entry["stage"])
        except ValueError:
            raise TranscriptLoadError(f"{where}entry {index}: unknown stage {entry['stage']!r}") from None
        if stage not in CALL_STAGES:
            raise TranscriptLoadError(f"{where}entry {index}: stage {stage.value} is never sent to the model")
        if not isinstance(entry["response"], str):
            raise TranscriptLoadError(f"{where}entry {index}: response must be a string")
        entries.append((stage, entry["response"]))
    if not entries:
        raise TranscriptLoadError(f"{where}empty transcript")
    return entries


def transcript_from_obj(doc: object) -> ScriptedTranscript:
    if isinstance(doc, list):
        return ScriptedTranscript(_parse_entries(doc))
    if not isinstance(doc, dict):
        raise TranscriptLoadError("transcript must be a list or an object")
    strictness = doc.get("strictness", "by_stage")
    if strictness not in ("by_order", "by_stage"):
        raise TranscriptLoadError(f"unknown strictness {strictness!r}")
    return ScriptedTranscript(_parse_entries(doc.get("entries")), strictness)


def load_transcript(source: IO[bytes] | IO[str]) -> ScriptedTranscript:
    """Read a JSON transcript: a list of ``{stage, response}`` entries, or an
    object with ``entries`` and optional ``strictness``."""
    data = source.read()
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    if not data.strip():
        raise TranscriptLoadError("empty transcript")
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise TranscriptLoadError(f"invalid transcript JSON: {exc.msg}") from None
    return transcript_from_obj(doc)


class ScriptedBackend:
    """Returns transcript responses in order. One instance serves one run."""

    supports_temperature = False

    def __init__(self, transcript: ScriptedTranscript, model: str = "scripted"):
        self.transcript = transcript
        self.model = model

    def complete(self, context: MessageContext, params: CompletionParams, stage: Stage | None = None) -> str:
        _check_context(context)
        t = self.transcript
        if t.cursor >= len(t.entries):
            raise ScriptError(f"transcript exhausted at entry {t.cursor} (requested stage {stage.value if stage else '?'})")
        expected, response = t.entries[t.cursor]
        if t.strictness == "by_stage" and stage is not None and Stage(stage) is not expected:
            raise ScriptError(
                f"entry {t.cursor} is for stage {expected.value} but stage {Stage(stage).value} was requested"
            )
        t.cursor += 1
        return response


# -- remote backend ------------------------------------------------------------

RETRYABLE_STATUS = frozenset({408, 409, 425, 429, 500, 502, 503, 504})


class OpenAICompatibleBackend:
    """Client for ``POST {base_url}/v1/chat/completions``.

    Transient failures (connection errors, timeouts, 429 and 5xx) are retried
    with jittered exponential backoff; total sleeping never exceeds
    ``retry_ceiling`` seconds. The API key is read from ``api_key_env``.
    """

    supports_temperature = True

    def __init__(
        self,
        model: str,
        base_url: str = "http://localhost:8000",
        *,
        api_key_env: str = "OPENAI_API_KEY",
        timeout: float = 120.0,
        max_retries: int = 3,
        backoff_base: float = 1.0,
        backoff_cap: float = 30.0,
        retry_ceiling: float = 120.0,
        max_in_flight: int = 4,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
        rng: random.Random | None = None,
    ):
        self.model = model
        self.base_url = base_url.rstrip("/")
        self.api_key_env = api_key_env
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self.backoff_cap = backoff_cap
        self.retry_ceiling = retry_ceiling
        self._sleep = sleep
        self._rng = rng or random.Random()
        self._rng_lock = threading.Lock()
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._client = httpx.Client(timeout=timeout, transport=transport)

    @property
    def url(self) -> str:
        if self.base_url.endswith("/v1"):
            return f"{self.base_url}/chat/completions"
        return f"{self.base_url}/v1/chat/completions"

    def backoff_schedule(self) -> list[float]:
        """Delays before retry 1..max_retries, clipped to the retry ceiling."""
        delays, total = [], 0.0
        for attempt in range(self.max_retries):
            delay = min(self.backoff_cap, self.backoff_base * 2**attempt)
            with self._rng_lock:
                delay *= self._rng.uniform(0.5, 1.0)
            delay = max(0.0, min(delay, self.retry_ceiling - total))
            delays.append(delay)
            total += delay
        return delays

    def _payload(self, context: MessageContext, params: CompletionParams) -> dict:
        payload = {
            "model": self.model,
            "messages": context.to_list(),
            "temperature": params.temperature,
            "max_tokens": params.max_output_tokens,
        }
        if params.seed is not None:
            payload["seed"] = params.seed
        return payload

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def complete(self, context: MessageContext, params: CompletionParams, stage: Stage | None = None) -> str:
        _check_context(context)
        payload = self._payload(context, params)
        delays = self.backoff_schedule()
        attempts = 0
        last_error = "no attempt made"
        with self._slots:
            for attempt in range(self.max_retries + 1):
                attempts += 1
                try:
                    response = self._client.post(self.url, json=payload, headers=self._headers())
                except httpx.HTTPError as exc:
                    last_error = f"{type(exc).__name__}: {exc}"
                else:
                    if response.status_code == 200:
                        return _assistant_content(response)
                    last_error = f"HTTP {response.status_code}"
                    if response.status_code not in RETRYABLE_STATUS:
                        break
                if attempt < self.max_retries:
                    log.warning("chat completion failed (%s); retry %d/%d in %.2fs",
                                last_error, attempt + 1, self.max_retries, delays[attempt])
                    self._sleep(delays[attempt])
        log.error("chat completion gave up after %d attempt(s): %s", attempts, last_error)
        raise TransportError(last_error, attempts)

    def close(self) -> None:
        self._client.close()


def _assistant_content(response: httpx.Response) -> str:
    try:
        body = response.json()
        content = body["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError):
        raise ProtocolError("response lacks choices[0].message.content") from None
    if not isinstance(content, str):
        raise ProtocolError("assistant content is not text")
    return content


def complete(backend: LlmBackend, context: MessageContext, params: CompletionParams,
             stage: Stage | None = None) -> str:
    return backend.complete(context, params, stage)

