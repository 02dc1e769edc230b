"""Pluggable inference boundary: remote chat endpoint, deterministic keyword
baseline, and scripted mock, all behind one `infer` call that enforces the
two-second budget and tracks per-backend health.

A backend maps a prompt to text, nothing more. Score parsing, repair, and
entity extraction live downstream in the triage stage.
"""

from __future__ import annotations

import json
import math
import os
import re
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, Sequence

import requests

from .model import CategoryTaxonomy
from .prompting import extract_message

DEFAULT_DEADLINE_MS = 2_000
DEFAULT_MAX_RETRIES = 1
RETRY_BACKOFF_S = 0.1
PREDICTION_THRESHOLD = 0.5

HEALTH_WINDOW = 50
HEALTH_TRIP_RATE = 0.30

AUTH_TOKEN_ENV = "CRISIS_LLM_TOKEN"


class InferenceError(Exception):
    code = "inference_error"


class InferenceTimeout(InferenceError):
    code = "timeout"


class TransportError(InferenceError):
    code = "transport_error"


class BadStatus(InferenceError):
    code = "bad_status"


class BadPayload(InferenceError):
    code = "bad_payload"


class BackendTrippedError(InferenceError):
    code = "backend_tripped"


@dataclass(frozen=True)
class InferenceRequest:
    prompt: str
    backend_id: str
    deadline_ms: int = DEFAULT_DEADLINE_MS
    max_retries: int = DEFAULT_MAX_RETRIES

    def __post_init__(self):
        if self.deadline_ms <= 0:
            raise ValueError("deadline_ms must be > 0")


@dataclass(frozen=True)
class InferenceResponse:
    text: str
    elapsed_ms: float
    backend_id: str
    label_scores: Optional[dict[str, float]] = None

    def __post_init__(self):
        if self.label_scores is not None:
            bad = {k: v for k, v in self.label_scores.items() if not 0.0 <= v <= 1.0}
            if bad:
                raise ValueError(f"scores outside [0,1]: {bad}")


class BackendHealth:
    """Rolling parse-quality window; trips when bad output dominates.

    The window covers the most recent parsed outputs (up to 50). Once
    tripped, the flag stays up until an operator resets it.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._window: deque[bool] = deque(maxlen=HEALTH_WINDOW)
        self.calls = 0
        self.parse_failures = 0
        self.timeouts = 0
        self.tripped = False

    def record_call(self) -> None:
        with self._lock:
            self.calls += 1

    def record_timeout(self) -> None:
        with self._lock:
            self.timeouts += 1

    def record_parse(self, failed: bool) -> None:
        with self._lock:
            self._window.append(failed)
            if failed:
                self.parse_failures += 1
            if self._window and sum(self._window) / len(self._window) > HEALTH_TRIP_RATE:
                self.tripped = True

    def reset(self) -> None:
        with self._lock:
            self._window.clear()
            self.tripped = False

    def to_dict(self) -> dict:
        with self._lock:
            return {
                "calls": self.calls,
                "parse_failures": self.parse_failures,
                "timeouts": self.timeouts,
                "tripped": self.tripped,
            }


@dataclass(frozen=True)
class BackendReply:
    text: str
    label_scores: Optional[dict[str, float]] = None


class Backend(Protocol):
    id: str

    def complete(self, prompt: str, deadline_ms: int) -> BackendReply: ...


def baseline_classify(cleaned_text: str, taxonomy: CategoryTaxonomy) -> dict[str, float]:
    """Keyword score per label: m distinct lexicon hits -> 1 - 2^-m.

    Terms match as whole words, case-insensitive; multi-word phrases allowed.
    Deterministic and independent of lexicon iteration order.
    """
    lowered = cleaned_text.lower()
    scores: dict[str, float] = {}
    for label in taxonomy.labels:
        hits = 0
        for term in label.lexicon:
            pattern = r"(?<!\w)" + re.escape(term) + r"(?!\w)"
            if re.search(pattern, lowered):
                hits += 1
        scores[label.key] = 1.0 - math.pow(2.0, -hits)
    return scores


def serialize_contract(
    relevant: bool,
    labels: Sequence[tuple[str, float]],
    level_word: str = "unknown",
    location: Optional[str] = None,
    contact: Optional[str] = None,
) -> str:
    """Serialize the structured output contract object (one JSON line)."""
    return json.dumps(
        {
            "relevant": relevant,
            "labels": [{"key": k, "confidence": round(c, 6)} for k, c in labels],
            "level": level_word,
            "location": location,
            "contact": contact,
        },
        ensure_ascii=False,
        separators=(", ", ": "),
    )


class KeywordBaselineBackend:
    """Deterministic stand-in backend driven by the taxonomy lexicons.

    Recovers the embedded message from the prompt markers, scores it, and
    answers with the structured output contract.
    """

    def __init__(self, taxonomy: CategoryTaxonomy, backend_id: str = "baseline"):
        self.id = backend_id
        self.taxonomy = taxonomy

    def complete(self, prompt: str, deadline_ms: int) -> BackendReply:
        message = extract_message(prompt)
        if message is None:
            raise BadPayload("prompt carries no message block")
        scores = baseline_classify(message, self.taxonomy)
        predicted = [
            (label.key, scores[label.key])
            for label in self.taxonomy.labels
            if scores[label.key] >= PREDICTION_THRESHOLD
        ]
        text = serialize_contract(relevant=bool(predicted), labels=predicted)
        return BackendReply(text=text, label_scores=scores)


class MockBackend:
    """Scripted backend for tests: canned replies, delays, or raised errors."""

    def __init__(
        self,
        replies: Sequence[str] | Callable[[str], str],
        backend_id: str = "mock",
        sleep_s: float = 0.0,
        errors: Sequence[Optional[Exception]] = (),
    ):
        self.id = backend_id
        self._replies = replies
        self._errors = list(errors)
        self.sleep_s = sleep_s
        self._calls = 0
        self._lock = threading.Lock()

    def complete(self, prompt: str, deadline_ms: int) -> BackendReply:
        with self._lock:
            call_index = self._calls
            self._calls += 1
        if self.sleep_s:
            time.sleep(self.sleep_s)
        if call_index < len(self._errors) and self._errors[call_index] is not None:
            raise self._errors[call_index]
        if callable(self._replies):
            return BackendReply(text=self._replies(prompt))
        return BackendReply(text=self._replies[call_index % len(self._replies)])


@dataclass(frozen=True)
class EndpointConfig:
    url: str
    model: str
    auth_token: Optional[str] = None
    temperature: float = 0.0


def remote_chat_call(prompt: str, endpoint: EndpointConfig, deadline_ms: int) -> str:
    """POST one chat-completion request and return the first choice's text.

    Wire format is fixed: request {model, messages, temperature}, response
    choices[0].message.content. Auth token may be overridden via the
    CRISIS_LLM_TOKEN environment variable.
    """
    headers = {"Content-Type": "application/json"}
    token = os.environ.get(AUTH_TOKEN_ENV) or endpoint.auth_token
    if token:
        headers["Authorization"] = f"Bearer {token}"
    body = {
        "model": endpoint.model,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": endpoint.temperature,
    }
    try:
        resp = requests.post(endpoint.url, json=body, headers=headers, timeout=deadline_ms / 1000.0)
    except requests.Timeout as exc:
        raise InferenceTimeout(str(exc)) from exc
    except requests.RequestException as exc:
        raise TransportError(str(exc)) from exc
    if not 200 <= resp.status_code < 300:
        raise BadStatus(f"HTTP {resp.status_code}")
    try:
        content = resp.json()["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise BadPayload(f"missing content field: {exc}") from exc
    if not isinstance(content, str):
        raise BadPayload("content is not text")
    return content


class RemoteChatBackend:
    """Backend speaking the chat-completions wire format over HTTP."""

    def __init__(self, endpoint: EndpointConfig, backend_id: str = "remote"):
        self.id = backend_id
        self.endpoint = endpoint

    def complete(self, prompt: str, deadline_ms: int) -> BackendReply:
        return BackendReply(text=remote_chat_call(prompt, self.endpoint, deadline_ms))


class BackendRegistry:
    """Thread-safe registry of backends and their health counters."""

    def __init__(self):
        self._lock = threading.Lock()
        self._backends: dict[str, Backend] = {}
        self._health: dict[str, BackendHealth] = {}
        # Bounded pool used solely to cut off calls at their deadline.
        self._executor = ThreadPoolExecutor(max_workers=16, thread_name_prefix="infer")

    def register(self, backend: Backend) -> None:
        with self._lock:
            self._backends[backend.id] = backend
            self._health.setdefault(backend.id, BackendHealth())

    def get(self, backend_id: str) -> Backend:
        with self._lock:
            if backend_id not in self._backends:
                raise KeyError(f"unknown backend: {backend_id}")
            return self._backends[backend_id]

    def health(self, backend_id: str) -> BackendHealth:
        with self._lock:
            if backend_id not in self._health:
                raise KeyError(f"unknown backend: {backend_id}")
            return self._health[backend_id]

    def ids(self) -> list[str]:
        with self._lock:
            return sorted(self._backends)

    def record_parse(self, backend_id: str, failed: bool) -> None:
        self.health(backend_id).record_parse(failed)

    def reset(self, backend_id: str) -> None:
        self.health(backend_id).reset()

    def all_tripped(self) -> bool:
        with self._lock:
            healths = list(self._health.values())
        return bool(healths) and all(h.tripped for h in healths)

    def infer(self, request: InferenceRequest) -> InferenceResponse:
        """Run one request within its deadline, retrying transport faults.

        Raises InferenceTimeout, TransportError, BadStatus, BadPayload, or
        BackendTrippedError. A success never reports elapsed_ms beyond the
        deadline; late completions become timeouts.
        """
        backend = self.get(request.backend_id)
        health = self.health(request.backend_id)
        if health.tripped:
            raise BackendTrippedError(request.backend_id)

        started = time.perf_counter()
        attempts = 1 + max(0, request.max_retries)
        last_error: InferenceError = TransportError("no attempt made")
        for attempt in range(attempts):
            remaining_ms = request.deadline_ms - (time.perf_counter() - started) * 1000.0
            if remaining_ms <= 0:
                health.record_timeout()
                raise InferenceTimeout(f"budget exhausted after {attempt} attempts")
            health.record_call()
            future = self._executor.submit(backend.complete, request.prompt, int(remaining_ms))
            try:
                reply = future.result(timeout=remaining_ms / 1000.0)
            except FutureTimeout:
                future.cancel()
                health.record_timeout()
                elapsed = (time.perf_counter() - started) * 1000.0
                raise InferenceTimeout(f"no reply within {request.deadline_ms} ms (waited {elapsed:.0f} ms)")
            except InferenceTimeout:
                health.record_timeout()
                raise
            except (TransportError, BadStatus) as exc:
                last_error = exc
                if attempt + 1 < attempts:
                    time.sleep(RETRY_BACKOFF_S)
                    continue
                raise
            except InferenceError:
                raise
            elapsed = (time.perf_counter() - started) * 1000.0
            if elapsed > request.deadline_ms:
                health.record_timeout()
                raise InferenceTimeout(f"reply landed at {elapsed:.0f} ms, past the deadline")
            return InferenceResponse(
                text=reply.text,
                elapsed_ms=elapsed,
                backend_id=request.backend_id,
                label_scores=reply.label_scores,
            )
        raise last_error
