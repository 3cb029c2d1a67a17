"""Pluggable model clients: a rate-limited remote HTTP client and a
deterministic scripted mock.

Both share one retry loop (exponential backoff with full jitter from a seeded
random source) and one request/response shape. The mock answers by exact
(stage, image_id, prompt_id) key and records a transcript, which is what the
crash-resume tests audit.
"""
from __future__ import annotations

import json
import logging
import random
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence

from .clock import Clock, SystemClock

logger = logging.getLogger(__name__)

# request-kind names used as the first element of a mock script key
STAGE_SELF_QUESTION = "self_question"
STAGE_ANSWER_NAIVE = "answer_naive"
STAGE_ANSWER_COT = "answer_cot"
STAGE_ANSWER_FEW_SHOT = "answer_few_shot"
STAGE_ANSWER_WITH_REASONING = "answer_with_reasoning"
STAGE_REASONING = "reasoning"
STAGE_EVALUATION = "evaluation"
STAGE_CONSISTENCY = "consistency"

RequestKey = tuple[str, str, str]  # (stage, image_id, prompt_id)


class TransientBackendError(RuntimeError):
    """Failure worth retrying: timeout, throttling, 5xx."""


class PermanentBackendError(RuntimeError):
    """Failure that retrying will not fix, or retries exhausted."""

    def __init__(self, message: str, request_id: str = "") -> None:
        super().__init__(message)
        self.request_id = request_id


class ProtocolError(RuntimeError):
    """The service answered with something that is not a valid response."""


class MockScriptError(ValueError):
    """The mock script file is unusable."""


@dataclass(frozen=True)
class BackendRequest:
    """One model call. stage/image_id/prompt_id identify the call site for
    scripted mocks, transcripts, and logs."""

    request_id: str
    image_ref: str
    prompt_text: str
    temperature: float = 0.2
    max_output_tokens: int = 1024
    stage: str = ""
    image_id: str = ""
    prompt_id: str = ""

    def __post_init__(self) -> None:
        if not self.prompt_text:
            raise ValueError("prompt_text must be non-empty")
        if self.temperature < 0:
            raise ValueError(f"temperature must be nonnegative, got {self.temperature}")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be >= 1")

    @property
    def key(self) -> RequestKey:
        return (self.stage, self.image_id, self.prompt_id)


@dataclass(frozen=True)
class BackendResponse:
    request_id: str
    output_text: str
    model_tag: str
    latency_ms: int = 0


@dataclass(frozen=True)
class RateLimitPolicy:
    requests_per_second: float
    burst: int = 1
    max_retries: int = 3
    base_backoff_ms: int = 100

    def __post_init__(self) -> None:
        if self.requests_per_second <= 0:
            raise ValueError("requests_per_second must be positive")
        if self.burst < 1:
            raise ValueError("burst must be >= 1")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.base_backoff_ms < 0:
            raise ValueError("base_backoff_ms must be >= 0")


class Backend(Protocol):
    def complete(self, req: BackendRequest) -> BackendResponse:
        ...


class BackendCounters:
    """Thread-safe call/retry tallies for run reports."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.calls = 0
        self.retries = 0

    def count_call(self) -> None:
        with self._lock:
            self.calls += 1

    def count_retry(self) -> None:
        with self._lock:
            self.retries += 1

    def snapshot(self) -> dict[str, int]:
        with self._lock:
            return {"calls": self.calls, "retries": self.retries}


# ---------------------------------------------------------------------------
# token bucket
# ---------------------------------------------------------------------------

class TokenBucket:
    """Continuous-refill token bucket; the single synchronization point shared
    by all workers using one client.

    Grant guarantee: in any half-open window of w seconds, grants never exceed
    ceil(rate * w) + burst.
    """

    # forgives cumulative float drift; far below one whole token per run
    _EPSILON = 1e-9

    def __init__(self, rate: float, burst: int, clock: Clock | None = None) -> None:
        if rate <= 0:
            raise ValueError("rate must be positive")
        if burst < 1:
            raise ValueError("burst must be >= 1")
        self._rate = float(rate)
        self._burst = float(burst)
        self._clock = clock or SystemClock()
        self._lock = threading.Lock()
        self._tokens = float(burst)
        self._last = self._clock.monotonic()

    def acquire(self) -> float:
        """Block until a token is available; returns the grant time."""
        while True:
            with self._lock:
                now = self._clock.monotonic()
                if now > self._last:
                    self._tokens = min(self._burst, self._tokens + (now - self._last) * self._rate)
                self._last = now
                if self._tokens >= 1.0 - self._EPSILON:
                    self._tokens -= 1.0
                    return now
                wait = (1.0 - self._tokens) / self._rate
            self._clock.sleep(wait)


# ---------------------------------------------------------------------------
# retry loop
# ---------------------------------------------------------------------------

def backoff_delay_s(rng: random.Random, attempt: int, base_backoff_ms: int) -> float:
    """Full-jitter backoff: uniform in [0, base_backoff_ms * 2^attempt]."""
    ceiling_ms = base_backoff_ms * (2 ** attempt)
    return rng.uniform(0.0, ceiling_ms) / 1000.0


def call_with_retries(
    send_once: Callable[[BackendRequest], BackendResponse],
    req: BackendRequest,
    *,
    max_retries: int,
    base_backoff_ms: int,
    rng: random.Random,
    clock: Clock,
    counters: BackendCounters | None = None,
) -> BackendResponse:
    """Run ``send_once`` retrying transient failures up to ``max_retries``."""
    attempt = 0
    while True:
        try:
            return send_once(req)
        except TransientBackendError as exc:
            if attempt >= max_retries:
                raise PermanentBackendError(
                    f"request {req.request_id} gave up after {attempt} retries: {exc}",
                    request_id=req.request_id,
                ) from exc
            if counters is not None:
                counters.count_retry()
            delay = backoff_delay_s(rng, attempt, base_backoff_ms)
            logger.warning(
                "retrying request %s (stage=%s attempt=%d delay=%.4fs): %s",
                req.request_id, req.stage, attempt + 1, delay, exc,
            )
            clock.sleep(delay)
            attempt += 1


# ---------------------------------------------------------------------------
# scripted mock
# ---------------------------------------------------------------------------

class MockBackend:
    """Answers by exact (stage, image_id, prompt_id) key with scripted text.

    Pure function of (script, request key); the transcript lists every
    attempted key in call order. Fault schedules inject failures that are
    consumed one per attempt ("timeout" is retryable, "error" is not).
    """

    def __init__(
        self,
        script: Mapping[RequestKey, str],
        *,
        strict: bool = True,
        default_text: str = "",
        model_tag: str = "mock",
        faults: Mapping[RequestKey, Sequence[str]] | None = None,
        max_retries: int = 3,
        base_backoff_ms: int = 100,
        seed: int = 0,
        clock: Clock | None = None,
    ) -> None:
        self._script = dict(script)
        self._strict = strict
        self._default_text = default_text
        self._model_tag = model_tag
        self._faults = {k: list(v) for k, v in (faults or {}).items()}
        self._max_retries = max_retries
        self._base_backoff_ms = base_backoff_ms
        self._rng = random.Random(seed)
        self._clock = clock or SystemClock()
        self._lock = threading.Lock()
        self.transcript: list[RequestKey] = []
        self.counters = BackendCounters()

    @property
    def model_tag(self) -> str:
        return self._model_tag

    def complete(self, req: BackendRequest) -> BackendResponse:
        return call_with_retries(
            self._send_once,
            req,
            max_retries=self._max_retries,
            base_backoff_ms=self._base_backoff_ms,
            rng=self._rng,
            clock=self._clock,
            counters=self.counters,
        )

    def _send_once(self, req: BackendRequest) -> BackendResponse:
        key = req.key
        with self._lock:
            self.transcript.append(key)
            fault = None
            schedule = self._faults.get(key)
            if schedule:
                fault = schedule.pop(0)
        self.counters.count_call()
        if fault == "timeout":
            raise TransientBackendError(f"scripted timeout for {key}")
        if fault == "error":
            raise PermanentBackendError(f"scripted permanent failure for {key}",
                                        request_id=req.request_id)
        if key in self._script:
            text = self._script[key]
        elif self._strict:
            raise PermanentBackendError(f"no scripted response for key {key}",
                                        request_id=req.request_id)
        else:
            text = self._default_text
        return BackendResponse(
            request_id=req.request_id,
            output_text=text,
            model_tag=self._model_tag,
            latency_ms=0,
        )


def mock_load_script(path: str | Path, **kwargs: Any) -> MockBackend:
    """Build a MockBackend from a JSONL script of
    {stage, image_id, prompt_id, output_text} (optional faults: [...]).

    A duplicate key is fatal at load.
    """
    script: dict[RequestKey, str] = {}
    faults: dict[RequestKey, list[str]] = {}
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise MockScriptError(f"cannot read mock script {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MockScriptError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
        try:
            key: RequestKey = (row["stage"], row["image_id"], row["prompt_id"])
            output_text = row["output_text"]
        except KeyError as exc:
            raise MockScriptError(f"{path}:{lineno}: missing field {exc}") from exc
        if key in script:
            raise MockScriptError(f"{path}:{lineno}: duplicate key {key}")
        script[key] = output_text
        if row.get("faults"):
            faults[key] = [str(f) for f in row["faults"]]
    return MockBackend(script, faults=faults, **kwargs)


# ---------------------------------------------------------------------------
# remote client
# ---------------------------------------------------------------------------

# transport(url, headers, payload, timeout_s) -> (http status, body text);
# network-level failures should raise TransientBackendError
Transport = Callable[[str, Mapping[str, str], Mapping[str, Any], float], tuple[int, str]]


def _requests_transport(
    url: str, headers: Mapping[str, str], payload: Mapping[str, Any], timeout_s: float
) -> tuple[int, str]:
    import requests

    try:
        resp = requests.post(url, headers=dict(headers), json=dict(payload), timeout=timeout_s)
    except requests.RequestException as exc:
        raise TransientBackendError(f"network error: {exc}") from exc
    return resp.status_code, resp.text


class RemoteBackend:
    """Generic JSON-over-HTTP client with token-bucket rate limiting.

    Request body: {request_id, model, prompt, image_ref, temperature,
    max_output_tokens}; expected response body: JSON with "output_text" and
    optional "model_tag".
    """

    def __init__(
        self,
        url: str,
        model: str,
        policy: RateLimitPolicy,
        *,
        api_key: str | None = None,
        clock: Clock | None = None,
        seed: int = 0,
        transport: Transport | None = None,
        timeout_s: float = 60.0,
    ) -> None:
        self._url = url
        self._model = model
        self._policy = policy
        self._api_key = api_key
        self._clock = clock or SystemClock()
        self._rng = random.Random(seed)
        self._transport = transport or _requests_transport
        self._timeout_s = timeout_s
        self.bucket = TokenBucket(policy.requests_per_second, policy.burst, self._clock)
        self.counters = BackendCounters()

    @property
    def model_tag(self) -> str:
        return self._model

    def complete(self, req: BackendRequest) -> BackendResponse:
        return call_with_retries(
            self._send_once,
            req,
            max_retries=self._policy.max_retries,
            base_backoff_ms=self._policy.base_backoff_ms,
            rng=self._rng,
            clock=self._clock,
            counters=self.counters,
        )

    def _send_once(self, req: BackendRequest) -> BackendResponse:
        self.bucket.acquire()
        self.counters.count_call()
        started = self._clock.monotonic()
        headers = {"content-type": "application/json"}
        if self._api_key:
            headers["authorization"] = f"Bearer {self._api_key}"
        payload = {
            "request_id": req.request_id,
            "model": self._model,
            "prompt": req.prompt_text,
            "image_ref": req.image_ref,
            "temperature": req.temperature,
            "max_output_tokens": req.max_output_tokens,
        }
        status, body = self._transport(self._url, headers, payload, self._timeout_s)
        if status == 429 or 500 <= status < 600:
            raise TransientBackendError(f"http {status}")
        if status != 200:
            raise PermanentBackendError(f"http {status}: {body[:200]}",
                                        request_id=req.request_id)
        try:
            parsed = json.loads(body)
            output_text = parsed["output_text"]
        except (json.JSONDecodeError, TypeError, KeyError) as exc:
            raise ProtocolError(f"malformed response body: {exc}") from exc
        if not isinstance(output_text, str):
            raise ProtocolError("output_text must be a string")
        latency_ms = int((self._clock.monotonic() - started) * 1000)
        return BackendResponse(
            request_id=req.request_id,
            output_text=output_text,
            model_tag=parsed.get("model_tag", self._model),
            latency_ms=latency_ms,
        )
