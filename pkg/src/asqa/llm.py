"""Chat-completion client plumbing: retries, shared backoff, HTTP and mock providers."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence, TypeVar

import httpx

logger = logging.getLogger(__name__)

DEFAULT_MODEL = "gpt-3.5-turbo"
DEFAULT_BASE_URL = "https://api.openai.com/v1"
API_KEY_ENV = "ASQA_LLM_API_KEY"
BASE_URL_ENV = "ASQA_LLM_BASE_URL"

T = TypeVar("T")
R = TypeVar("R")


class LlmError(RuntimeError):
    def __init__(self, message: str, status: int | None = None, transient: bool = False):
        super().__init__(message)
        self.status = status
        self.transient = transient


class RateLimited(LlmError):
    def __init__(self, message: str, status: int | None = 429, retry_after: float | None = None):
        super().__init__(message, status=status, transient=True)
        self.retry_after = retry_after


class LlmConfigError(LlmError):
    pass


@dataclass(frozen=True)
class LlmRequest:
    system_or_task_prompt: str
    user_input: str
    model_name: str = DEFAULT_MODEL
    max_retries: int = 3
    timeout_s: float = 60.0
    temperature: float = 0.7

    def __post_init__(self) -> None:
        if not self.system_or_task_prompt.strip() or not self.user_input.strip():
            raise ValueError("prompt and user input must be non-empty")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")

    def digest(self) -> str:
        """Stable content hash used as the mock-provider lookup key."""
        payload = json.dumps(
            [self.model_name, self.system_or_task_prompt, self.user_input],
            ensure_ascii=False,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class ChatClient(Protocol):
    def complete(self, request: LlmRequest) -> str: ...


class BackoffGate:
    """Shared pause window: a rate-limit hit in one worker delays all of them."""

    def __init__(self, clock: Callable[[], float] = time.monotonic, sleep: Callable[[float], None] = time.sleep):
        self._lock = threading.Lock()
        self._resume_at = 0.0
        self.clock = clock
        self.sleep = sleep

    def pause(self, seconds: float) -> None:
        with self._lock:
            self._resume_at = max(self._resume_at, self.clock() + seconds)

    def wait(self) -> None:
        with self._lock:
            delay = self._resume_at - self.clock()
        if delay > 0:
            self.sleep(delay)


def call_llm(
    request: LlmRequest,
    client: ChatClient,
    *,
    base_delay_s: float = 1.0,
    max_delay_s: float = 60.0,
    sleep: Callable[[float], None] = time.sleep,
    gate: BackoffGate | None = None,
) -> str:
    """Send ``request`` with exponential backoff on transient failures.

    Makes at most ``max_retries + 1`` attempts; raises the last LlmError
    when they are exhausted. Non-transient errors are raised immediately.
    """
    attempt = 0
    while True:
        if gate is not None:
            gate.wait()
        try:
            return client.complete(request)
        except LlmError as exc:
            if not exc.transient or attempt >= request.max_retries:
                raise
            delay = min(max_delay_s, base_delay_s * 2**attempt)
            if isinstance(exc, RateLimited) and exc.retry_after:
                delay = max(delay, exc.retry_after)
            logger.info("llm attempt %d failed (%s); retrying in %.2fs", attempt + 1, exc, delay)
            if gate is not None and isinstance(exc, RateLimited):
                gate.pause(delay)
            else:
                sleep(delay)
            attempt += 1


class HttpChatClient:
    """OpenAI-compatible ``/chat/completions`` provider.

    The credential comes from an environment variable and is checked at
    construction, before any network traffic.
    """

    def __init__(
        self,
        base_url: str | None = None,
        api_key_env: str = API_KEY_ENV,
        transport: httpx.BaseTransport | None = None,
    ):
        key = os.environ.get(api_key_env, "").strip()
        if not key:
            raise LlmConfigError(f"missing credential: set {api_key_env}")
        self.base_url = (base_url or os.environ.get(BASE_URL_ENV) or DEFAULT_BASE_URL).rstrip("/")
        self._client = httpx.Client(headers={"Authorization": f"Bearer {key}"}, transport=transport)

    def complete(self, request: LlmRequest) -> str:
        body = {
            "model": request.model_name,
            "messages": [
                {"role": "system", "content": request.system_or_task_prompt},
                {"role": "user", "content": request.user_input},
            ],
            "temperature": request.temperature,
        }
        try:
            resp = self._client.post(f"{self.base_url}/chat/completions", json=body, timeout=request.timeout_s)
        except (httpx.TimeoutException, httpx.TransportError) as exc:
            raise LlmError(f"transport error: {exc}", transient=True) from exc
        if resp.status_code == 429:
            retry_after = resp.headers.get("retry-after")
            raise RateLimited(
                "rate limited",
                retry_after=float(retry_after) if retry_after and retry_after.replace(".", "", 1).isdigit() else None,
            )
        if resp.status_code >= 500:
            raise LlmError(f"server error {resp.status_code}", status=resp.status_code, transient=True)
        if resp.status_code >= 400:
            raise LlmError(f"request rejected {resp.status_code}: {resp.text[:200]}", status=resp.status_code)
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise LlmError(f"malformed response body: {exc}", status=resp.status_code) from exc

    def close(self) -> None:
        self._client.close()


class MockLlmClient:
    """Offline provider: ``<dir>/<request digest>.txt`` holds the canned reply."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        if not self.directory.is_dir():
            raise LlmConfigError(f"mock directory not found: {self.directory}")

    def path_for(self, request: LlmRequest) -> Path:
        return self.directory / f"{request.digest()}.txt"

    def record(self, request: LlmRequest, response: str) -> Path:
        p = self.path_for(request)
        p.write_text(response, encoding="utf-8")
        return p

    def complete(self, request: LlmRequest) -> str:
        p = self.path_for(request)
        if not p.exists():
            raise LlmError(f"no canned response for request {request.digest()[:12]}", status=404)
        return p.read_text(encoding="utf-8")


def ordered_map(fn: Callable[[T], R], items: Sequence[T] | Iterable[T], jobs: int = 1) -> list[R]:
    """Apply ``fn`` with up to ``jobs`` workers; results keep input order."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))
