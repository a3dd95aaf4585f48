from __future__ import annotations

import json
import logging
import os
import random
import threading
import time
from typing import Callable, Optional

import httpx

from .limits import RateLimiter
from .models import (
    AuthError,
    BackendSpec,
    BackendUnavailable,
    CompletionRequest,
    CompletionResponse,
    MalformedResponse,
)

log = logging.getLogger(__name__)

RETRYABLE_STATUS = {408, 409, 425, 429, 500, 502, 503, 504}


class HttpBackend:
    """Chat-completions client with retries, a global concurrency cap and a rate limit."""

    def __init__(self, spec: BackendSpec, client: Optional[httpx.Client] = None,
                 sleep: Callable[[float], None] = time.sleep,
                 clock: Callable[[], float] = time.monotonic,
                 jitter: Optional[random.Random] = None):
        self.spec = spec
        self._client = client or httpx.Client(timeout=spec.timeout_s)
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(spec.max_concurrent)
        self._limiter = RateLimiter(spec.requests_per_minute, clock=clock, sleep=sleep)
        self._jitter = jitter or random.Random()
        self._jitter_lock = threading.Lock()

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.spec.auth_token_env:
            token = os.environ.get(self.spec.auth_token_env)
            if not token:
                raise AuthError(f"environment variable {self.spec.auth_token_env} is not set")
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def backoff_s(self, attempt: int) -> float:
        with self._jitter_lock:
            factor = self._jitter.uniform(0.8, 1.2)
        return self.spec.backoff_base_ms * (2 ** attempt) * factor / 1000.0

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        headers = self._headers()
        body = request.to_wire()
        last_error = "no attempt made"
        for attempt in range(self.spec.max_retries + 1):
            if attempt:
                self._sleep(self.backoff_s(attempt - 1))
            self._limiter.acquire()
            started = time.monotonic()
            try:
                with self._slots:
                    resp = self._client.post(self.spec.endpoint_url, json=body, headers=headers)
            except httpx.TransportError as exc:
                last_error = f"transport error: {exc}"
                log.warning("attempt %d failed: %s", attempt + 1, last_error)
                continue
            latency = int((time.monotonic() - started) * 1000)
            if resp.status_code in (401, 403):
                raise AuthError(f"endpoint rejected credentials (HTTP {resp.status_code})")
            if resp.status_code in RETRYABLE_STATUS:
                last_error = f"HTTP {resp.status_code}"
                log.warning("attempt %d failed: %s", attempt + 1, last_error)
                continue
            if resp.status_code >= 400:
                raise BackendUnavailable(f"HTTP {resp.status_code}: {resp.text[:200]}")
            return self._decode(resp, latency, attempt)
        raise BackendUnavailable(f"gave up after {self.spec.max_retries + 1} attempts ({last_error})")

    @staticmethod
    def _decode(resp: httpx.Response, latency: int, retries: int) -> CompletionResponse:
        try:
            payload = resp.json()
            choice = payload["choices"][0]
            content = choice["message"]["content"]
        except (json.JSONDecodeError, KeyError, IndexError, TypeError) as exc:
            raise MalformedResponse(f"undecodable completion body: {exc!r}") from None
        if isinstance(content, list):
            content = "".join(c.get("text", "") for c in content if isinstance(c, dict))
        if not isinstance(content, str):
            raise MalformedResponse("message content is not text")
        return CompletionResponse(
            text=content,
            finish_reason=str(choice.get("finish_reason") or "stop"),
            latency_ms=latency,
            retry_count=retries,
        )

    def close(self):
        self._client.close()
