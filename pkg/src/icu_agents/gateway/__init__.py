"""Chat-completion execution: HTTP and mock backends, caching, call accounting."""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass

from .cache import CacheCorrupt, ResponseCache
from .http import HttpBackend
from .mock import MockBackend, MockRule, MockScript, SyntheticOracleBackend, load_mock_backend
from .models import (
    AuthError,
    Backend,
    BackendSpec,
    BackendUnavailable,
    CompletionRequest,
    CompletionResponse,
    GatewayError,
    MalformedResponse,
    Message,
    cache_key,
    user_request,
)

log = logging.getLogger(__name__)


def complete(backend: Backend, request: CompletionRequest) -> CompletionResponse:
    return backend.complete(request)


@dataclass
class GatewayStats:
    network_calls: int = 0
    cache_hits: int = 0
    uncacheable: int = 0
    corrupt_entries: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


class Gateway:
    """A backend plus optional response cache; shared across protocol workers."""

    def __init__(self, backend: Backend, cache_dir=None):
        self.backend = backend
        self.cache = ResponseCache(cache_dir) if cache_dir is not None else None
        self.stats = GatewayStats()
        self._lock = threading.Lock()

    def _count(self, name: str):
        with self._lock:
            setattr(self.stats, name, getattr(self.stats, name) + 1)

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        if self.cache is None:
            self._count("network_calls")
            return self.backend.complete(request)
        if not request.cacheable:
            self._count("uncacheable")
            self._count("network_calls")
            return self.backend.complete(request)
        key = cache_key(request)
        try:
            hit = self.cache.get(key)
        except CacheCorrupt as exc:
            log.warning("%s; refetching", exc)
            self._count("corrupt_entries")
            hit = None
        if hit is not None:
            self._count("cache_hits")
            return hit
        self._count("network_calls")
        response = self.backend.complete(request)
        self.cache.put(key, response)
        return response


def cached_complete(backend: Backend, request: CompletionRequest, cache_dir) -> CompletionResponse:
    return Gateway(backend, cache_dir).complete(request)


__all__ = [
    "AuthError", "Backend", "BackendSpec", "BackendUnavailable", "CacheCorrupt", "CompletionRequest",
    "CompletionResponse", "Gateway", "GatewayError", "GatewayStats", "HttpBackend", "MalformedResponse",
    "Message", "MockBackend", "MockRule", "MockScript", "ResponseCache", "SyntheticOracleBackend",
    "cache_key", "cached_complete", "complete", "load_mock_backend", "user_request",
]
