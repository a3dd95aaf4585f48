"""Content-addressed on-disk response cache.

One JSON file per digest at ``<cache_dir>/<key[:2]>/<key>.json`` holding the
request hash, a timestamp, the response body and a checksum of that body.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
import time
from pathlib import Path
from typing import Optional

from ..core import HarnessError
from .models import CompletionResponse

log = logging.getLogger(__name__)


class CacheCorrupt(HarnessError):
    def __init__(self, key: str, reason: str = ""):
        super().__init__(f"cache entry {key} failed integrity check {reason}".strip())
        self.key = key


def _checksum(response: dict) -> str:
    blob = json.dumps(response, sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class ResponseCache:
    def __init__(self, cache_dir):
        self.root = Path(cache_dir)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.json"

    def get(self, key: str) -> Optional[CompletionResponse]:
        """Stored response, or None. Raises CacheCorrupt for a damaged entry."""
        path = self.path(key)
        try:
            raw = path.read_text(encoding="utf-8")
        except FileNotFoundError:
            return None
        try:
            entry = json.loads(raw)
            response = entry["response"]
            ok = entry["request_hash"] == key and entry["checksum"] == _checksum(response)
        except (json.JSONDecodeError, KeyError, TypeError):
            raise CacheCorrupt(key, "(unreadable)") from None
        if not ok:
            raise CacheCorrupt(key, "(checksum mismatch)")
        return CompletionResponse(
            text=response["text"],
            finish_reason=response["finish_reason"],
            latency_ms=response["latency_ms"],
            from_cache=True,
            retry_count=response.get("retry_count", 0),
        )

    def put(self, key: str, response: CompletionResponse) -> Path:
        body = response.to_dict()
        entry = {"request_hash": key, "created": time.time(), "response": body, "checksum": _checksum(body)}
        path = self.path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".json")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                json.dump(entry, fh, sort_keys=True, ensure_ascii=False)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        return path
