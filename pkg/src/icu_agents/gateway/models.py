from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence, Union

from ..core import HarnessError, ValidationError
from ..serialize import Part, PromptContext, TextPart


class GatewayError(HarnessError):
    pass


class BackendUnavailable(GatewayError):
    pass


class MalformedResponse(GatewayError):
    pass


class AuthError(GatewayError):
    pass


ROLES = ("system", "user", "assistant")


@dataclass(frozen=True)
class Message:
    role: str
    parts: tuple[Part, ...]

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValidationError(f"bad role {self.role!r}")
        object.__setattr__(self, "parts", tuple(self.parts))

    @classmethod
    def text(cls, role: str, text: str) -> "Message":
        return cls(role, (TextPart(text),))

    @property
    def text_content(self) -> str:
        return "\n\n".join(p.text if isinstance(p, TextPart) else p.label for p in self.parts)


@dataclass(frozen=True)
class CompletionRequest:
    model_id: str
    messages: tuple[Message, ...]
    temperature: float = 0.0
    max_tokens: int = 1024
    seed: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "messages", tuple(self.messages))
        if not self.messages:
            raise ValidationError("a request needs at least one message")
        if self.temperature < 0:
            raise ValidationError("temperature must be non-negative")
        if self.max_tokens <= 0:
            raise ValidationError("max_tokens must be positive")
        roles = [m.role for m in self.messages]
        if "system" in roles[1:]:
            raise ValidationError("a system message may only come first")
        body = roles[1:] if roles[0] == "system" else roles
        if not body or body[0] != "user":
            raise ValidationError("conversation must start with a user message")
        for a, b in zip(body, body[1:]):
            if a == b:
                raise ValidationError("user and assistant turns must alternate")

    @property
    def text(self) -> str:
        """All text in the request; mock matchers run over this."""
        return "\n\n".join(m.text_content for m in self.messages)

    @property
    def cacheable(self) -> bool:
        return self.temperature == 0 or self.seed is not None

    def to_wire(self) -> dict:
        """Chat-completions JSON body."""
        messages = []
        for m in self.messages:
            if all(isinstance(p, TextPart) for p in m.parts):
                content: Union[str, list] = "\n\n".join(p.text for p in m.parts)
            else:
                content = []
                for p in m.parts:
                    if isinstance(p, TextPart):
                        content.append({"type": "text", "text": p.text})
                    else:
                        content.append({"type": "text", "text": p.label})
                        url = f"data:{p.media_type};base64,{base64.b64encode(p.data).decode('ascii')}"
                        content.append({"type": "image_url", "image_url": {"url": url}})
            messages.append({"role": m.role, "content": content})
        body = {
            "model": self.model_id,
            "messages": messages,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }
        if self.seed is not None:
            body["seed"] = self.seed
        return body


def user_request(context: PromptContext, model_id: str, *, system: Optional[str] = None,
                 history: Sequence[Message] = (), extra_parts: Sequence[Part] = (),
                 temperature: float = 0.0, max_tokens: int = 1024,
                 seed: Optional[int] = None) -> CompletionRequest:
    messages = [Message.text("system", system)] if system else []
    messages.append(Message("user", tuple(context.parts) + tuple(extra_parts)))
    messages.extend(history)
    return CompletionRequest(model_id, tuple(messages), temperature, max_tokens, seed)


@dataclass(frozen=True)
class CompletionResponse:
    text: str
    finish_reason: str = "stop"
    latency_ms: int = 0
    from_cache: bool = False
    retry_count: int = 0

    def to_dict(self) -> dict:
        return {
            "text": self.text,
            "finish_reason": self.finish_reason,
            "latency_ms": self.latency_ms,
            "retry_count": self.retry_count,
        }


@dataclass(frozen=True)
class BackendSpec:
    endpoint_url: str
    auth_token_env: Optional[str] = None
    max_concurrent: int = 4
    requests_per_minute: int = 600
    max_retries: int = 3
    backoff_base_ms: int = 500
    timeout_s: float = 120.0

    def __post_init__(self):
        if self.max_concurrent < 1:
            raise ValidationError("max_concurrent must be at least 1")
        if self.requests_per_minute < 1:
            raise ValidationError("requests_per_minute must be positive")
        if self.max_retries < 0:
            raise ValidationError("max_retries must be non-negative")
        if self.backoff_base_ms <= 0:
            raise ValidationError("backoff_base_ms must be positive")


class Backend(Protocol):
    def complete(self, request: CompletionRequest) -> CompletionResponse: ...


def cache_key(request: CompletionRequest) -> str:
    """SHA-256 over the canonical request; images contribute the digest of their bytes."""
    messages = []
    for m in request.messages:
        parts = []
        for p in m.parts:
            if isinstance(p, TextPart):
                parts.append(["text", p.text])
            else:
                parts.append(["image", p.label, p.media_type, hashlib.sha256(p.data).hexdigest()])
        messages.append([m.role, parts])
    canonical = {
        "model_id": request.model_id,
        "messages": messages,
        "temperature": float(request.temperature),
        "max_tokens": request.max_tokens,
        "seed": request.seed,
    }
    blob = json.dumps(canonical, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()
