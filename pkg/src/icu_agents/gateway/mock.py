"""Scripted backends with the same ``complete`` signature as the HTTP client."""

from __future__ import annotations

import json
import math
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

from ..core import ValidationError
from ..ingest import ABNORMAL_LIMITS, RiskFeatures, synthetic_risk
from .models import CompletionRequest, CompletionResponse

Responder = Union[str, Sequence[str], Callable[[CompletionRequest], str]]


@dataclass
class MockRule:
    """Fires when every ``contains`` substring (and ``regex``, if set) occurs in the request text.

    ``scope="last"`` restricts matching to the final message. ``respond`` may be
    a string, a callable, or a list consumed in order (the last item repeats
    once the list is exhausted).
    """

    respond: Responder
    contains: Sequence[str] = ()
    regex: Optional[str] = None
    scope: str = "all"
    _cursor: int = field(default=0, repr=False)

    def __post_init__(self):
        if isinstance(self.contains, str):
            self.contains = (self.contains,)
        self._pattern = re.compile(self.regex, re.S) if self.regex else None

    def matches(self, text: str) -> bool:
        if not all(c in text for c in self.contains):
            return False
        return self._pattern is None or self._pattern.search(text) is not None

    def answer(self, request: CompletionRequest) -> str:
        if callable(self.respond):
            return self.respond(request)
        if isinstance(self.respond, str):
            return self.respond
        seq = list(self.respond)
        text = seq[min(self._cursor, len(seq) - 1)]
        self._cursor += 1
        return text


@dataclass
class MockScript:
    rules: list[MockRule] = field(default_factory=list)
    default: str = "PROBABILITY: 0.5"

    def respond(self, request: CompletionRequest) -> str:
        full, last = request.text, request.messages[-1].text_content
        for rule in self.rules:
            if rule.matches(last if rule.scope == "last" else full):
                return rule.answer(request)
        return self.default

    @classmethod
    def from_dict(cls, data: dict) -> "MockScript":
        if "default" not in data:
            raise ValidationError("mock script needs a default response")
        rules = []
        for raw in data.get("rules", []):
            contains = raw.get("contains", ())
            rules.append(MockRule(respond=raw["respond"], contains=contains, regex=raw.get("regex"),
                                  scope=raw.get("scope", "all")))
        return cls(rules, data["default"])


class MockBackend:
    """Deterministic scripted backend; counts calls and tracks peak concurrency."""

    def __init__(self, script: Union[MockScript, Callable[[CompletionRequest], str], str],
                 delay_s: float = 0.0):
        if isinstance(script, str):
            script = MockScript(default=script)
        self._respond = script.respond if isinstance(script, MockScript) else script
        self.delay_s = delay_s
        self.calls = 0
        self.requests: list[CompletionRequest] = []
        self.in_flight = 0
        self.peak_in_flight = 0
        self._lock = threading.Lock()

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        with self._lock:
            self.calls += 1
            self.requests.append(request)
            self.in_flight += 1
            self.peak_in_flight = max(self.peak_in_flight, self.in_flight)
        try:
            if self.delay_s:
                time.sleep(self.delay_s)
            with self._lock:
                text = self._respond(request)
        finally:
            with self._lock:
                self.in_flight -= 1
        return CompletionResponse(text=text, finish_reason="stop", latency_ms=0)


# features missing from a prompt are replaced with generator population means
_FEATURE_MEANS = RiskFeatures(age=56, n_comorbidities=1.5, n_abnormal_vitals=1.2, severe_imaging=0.3)
_TASK_RE = re.compile(r"\[task:([^\]]+)\]")
_EHR_LINE = re.compile(r"^\[T0\+\d+m\] ([a-z_]+)=(\S+)$", re.M)


def _field(text: str, name: str) -> Optional[str]:
    # last occurrence: few-shot exemplars precede the patient being assessed
    found = re.findall(rf"^{re.escape(name)}: (\S+)", text, re.M)
    return found[-1] if found else None


def recover_risk(text: str) -> Optional[float]:
    """Recompute the synthetic hidden risk from the features a prompt exposes."""
    m = _TASK_RE.search(text)
    if not m:
        return None
    task_id = m.group(1)
    age = _field(text, "Age")
    if age is not None:
        features = RiskFeatures(
            age=int(age),
            n_comorbidities=int(_field(text, "Comorbidity count") or 0),
            n_abnormal_vitals=int(_field(text, "Abnormal vital count") or 0),
            severe_imaging=_field(text, "Severe imaging") == "yes",
        )
        return synthetic_risk(features, task_id)
    n_abn: float = _FEATURE_MEANS.n_abnormal_vitals
    severe: float = _FEATURE_MEANS.severe_imaging
    ehr = _EHR_LINE.findall(text)
    if ehr:
        flagged = {var for var, value in ehr
                   if var in ABNORMAL_LIMITS and ABNORMAL_LIMITS[var](float(value))}
        n_abn = len(flagged)
    if "--- REPORT" in text:
        severe = 1.0 if "severe acute abnormality" in text else 0.0
    features = RiskFeatures(_FEATURE_MEANS.age, _FEATURE_MEANS.n_comorbidities, n_abn, severe)
    return synthetic_risk(features, task_id)


class SyntheticOracleBackend(MockBackend):
    """Answers every prediction prompt with the hidden risk of a synthetic encounter.

    Meta-agent routing prompts get ``DECISION: PREDICT``; EHR chunk workers get a
    plain memory note.
    """

    def __init__(self, delay_s: float = 0.0):
        super().__init__(self._answer, delay_s=delay_s)

    @staticmethod
    def _answer(request: CompletionRequest) -> str:
        last = request.messages[-1].text_content
        if "DECISION: PREDICT" in last and "CONSULT:" in last:
            return "DECISION: PREDICT"
        if "EHR MEMORY TASK" in last:
            flagged = sorted({var for var, value in _EHR_LINE.findall(last)
                              if var in ABNORMAL_LIMITS and ABNORMAL_LIMITS[var](float(value))})
            return "Abnormal variables in this window: " + (", ".join(flagged) or "none")
        risk = recover_risk(request.text)
        if risk is None or math.isnan(risk):
            return "Unable to assess.\nPROBABILITY: 0.5"
        return f"Assessment from recorded risk features.\nPROBABILITY: {risk!r}"


def load_mock_backend(path) -> MockBackend:
    """Build a mock from a JSON script file.

    ``{"oracle": "synthetic"}`` selects the synthetic-risk oracle; otherwise the
    file holds ``{"default": ..., "rules": [{"contains": [...], "regex": ..., "respond": ...}]}``.
    """
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if data.get("oracle") == "synthetic":
        return SyntheticOracleBackend()
    return MockBackend(MockScript.from_dict(data))
