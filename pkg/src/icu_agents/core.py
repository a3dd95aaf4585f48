"""Shared domain types for the ICU agent benchmark harness."""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional, Union

Value = Union[str, float]


class HarnessError(Exception):
    """Base class for all harness errors."""


class ValidationError(HarnessError, ValueError):
    pass


CATEGORICAL_VARIABLES = (
    "capillary refill rate",
    "Glasgow coma scale eye opening",
    "Glasgow coma scale motor response",
    "Glasgow coma scale verbal response",
    "Glasgow coma scale total",
)

CONTINUOUS_VARIABLES = (
    "diastolic blood pressure",
    "fraction of inspired oxygen",
    "glucose",
    "heart rate",
    "height",
    "mean blood pressure",
    "oxygen saturation",
    "respiratory rate",
    "systolic blood pressure",
    "temperature",
    "weight",
    "pH",
)


def variable_key(name: str) -> str:
    """Normalize a display name (or an existing key) to lowercase snake_case."""
    return re.sub(r"[^a-z0-9]+", "_", name.strip().lower()).strip("_")


def canonical_variables() -> list[str]:
    """The 17 EHR variables in display spelling: 5 categorical, then 12 continuous."""
    return list(CATEGORICAL_VARIABLES + CONTINUOUS_VARIABLES)


VARIABLE_KEYS: tuple[str, ...] = tuple(variable_key(v) for v in canonical_variables())
CATEGORICAL_KEYS = frozenset(variable_key(v) for v in CATEGORICAL_VARIABLES)
CONTINUOUS_KEYS = frozenset(variable_key(v) for v in CONTINUOUS_VARIABLES)
VARIABLE_ORDER = {k: i for i, k in enumerate(VARIABLE_KEYS)}
DISPLAY_NAMES = dict(zip(VARIABLE_KEYS, canonical_variables()))


def is_continuous(key: str) -> bool:
    return key in CONTINUOUS_KEYS


def decide(probability: float, threshold: float = 0.5) -> bool:
    """Binary prediction: true iff ``probability`` strictly exceeds ``threshold``."""
    return probability > threshold


class ModalityKind(str, enum.Enum):
    PS = "PS"
    EHR = "EHR"
    CXR = "CXR"
    RR = "RR"

    @classmethod
    def parse(cls, text: str) -> "ModalityKind":
        try:
            return cls(text.strip().upper())
        except ValueError:
            raise ValidationError(f"unknown modality {text!r}") from None


BASE_MODALITY = ModalityKind.PS
MODALITY_ORDER = (ModalityKind.PS, ModalityKind.EHR, ModalityKind.CXR, ModalityKind.RR)


def parse_modalities(spec: Union[str, Any]) -> frozenset[ModalityKind]:
    """Parse ``"ps,ehr,cxr"`` (or an iterable of names/kinds) into a modality set."""
    if isinstance(spec, str):
        items = [s for s in spec.split(",") if s.strip()]
    else:
        items = list(spec)
    return frozenset(m if isinstance(m, ModalityKind) else ModalityKind.parse(m) for m in items)


def ordered(modalities) -> list[ModalityKind]:
    return [m for m in MODALITY_ORDER if m in modalities]


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    name: str
    positive_meaning: str
    observation_window_hours: int = 48
    decision_threshold: float = 0.5

    def __post_init__(self):
        if self.observation_window_hours <= 0:
            raise ValidationError("observation_window_hours must be positive")
        if not 0 < self.decision_threshold < 1:
            raise ValidationError("decision_threshold must lie strictly between 0 and 1")

    @property
    def window_minutes(self) -> int:
        return self.observation_window_hours * 60


MORTALITY = TaskSpec("mortality", "In-hospital mortality", "in-hospital death")
LENGTH_OF_STAY = TaskSpec("los", "Length of stay", "an ICU stay extending beyond 7 days")
BUILTIN_TASKS = {t.task_id: t for t in (MORTALITY, LENGTH_OF_STAY)}


@dataclass(frozen=True)
class EhrEvent:
    t_offset_min: int
    variable: str
    value: Value

    def __post_init__(self):
        if self.t_offset_min < 0:
            raise ValidationError(f"negative time offset {self.t_offset_min}")
        key = variable_key(self.variable)
        if key not in VARIABLE_ORDER:
            raise ValidationError(f"unknown EHR variable {self.variable!r}")
        object.__setattr__(self, "variable", key)
        if key in CONTINUOUS_KEYS:
            try:
                value = float(self.value)
            except (TypeError, ValueError):
                raise ValidationError(f"{key} expects a number, got {self.value!r}") from None
        else:
            value = self.value if isinstance(self.value, str) else _plain_number(self.value)
        object.__setattr__(self, "value", value)

    def sort_key(self):
        return (self.t_offset_min, self.variable)

    def to_wire(self) -> list:
        return [self.t_offset_min, self.variable, self.value]


def _plain_number(value: Any) -> str:
    if isinstance(value, float) and value.is_integer():
        return str(int(value))
    return str(value)


@dataclass(frozen=True)
class CxrRef:
    image_locator: str
    view: str
    t_offset_min: int
    width_px: int = 224
    height_px: int = 224

    def __post_init__(self):
        if self.t_offset_min < 0:
            raise ValidationError("negative CXR time offset")
        if self.width_px <= 0 or self.height_px <= 0:
            raise ValidationError("image dimensions must be positive")

    @property
    def is_ap(self) -> bool:
        return self.view.strip().upper() == "AP"

    def to_wire(self) -> dict:
        return {
            "image_locator": self.image_locator,
            "view": self.view,
            "t_offset_min": self.t_offset_min,
            "width_px": self.width_px,
            "height_px": self.height_px,
        }


@dataclass(frozen=True)
class RrDoc:
    t_offset_min: int
    modality_name: str
    body: str

    def __post_init__(self):
        if self.t_offset_min < 0:
            raise ValidationError("negative report time offset")

    def to_wire(self) -> dict:
        return {"t_offset_min": self.t_offset_min, "modality_name": self.modality_name, "body": self.body}


SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class PatientEncounter:
    """One ICU stay.

    ``cxr`` is the paired scan. ``cxr_candidates`` holds unpaired scans loaded
    from a cohort file; pairing collapses them into ``cxr``.
    """

    encounter_id: str
    ps_text: str
    ehr_events: tuple[EhrEvent, ...] = ()
    cxr: Optional[CxrRef] = None
    rr_docs: tuple[RrDoc, ...] = ()
    labels: Mapping[str, bool] = field(default_factory=dict)
    split: Optional[str] = None
    cxr_candidates: tuple[CxrRef, ...] = ()

    def __post_init__(self):
        if not self.ps_text or not self.ps_text.strip():
            raise ValidationError(f"encounter {self.encounter_id} has no patient summary")
        if self.split is not None and self.split not in SPLITS:
            raise ValidationError(f"bad split {self.split!r}")
        object.__setattr__(self, "ehr_events", tuple(sorted(self.ehr_events, key=EhrEvent.sort_key)))
        object.__setattr__(self, "rr_docs", tuple(self.rr_docs))
        object.__setattr__(self, "cxr_candidates", tuple(self.cxr_candidates))
        object.__setattr__(self, "labels", {k: bool(v) for k, v in dict(self.labels).items()})

    def available_modalities(self) -> frozenset[ModalityKind]:
        present = {ModalityKind.PS}
        if self.ehr_events:
            present.add(ModalityKind.EHR)
        if self.cxr is not None:
            present.add(ModalityKind.CXR)
        if self.rr_docs:
            present.add(ModalityKind.RR)
        return frozenset(present)

    def to_wire(self) -> dict:
        if self.cxr_candidates:
            cxr: Any = [c.to_wire() for c in self.cxr_candidates]
        else:
            cxr = self.cxr.to_wire() if self.cxr else None
        out = {
            "encounter_id": self.encounter_id,
            "ps_text": self.ps_text,
            "ehr_events": [e.to_wire() for e in self.ehr_events],
            "cxr": cxr,
            "rr_docs": [d.to_wire() for d in self.rr_docs],
            "labels": {k: int(v) for k, v in sorted(self.labels.items())},
        }
        if self.split is not None:
            out["split"] = self.split
        return out


PARSE_STATUSES = ("ok", "fallback", "error")


@dataclass(frozen=True)
class Exchange:
    """One agent call (or skipped call) inside a protocol run."""

    agent_id: str
    step: str
    prompt_digest: str = ""
    response_text: str = ""
    probability: Optional[float] = None
    parse_status: Optional[str] = None
    retry_count: int = 0
    round: Optional[int] = None
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "agent_id": self.agent_id,
            "step": self.step,
            "prompt_digest": self.prompt_digest,
            "response_text": self.response_text,
            "probability": self.probability,
            "parse_status": self.parse_status,
            "retry_count": self.retry_count,
            "round": self.round,
            "note": self.note,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Exchange":
        return cls(**d)


@dataclass(frozen=True)
class PredictionRecord:
    encounter_id: str
    task_id: str
    protocol_id: str
    probability: float
    predicted_label: bool
    parse_status: str
    trace: tuple[Exchange, ...] = ()
    extra: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.parse_status not in PARSE_STATUSES:
            raise ValidationError(f"bad parse status {self.parse_status!r}")
        if not 0.0 <= self.probability <= 1.0:
            raise ValidationError(f"probability {self.probability} outside [0, 1]")
        object.__setattr__(self, "trace", tuple(self.trace))

    @classmethod
    def build(cls, encounter_id: str, task: TaskSpec, protocol_id: str, probability: float,
              parse_status: str, trace=(), extra=None) -> "PredictionRecord":
        return cls(
            encounter_id=encounter_id,
            task_id=task.task_id,
            protocol_id=protocol_id,
            probability=probability,
            predicted_label=decide(probability, task.decision_threshold) if parse_status != "error" else False,
            parse_status=parse_status,
            trace=tuple(trace),
            extra=dict(extra or {}),
        )

    def to_dict(self) -> dict:
        return {
            "encounter_id": self.encounter_id,
            "task_id": self.task_id,
            "protocol_id": self.protocol_id,
            "probability": self.probability,
            "predicted_label": self.predicted_label,
            "parse_status": self.parse_status,
            "trace": [x.to_dict() for x in self.trace],
            "extra": dict(self.extra),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PredictionRecord":
        return cls(
            encounter_id=d["encounter_id"],
            task_id=d["task_id"],
            protocol_id=d["protocol_id"],
            probability=d["probability"],
            predicted_label=d["predicted_label"],
            parse_status=d["parse_status"],
            trace=tuple(Exchange.from_dict(x) for x in d.get("trace", ())),
            extra=d.get("extra", {}),
        )
