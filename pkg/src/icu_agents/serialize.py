"""Render modalities as prompt text and assemble multi-part prompt contexts."""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass
from itertools import groupby
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

from .core import (
    VARIABLE_ORDER,
    EhrEvent,
    HarnessError,
    ModalityKind,
    PatientEncounter,
    RrDoc,
    is_continuous,
    ordered,
)
from .ingest import read_image_bytes

NO_EHR = "NO EHR OBSERVATIONS"
NO_RR = "NO RADIOLOGY REPORTS"
MAX_STEPS = 500
HEAD_STEPS = 100
TAIL_STEPS = 400


class MissingBaseModality(HarnessError):
    pass


class SerializationMode(str, enum.Enum):
    LOG = "log"
    SUMMARY = "summary"
    DELTA = "delta"


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    label: str
    data: bytes
    media_type: str = "image/png"


Part = Union[TextPart, ImagePart]


@dataclass(frozen=True)
class PromptContext:
    parts: tuple[Part, ...]
    task_prompt_id: str = "task"

    @property
    def text(self) -> str:
        return "\n\n".join(p.text if isinstance(p, TextPart) else p.label for p in self.parts)


def format_value(value) -> str:
    """Numbers get at most two decimals with trailing zeros trimmed; text passes through."""
    if isinstance(value, str):
        return value
    text = f"{value:.2f}".rstrip("0").rstrip(".")
    return "0" if text == "-0" else text


def _chronological(events: Sequence[EhrEvent]) -> list[EhrEvent]:
    return sorted(events, key=lambda e: (e.t_offset_min, e.variable))


def time_steps(events: Sequence[EhrEvent]) -> list[list[EhrEvent]]:
    """Group events by distinct time offset, in time order."""
    return [list(g) for _, g in groupby(_chronological(events), key=lambda e: e.t_offset_min)]


def _event_line(e: EhrEvent) -> str:
    return f"[T0+{e.t_offset_min}m] {e.variable}={format_value(e.value)}"


def serialize_ehr_log(events: Sequence[EhrEvent]) -> str:
    if not events:
        return NO_EHR
    steps = time_steps(events)
    if len(steps) > MAX_STEPS:
        skipped = len(steps) - HEAD_STEPS - TAIL_STEPS
        head = [_event_line(e) for step in steps[:HEAD_STEPS] for e in step]
        tail = [_event_line(e) for step in steps[-TAIL_STEPS:] for e in step]
        return "\n".join(head + [f"... [{skipped} time-steps omitted] ..."] + tail)
    return "\n".join(_event_line(e) for step in steps for e in step)


def _by_variable(events: Sequence[EhrEvent]) -> list[tuple[str, list]]:
    values: dict[str, list] = {}
    for e in _chronological(events):
        values.setdefault(e.variable, []).append(e.value)
    return sorted(values.items(), key=lambda kv: VARIABLE_ORDER[kv[0]])


def _mode(values: list) -> str:
    counts = Counter(values)
    best = max(counts.values())
    return next(v for v in values if counts[v] == best)


def serialize_ehr_summary(events: Sequence[EhrEvent]) -> str:
    if not events:
        return NO_EHR
    lines = []
    for var, vals in _by_variable(events):
        if is_continuous(var):
            mean = sum(vals) / len(vals)
            lines.append(
                f"{var}: min={format_value(min(vals))} max={format_value(max(vals))} "
                f"mean={format_value(mean)} first={format_value(vals[0])} last={format_value(vals[-1])}"
            )
        else:
            lines.append(f"{var}: first={vals[0]} last={vals[-1]} mode={_mode(vals)}")
    return "\n".join(lines)


def serialize_ehr_delta(events: Sequence[EhrEvent]) -> str:
    if not events:
        return NO_EHR
    lines = []
    for var, vals in _by_variable(events):
        first, last = vals[0], vals[-1]
        if is_continuous(var):
            lines.append(f"{var}: {format_value(first)} -> {format_value(last)} (Δ={format_value(last - first)})")
        else:
            lines.append(f"{var}: {first} -> {last}")
    return "\n".join(lines)


SERIALIZERS: dict[SerializationMode, Callable[[Sequence[EhrEvent]], str]] = {
    SerializationMode.LOG: serialize_ehr_log,
    SerializationMode.SUMMARY: serialize_ehr_summary,
    SerializationMode.DELTA: serialize_ehr_delta,
}


def serialize_ehr(events: Sequence[EhrEvent], mode=SerializationMode.LOG) -> str:
    return SERIALIZERS[SerializationMode(mode)](events)


def concat_rr(rr_docs: Sequence[RrDoc]) -> str:
    if not rr_docs:
        return NO_RR
    docs = sorted(rr_docs, key=lambda d: d.t_offset_min)
    return "\n".join(f"--- REPORT ({d.modality_name}, T0+{d.t_offset_min}m) ---\n{d.body}" for d in docs)


def modality_part(encounter: PatientEncounter, modality: ModalityKind, mode=SerializationMode.LOG,
                  image_loader: Optional[Callable[[str], tuple[bytes, str]]] = None) -> Optional[Part]:
    """One labeled part for ``modality``, or None when the encounter lacks it."""
    if modality is ModalityKind.PS:
        return TextPart(f"Modality PS: {encounter.ps_text}")
    if modality is ModalityKind.EHR:
        if not encounter.ehr_events:
            return None
        return TextPart(f"Modality EHR: {serialize_ehr(encounter.ehr_events, mode)}")
    if modality is ModalityKind.RR:
        if not encounter.rr_docs:
            return None
        return TextPart(f"Modality RR: {concat_rr(encounter.rr_docs)}")
    cxr = encounter.cxr
    if cxr is None:
        return None
    data, media = (image_loader or read_image_bytes)(cxr.image_locator)
    label = f"Modality CXR: chest X-ray ({cxr.view} view, acquired T0+{cxr.t_offset_min}m) attached as an image."
    return ImagePart(label, data, media)


def assemble_context(task_prompt: str, encounter: PatientEncounter, modalities, mode=SerializationMode.LOG,
                     *, require_base: bool = True, task_prompt_id: str = "task",
                     image_loader=None) -> PromptContext:
    """Task prompt followed by one part per requested, present modality (PS, EHR, CXR, RR order).

    ``require_base=False`` is for single-modality specialist agents that never see PS.
    """
    if require_base and ModalityKind.PS not in modalities:
        raise MissingBaseModality("the patient summary (PS) must be included")
    parts: list[Part] = [TextPart(task_prompt)]
    for m in ordered(modalities):
        part = modality_part(encounter, m, mode, image_loader)
        if part is not None:
            parts.append(part)
    return PromptContext(tuple(parts), task_prompt_id)


def file_image_loader(base_dir) -> Callable[[str], tuple[bytes, str]]:
    base = Path(base_dir)
    return lambda locator: read_image_bytes(locator, base)
