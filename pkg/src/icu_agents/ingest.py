"""Cohort loading, window/pairing rules, deterministic splits and synthetic cohorts.

Cohort files are JSON Lines, one encounter per line::

    {"encounter_id": "E1", "ps_text": "...",
     "ehr_events": [[60, "heart_rate", 88.0], ...],
     "cxr": {"image_locator": "img/E1.png", "view": "AP", "t_offset_min": 600,
             "width_px": 224, "height_px": 224},
     "rr_docs": [{"t_offset_min": 120, "modality_name": "CT", "body": "..."}],
     "labels": {"mortality": 0, "los": 1},
     "split": "test"}

``cxr`` may also be a list of candidate scans; ``apply_window_and_pairing``
selects one of them. ``split`` is optional.
"""

from __future__ import annotations

import base64
import json
import logging
import math
import random
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .core import (
    CxrRef,
    EhrEvent,
    HarnessError,
    PatientEncounter,
    RrDoc,
    TaskSpec,
    ValidationError,
)

log = logging.getLogger(__name__)


class SchemaError(HarnessError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class DuplicateEncounter(HarnessError):
    def __init__(self, encounter_id: str):
        super().__init__(f"duplicate encounter_id {encounter_id!r}")
        self.encounter_id = encounter_id


class MissingPS(HarnessError):
    def __init__(self, encounter_id: str):
        super().__init__(f"encounter {encounter_id!r} has no patient summary")
        self.encounter_id = encounter_id


class EmptyCohort(HarnessError):
    pass


@dataclass(frozen=True)
class Cohort:
    encounters: tuple[PatientEncounter, ...]
    provenance: str = ""

    def __post_init__(self):
        object.__setattr__(self, "encounters", tuple(self.encounters))
        seen = set()
        for enc in self.encounters:
            if enc.encounter_id in seen:
                raise DuplicateEncounter(enc.encounter_id)
            seen.add(enc.encounter_id)

    def __len__(self):
        return len(self.encounters)

    def __iter__(self):
        return iter(self.encounters)

    def by_id(self) -> dict[str, PatientEncounter]:
        return {e.encounter_id: e for e in self.encounters}

    def with_split(self, split: str) -> "Cohort":
        return Cohort(tuple(e for e in self.encounters if e.split == split), self.provenance)


@dataclass(frozen=True)
class SyntheticOracle:
    """Hidden per-task risk for every encounter of a synthetic cohort."""

    true_risk: Mapping[str, Mapping[str, float]] = field(default_factory=dict)

    def risk(self, encounter_id: str, task_id: str) -> float:
        return self.true_risk[encounter_id][task_id]


# ---------------------------------------------------------------- loading


def dedupe_events(events: Iterable[EhrEvent], encounter_id: str = "") -> tuple[EhrEvent, ...]:
    """Keep the last occurrence of each (t_offset_min, variable) pair."""
    latest: dict[tuple[int, str], EhrEvent] = {}
    for ev in events:
        key = (ev.t_offset_min, ev.variable)
        if key in latest:
            log.warning("encounter %s: duplicate EHR event %s at %dm, keeping last",
                        encounter_id, ev.variable, ev.t_offset_min)
        latest[key] = ev
    return tuple(sorted(latest.values(), key=EhrEvent.sort_key))


def _require(obj: dict, name: str, kind, line: int):
    if name not in obj:
        raise SchemaError(line, f"missing field {name!r}")
    value = obj[name]
    if not isinstance(value, kind):
        raise SchemaError(line, f"field {name!r} has wrong type {type(value).__name__}")
    return value


def _int_field(obj: dict, name: str, line: int) -> int:
    value = obj.get(name)
    if isinstance(value, bool) or not isinstance(value, int):
        raise SchemaError(line, f"field {name!r} must be an integer")
    return value


def _parse_cxr(obj, line: int) -> CxrRef:
    if not isinstance(obj, dict):
        raise SchemaError(line, "cxr entries must be objects")
    try:
        return CxrRef(
            image_locator=_require(obj, "image_locator", str, line),
            view=_require(obj, "view", str, line),
            t_offset_min=_int_field(obj, "t_offset_min", line),
            width_px=_int_field(obj, "width_px", line) if "width_px" in obj else 224,
            height_px=_int_field(obj, "height_px", line) if "height_px" in obj else 224,
        )
    except ValidationError as exc:
        raise SchemaError(line, str(exc)) from None


def parse_record(obj: dict, line: int = 0) -> PatientEncounter:
    """Validate one decoded interchange record."""
    if not isinstance(obj, dict):
        raise SchemaError(line, "record must be an object")
    eid = _require(obj, "encounter_id", str, line)
    ps_text = obj.get("ps_text")
    if ps_text is None or (isinstance(ps_text, str) and not ps_text.strip()):
        raise MissingPS(eid)
    if not isinstance(ps_text, str):
        raise SchemaError(line, "ps_text must be a string")

    events = []
    for raw in obj.get("ehr_events", []) or []:
        if not isinstance(raw, list) or len(raw) != 3:
            raise SchemaError(line, f"EHR event must be [t_offset_min, variable, value], got {raw!r}")
        t, var, value = raw
        if isinstance(t, bool) or not isinstance(t, int) or not isinstance(var, str):
            raise SchemaError(line, f"malformed EHR event {raw!r}")
        if isinstance(value, bool) or not isinstance(value, (str, int, float)):
            raise SchemaError(line, f"malformed EHR value {raw!r}")
        try:
            events.append(EhrEvent(t, var, value))
        except ValidationError as exc:
            raise SchemaError(line, str(exc)) from None

    raw_cxr = obj.get("cxr")
    cxr, candidates = None, ()
    if isinstance(raw_cxr, list):
        candidates = tuple(_parse_cxr(c, line) for c in raw_cxr)
    elif raw_cxr is not None:
        cxr = _parse_cxr(raw_cxr, line)

    docs = []
    for raw in obj.get("rr_docs", []) or []:
        if not isinstance(raw, dict):
            raise SchemaError(line, "rr_docs entries must be objects")
        try:
            docs.append(RrDoc(_int_field(raw, "t_offset_min", line),
                              _require(raw, "modality_name", str, line),
                              _require(raw, "body", str, line)))
        except ValidationError as exc:
            raise SchemaError(line, str(exc)) from None

    labels = obj.get("labels", {})
    if not isinstance(labels, dict):
        raise SchemaError(line, "labels must be an object")
    for k, v in labels.items():
        if v not in (0, 1) or isinstance(v, float):
            raise SchemaError(line, f"label {k!r} must be 0 or 1")

    split = obj.get("split")
    try:
        return PatientEncounter(
            encounter_id=eid,
            ps_text=ps_text,
            ehr_events=dedupe_events(events, eid),
            cxr=cxr,
            rr_docs=tuple(docs),
            labels={k: bool(v) for k, v in labels.items()},
            split=split,
            cxr_candidates=candidates,
        )
    except ValidationError as exc:
        raise SchemaError(line, str(exc)) from None


def load_cohort(path) -> Cohort:
    path = Path(path)
    encounters = []
    seen = set()
    with path.open(encoding="utf-8") as fh:
        for lineno, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            try:
                obj = json.loads(text)
            except json.JSONDecodeError as exc:
                raise SchemaError(lineno, f"invalid JSON: {exc.msg}") from None
            enc = parse_record(obj, lineno)
            if enc.encounter_id in seen:
                raise DuplicateEncounter(enc.encounter_id)
            seen.add(enc.encounter_id)
            encounters.append(enc)
    return Cohort(tuple(encounters), provenance=str(path))


def dumps_cohort(cohort: Cohort) -> str:
    return "".join(
        json.dumps(e.to_wire(), ensure_ascii=False, sort_keys=True) + "\n" for e in cohort.encounters
    )


def write_cohort(cohort: Cohort, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_cohort(cohort), encoding="utf-8")
    return path


def read_image_bytes(locator: str, base_dir: Optional[Path] = None) -> tuple[bytes, str]:
    """Resolve an image locator to ``(bytes, media_type)``; supports ``data:`` URIs."""
    if locator.startswith("data:"):
        header, _, payload = locator.partition(",")
        media = header[5:].split(";")[0] or "application/octet-stream"
        return base64.b64decode(payload), media
    path = Path(locator)
    if not path.is_absolute() and base_dir is not None:
        path = base_dir / path
    suffix = path.suffix.lower()
    media = {".png": "image/png", ".jpg": "image/jpeg", ".jpeg": "image/jpeg"}.get(
        suffix, "application/octet-stream")
    return path.read_bytes(), media


# ---------------------------------------------------------------- pairing


def pair_encounter(enc: PatientEncounter, task: TaskSpec) -> PatientEncounter:
    limit = task.window_minutes
    events = tuple(e for e in enc.ehr_events if e.t_offset_min <= limit)
    docs = sorted((d for d in enc.rr_docs if d.t_offset_min <= limit), key=lambda d: d.t_offset_min)
    candidates = enc.cxr_candidates or ((enc.cxr,) if enc.cxr else ())
    valid = [c for c in candidates if c.is_ap and c.t_offset_min <= limit]
    # latest AP scan wins; list order breaks equal-time ties (last listed)
    chosen = max(enumerate(valid), key=lambda ic: (ic[1].t_offset_min, ic[0]))[1] if valid else None
    return replace(enc, ehr_events=events, rr_docs=tuple(docs), cxr=chosen, cxr_candidates=())


def apply_window_and_pairing(cohort: Cohort, task: TaskSpec) -> Cohort:
    return Cohort(tuple(pair_encounter(e, task) for e in cohort.encounters), cohort.provenance)


# ---------------------------------------------------------------- splits


def split_sizes(n: int, ratios: Sequence[float]) -> list[int]:
    sizes = [math.floor(n * r + 1e-9) for r in ratios]
    remainder = n - sum(sizes)
    for i in range(remainder):
        sizes[i % len(sizes)] += 1
    return sizes


def split_cohort(cohort: Cohort, ratios=(0.70, 0.10, 0.20), seed: int = 0):
    """Shuffle encounter ids with a seeded PRNG and slice into train/val/test."""
    if len(cohort) == 0:
        raise EmptyCohort("cannot split an empty cohort")
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValidationError(f"split ratios must be three non-negative numbers summing to 1: {ratios}")
    ids = sorted(e.encounter_id for e in cohort.encounters)
    random.Random(seed).shuffle(ids)
    n_train, n_val, _ = split_sizes(len(ids), ratios)
    assignment = {}
    for i, eid in enumerate(ids):
        assignment[eid] = "train" if i < n_train else "val" if i < n_train + n_val else "test"
    parts = {name: [] for name in ("train", "val", "test")}
    for enc in cohort.encounters:
        name = assignment[enc.encounter_id]
        parts[name].append(replace(enc, split=name))
    return tuple(Cohort(tuple(parts[name]), cohort.provenance) for name in ("train", "val", "test"))


def ensure_split(cohort: Cohort, seed: int = 0, ratios=(0.70, 0.10, 0.20)):
    """Use split fields from the file when every encounter has one; otherwise split by seed."""
    if cohort.encounters and all(e.split for e in cohort.encounters):
        return tuple(cohort.with_split(s) for s in ("train", "val", "test"))
    return split_cohort(cohort, ratios, seed)


# ---------------------------------------------------------------- synthetic cohorts

COMORBIDITIES = (
    "congestive heart failure",
    "chronic kidney disease",
    "chronic obstructive pulmonary disease",
    "diabetes mellitus",
    "cirrhosis",
    "metastatic cancer",
)

# (variable, normal sampler range, abnormal sampler range)
VITALS = (
    ("heart_rate", (65.0, 95.0), (125.0, 160.0)),
    ("systolic_blood_pressure", (105.0, 140.0), (70.0, 85.0)),
    ("respiratory_rate", (12.0, 20.0), (28.0, 38.0)),
    ("oxygen_saturation", (94.0, 99.0), (80.0, 88.0)),
    ("temperature", (36.5, 37.5), (39.0, 40.2)),
    ("ph", (7.36, 7.44), (7.05, 7.2)),
)

ABNORMAL_LIMITS = {
    "heart_rate": lambda v: v > 120,
    "systolic_blood_pressure": lambda v: v < 90,
    "respiratory_rate": lambda v: v > 25,
    "oxygen_saturation": lambda v: v < 90,
    "temperature": lambda v: v > 38.5,
    "ph": lambda v: v < 7.25,
}

# per-task logistic weights over (intercept, age decades past 65, comorbidities, abnormal vitals, severe imaging)
RISK_WEIGHTS = {
    "mortality": (-2.6, 0.45, 0.35, 0.55, 0.9),
    "los": (-1.4, 0.1, 0.2, 0.45, 0.6),
}
DEFAULT_WEIGHTS = (-1.8, 0.3, 0.3, 0.5, 0.7)


@dataclass(frozen=True)
class RiskFeatures:
    age: int
    n_comorbidities: int
    n_abnormal_vitals: int
    severe_imaging: bool


def synthetic_risk(features: RiskFeatures, task_id: str) -> float:
    b, w_age, w_com, w_abn, w_sev = RISK_WEIGHTS.get(task_id, DEFAULT_WEIGHTS)
    z = (b + w_age * (features.age - 65) / 10.0 + w_com * features.n_comorbidities
         + w_abn * features.n_abnormal_vitals + w_sev * float(features.severe_imaging))
    return 1.0 / (1.0 + math.exp(-z))


def render_ps(eid: str, f: RiskFeatures, comorbidities: Sequence[str], sex: str) -> str:
    history = ", ".join(comorbidities) if comorbidities else "no significant past medical history"
    imaging = "severe findings" if f.severe_imaging else "no acute findings"
    return (
        f"Patient {eid}. {f.age}-year-old {sex} admitted to the ICU.\n"
        f"Age: {f.age}\n"
        f"Past medical history: {history}.\n"
        f"Comorbidity count: {f.n_comorbidities}\n"
        f"Triage note: {f.n_abnormal_vitals} abnormal vital sign(s) flagged on arrival.\n"
        f"Abnormal vital count: {f.n_abnormal_vitals}\n"
        f"Referral imaging impression: {imaging}.\n"
        f"Severe imaging: {'yes' if f.severe_imaging else 'no'}"
    )


def _tiny_png(shade: int, size: int = 8) -> bytes:
    raw = b"".join(b"\x00" + bytes([shade]) * size for _ in range(size))

    def chunk(tag, data):
        body = tag + data
        return struct.pack(">I", len(data)) + body + struct.pack(">I", zlib.crc32(body) & 0xFFFFFFFF)

    header = struct.pack(">IIBBBBB", size, size, 8, 0, 0, 0, 0)
    return b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", header) + chunk(b"IDAT", zlib.compress(raw, 9)) + chunk(b"IEND", b"")


def generate_synthetic_cohort(
    n: int,
    seed: int,
    tasks: Sequence[TaskSpec],
    p_ehr: float = 0.9,
    p_cxr: float = 0.6,
    p_rr: float = 0.7,
    ehr_steps: tuple[int, int] = (8, 40),
):
    """Build ``n`` synthetic encounters whose text encodes a hidden logistic risk.

    Returns ``(cohort, oracle)``. Labels are Bernoulli draws of the hidden risk.
    """
    if n <= 0:
        raise ValidationError("n must be positive")
    rng = np.random.default_rng(seed)
    encounters = []
    risks: dict[str, dict[str, float]] = {}
    width = max(4, len(str(n)))
    for i in range(n):
        eid = f"SYN-{i:0{width}d}"
        age = int(rng.integers(18, 95))
        n_com = int(rng.binomial(len(COMORBIDITIES), 0.25))
        comorbid = sorted(rng.choice(len(COMORBIDITIES), size=n_com, replace=False).tolist())
        has_ehr = bool(rng.random() < p_ehr)
        n_abn = int(rng.binomial(len(VITALS), 0.2))
        severe = bool(rng.random() < 0.3)
        sex = "female" if rng.random() < 0.5 else "male"
        features = RiskFeatures(age, n_com, n_abn, severe)

        events = []
        if has_ehr:
            abnormal = set(rng.choice(len(VITALS), size=n_abn, replace=False).tolist())
            n_steps = int(rng.integers(*ehr_steps))
            times = np.sort(rng.choice(np.arange(0, 48 * 60 + 1, 15), size=n_steps, replace=False))
            for t in times.tolist():
                for vi, (var, normal, abnormal_range) in enumerate(VITALS):
                    if rng.random() < 0.5:
                        continue
                    lo, hi = abnormal_range if vi in abnormal else normal
                    events.append(EhrEvent(int(t), var, round(float(rng.uniform(lo, hi)), 2)))
                if rng.random() < 0.2:
                    gcs = int(rng.integers(3, 16)) if n_abn >= 3 else int(rng.integers(13, 16))
                    events.append(EhrEvent(int(t), "glasgow_coma_scale_total", str(gcs)))
            if not events:
                events.append(EhrEvent(0, "heart_rate", 80.0))

        cxr = None
        if rng.random() < p_cxr:
            shade = 200 if severe else 60
            locator = "data:image/png;base64," + base64.b64encode(_tiny_png(shade)).decode("ascii")
            cxr = CxrRef(locator, "AP", int(rng.integers(0, 48 * 60 + 1)), 224, 224)

        docs = []
        if rng.random() < p_rr:
            for _ in range(int(rng.integers(1, 3))):
                kind = str(rng.choice(["CT", "CXR", "US", "MRI"]))
                body = ("Impression: severe acute abnormality identified." if severe
                        else "Impression: no acute abnormality.")
                docs.append(RrDoc(int(rng.integers(0, 48 * 60 + 1)), kind, body))
            docs.sort(key=lambda d: d.t_offset_min)

        per_task = {}
        labels = {}
        for task in tasks:
            r = synthetic_risk(features, task.task_id)
            per_task[task.task_id] = r
            labels[task.task_id] = bool(rng.random() < r)
        risks[eid] = per_task
        encounters.append(PatientEncounter(
            encounter_id=eid,
            ps_text=render_ps(eid, features, [COMORBIDITIES[c] for c in comorbid], sex),
            ehr_events=tuple(events),
            cxr=cxr,
            rr_docs=tuple(docs),
            labels=labels,
        ))
    return Cohort(tuple(encounters), f"synthetic(seed={seed}, n={n})"), SyntheticOracle(risks)
