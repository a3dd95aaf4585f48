import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from icu_agents.core import (
    CONTINUOUS_KEYS,
    VARIABLE_KEYS,
    EhrEvent,
    ModalityKind,
    PatientEncounter,
    PredictionRecord,
    TaskSpec,
    ValidationError,
    canonical_variables,
    decide,
    parse_modalities,
)
from icu_agents.ingest import parse_record

from .conftest import make_encounter


@pytest.mark.parametrize("p, t, expected", [(0.51, 0.5, True), (0.50, 0.5, False), (0.0, 0.5, False)])
def test_decide_examples(p, t, expected):
    assert decide(p, t) is expected


@given(st.floats(0, 1), st.floats(0, 1), st.floats(0.01, 0.99))
def test_decide_monotone(a, b, t):
    lo, hi = sorted((a, b))
    if decide(lo, t):
        assert decide(hi, t)


def test_canonical_variables():
    names = canonical_variables()
    assert len(names) == 17
    assert names[0] == "capillary refill rate"
    assert "capillary refill rate" in names
    assert names[-1] == "pH"
    assert len(CONTINUOUS_KEYS) == 12
    assert VARIABLE_KEYS[-1] == "ph"
    assert all(k == k.lower() and " " not in k for k in VARIABLE_KEYS)


def test_modality_kind_members():
    assert [m.value for m in ModalityKind] == ["PS", "EHR", "CXR", "RR"]
    assert parse_modalities("ps, cxr") == {ModalityKind.PS, ModalityKind.CXR}


def test_task_spec_invariants():
    with pytest.raises(ValidationError):
        TaskSpec("t", "t", "x", observation_window_hours=0)
    with pytest.raises(ValidationError):
        TaskSpec("t", "t", "x", decision_threshold=1.0)


def test_event_normalizes_variable_names():
    ev = EhrEvent(5, "Heart Rate", "88")
    assert ev.variable == "heart_rate" and ev.value == 88.0
    assert EhrEvent(5, "Glasgow coma scale total", 15).value == "15"
    with pytest.raises(ValidationError):
        EhrEvent(5, "lactate", 2.0)
    with pytest.raises(ValidationError):
        EhrEvent(-1, "ph", 7.4)


def test_encounter_requires_ps_and_sorts_events():
    with pytest.raises(ValidationError):
        PatientEncounter("E", "   ")
    enc = PatientEncounter("E", "ps", ehr_events=(EhrEvent(10, "ph", 7.3), EhrEvent(5, "weight", 80),
                                                   EhrEvent(5, "glucose", 120)))
    assert [(e.t_offset_min, e.variable) for e in enc.ehr_events] == [(5, "glucose"), (5, "weight"), (10, "ph")]


def test_prediction_record_threshold_invariant():
    rec = PredictionRecord.build("E", TaskSpec("t", "t", "x", decision_threshold=0.3), "p", 0.4, "ok")
    assert rec.predicted_label is True
    with pytest.raises(ValidationError):
        PredictionRecord.build("E", TaskSpec("t", "t", "x"), "p", 1.2, "ok")
    assert PredictionRecord.from_dict(json.loads(json.dumps(rec.to_dict()))) == rec


ps_text = st.text(min_size=1).filter(lambda s: s.strip())
events = st.lists(st.tuples(st.integers(0, 2880), st.sampled_from(sorted(CONTINUOUS_KEYS)),
                            st.floats(0, 500, allow_nan=False).map(lambda x: round(x, 2))), max_size=8)


@given(ps_text, events, st.booleans(), st.sampled_from([None, "train", "val", "test"]))
def test_encounter_wire_round_trip(ps, evs, label, split):
    uniq = {(t, v): EhrEvent(t, v, x) for t, v, x in evs}
    enc = PatientEncounter("E1", ps, tuple(uniq.values()), labels={"mortality": label}, split=split)
    assert parse_record(json.loads(json.dumps(enc.to_wire()))) == enc


def test_available_modalities():
    assert make_encounter(ehr=False, rr=False).available_modalities() == {ModalityKind.PS, ModalityKind.CXR}
