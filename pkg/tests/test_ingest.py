import json
import logging

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icu_agents.core import LENGTH_OF_STAY, MORTALITY, CxrRef, EhrEvent, PatientEncounter, RrDoc
from icu_agents.ingest import (
    Cohort,
    DuplicateEncounter,
    EmptyCohort,
    MissingPS,
    SchemaError,
    apply_window_and_pairing,
    dumps_cohort,
    generate_synthetic_cohort,
    load_cohort,
    pair_encounter,
    split_cohort,
    split_sizes,
    write_cohort,
)


def record(eid, **kw):
    base = {"encounter_id": eid, "ps_text": f"summary {eid}", "ehr_events": [[60, "heart_rate", 88]],
            "cxr": None, "rr_docs": [], "labels": {"mortality": 0}}
    base.update(kw)
    return base


def write_lines(tmp_path, rows):
    path = tmp_path / "cohort.jsonl"
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return path


def test_load_valid_file(tmp_path):
    cohort = load_cohort(write_lines(tmp_path, [record("A"), record("B"), record("C")]))
    assert len(cohort) == 3
    assert cohort.encounters[0].ehr_events[0].value == 88.0


def test_missing_ps(tmp_path):
    row = record("A")
    del row["ps_text"]
    with pytest.raises(MissingPS):
        load_cohort(write_lines(tmp_path, [row]))
    with pytest.raises(MissingPS):
        load_cohort(write_lines(tmp_path, [record("A", ps_text="")]))


def test_duplicate_encounter(tmp_path):
    with pytest.raises(DuplicateEncounter):
        load_cohort(write_lines(tmp_path, [record("A"), record("A")]))


def test_schema_error_reports_line(tmp_path):
    path = write_lines(tmp_path, [record("A"), record("B", ehr_events=[[5, "lactate", 2.0]])])
    with pytest.raises(SchemaError) as err:
        load_cohort(path)
    assert err.value.line == 2
    path.write_text("{not json\n")
    with pytest.raises(SchemaError):
        load_cohort(path)


def test_duplicate_events_keep_last(tmp_path, caplog):
    row = record("A", ehr_events=[[60, "heart_rate", 88], [60, "heart_rate", 91]])
    with caplog.at_level(logging.WARNING):
        enc = load_cohort(write_lines(tmp_path, [row])).encounters[0]
    assert [e.value for e in enc.ehr_events] == [91.0]
    assert "duplicate" in caplog.text


def test_round_trip_file(tmp_path):
    cohort, _ = generate_synthetic_cohort(25, 3, [MORTALITY, LENGTH_OF_STAY])
    path = write_cohort(cohort, tmp_path / "c.jsonl")
    loaded = load_cohort(path)
    assert loaded.encounters == cohort.encounters


def _enc(cxr=(), rr=(), ehr=()):
    return PatientEncounter("E", "ps", ehr_events=ehr, rr_docs=rr, cxr_candidates=cxr)


def test_pairing_latest_ap():
    enc = _enc(cxr=(CxrRef("a", "AP", 600), CxrRef("b", "AP", 2400)))
    assert pair_encounter(enc, MORTALITY).cxr.image_locator == "b"


def test_pairing_drops_lateral():
    assert pair_encounter(_enc(cxr=(CxrRef("a", "lateral", 300),)), MORTALITY).cxr is None
    enc = PatientEncounter("E", "ps", cxr=CxrRef("a", "PA", 10))
    assert pair_encounter(enc, MORTALITY).cxr is None


def test_pairing_window():
    enc = _enc(cxr=(CxrRef("a", "AP", 600), CxrRef("late", "AP", 49 * 60)),
               rr=(RrDoc(49 * 60, "CT", "late"), RrDoc(300, "US", "b"), RrDoc(120, "CT", "a")),
               ehr=(EhrEvent(2880, "ph", 7.3), EhrEvent(2881, "ph", 7.2)))
    out = pair_encounter(enc, MORTALITY)
    assert out.cxr.image_locator == "a"
    assert [d.body for d in out.rr_docs] == ["a", "b"]
    assert [e.t_offset_min for e in out.ehr_events] == [2880]


def test_pairing_lateral_later_than_ap():
    enc = _enc(cxr=(CxrRef("ap", "AP", 100), CxrRef("lat", "lateral", 200)))
    assert pair_encounter(enc, MORTALITY).cxr.image_locator == "ap"


@given(st.lists(st.tuples(st.integers(0, 4000), st.sampled_from(["AP", "lateral", "PA"])), max_size=6),
       st.lists(st.integers(0, 4000), max_size=6))
def test_pairing_invariants(scans, doc_times):
    enc = _enc(cxr=tuple(CxrRef(str(i), v, t) for i, (t, v) in enumerate(scans)),
               rr=tuple(RrDoc(t, "CT", "x") for t in doc_times))
    cohort = apply_window_and_pairing(Cohort((enc,)), MORTALITY)
    out = cohort.encounters[0]
    assert all(d.t_offset_min <= 2880 for d in out.rr_docs)
    if out.cxr is not None:
        assert out.cxr.view == "AP" and out.cxr.t_offset_min <= 2880
    valid = [t for t, v in scans if v == "AP" and t <= 2880]
    assert (out.cxr is None) == (not valid)
    if valid:
        assert out.cxr.t_offset_min == max(valid)


def _cohort(n):
    return Cohort(tuple(PatientEncounter(f"E{i:03d}", "ps") for i in range(n)))


def test_split_sizes():
    assert [len(c) for c in split_cohort(_cohort(100), seed=42)] == [70, 10, 20]
    # floor(7.0), floor(1.0), floor(2.0); no remainder
    assert [len(c) for c in split_cohort(_cohort(10), seed=1)] == [7, 1, 2]
    # floors 7/1/2 for n=11 leave one over, which goes to train
    assert split_sizes(11, (0.7, 0.1, 0.2)) == [8, 1, 2]
    # floors 9/1/2 for n=13 leave one over
    assert split_sizes(13, (0.7, 0.1, 0.2)) == [10, 1, 2]
    # floors 2/0/0 for n=3 leave one over
    assert split_sizes(3, (0.7, 0.1, 0.2)) == [3, 0, 0]
    # n=8: floors 5/0/1 leave two, one to train then one to val
    assert split_sizes(8, (0.7, 0.1, 0.2)) == [6, 1, 1]


def test_split_deterministic_and_labelled():
    a = split_cohort(_cohort(50), seed=9)
    b = split_cohort(_cohort(50), seed=9)
    assert a == b
    assert all(e.split == name for part, name in zip(a, ("train", "val", "test")) for e in part)


def test_split_independent_of_input_order():
    c = _cohort(30)
    rev = Cohort(tuple(reversed(c.encounters)))
    ids = lambda parts: [sorted(e.encounter_id for e in p) for p in parts]
    assert ids(split_cohort(c, seed=4)) == ids(split_cohort(rev, seed=4))


def test_split_errors():
    with pytest.raises(EmptyCohort):
        split_cohort(Cohort(()), seed=0)
    with pytest.raises(ValueError):
        split_cohort(_cohort(5), ratios=(0.5, 0.5, 0.5))


@settings(max_examples=50)
@given(st.integers(1, 300), st.integers(0, 10_000))
def test_split_partition_property(n, seed):
    parts = split_cohort(_cohort(n), seed=seed)
    ids = [e.encounter_id for p in parts for e in p]
    assert sorted(ids) == sorted(e.encounter_id for e in _cohort(n))
    assert len(set(ids)) == n


def test_synthetic_basic():
    cohort, oracle = generate_synthetic_cohort(10, 7, [MORTALITY])
    assert len(cohort) == 10
    assert all(e.ps_text.strip() for e in cohort)
    assert set(oracle.true_risk) == {e.encounter_id for e in cohort}


def test_synthetic_byte_identical():
    a, _ = generate_synthetic_cohort(40, 5, [MORTALITY, LENGTH_OF_STAY])
    b, _ = generate_synthetic_cohort(40, 5, [MORTALITY, LENGTH_OF_STAY])
    assert dumps_cohort(a).encode() == dumps_cohort(b).encode()
    c, _ = generate_synthetic_cohort(40, 6, [MORTALITY, LENGTH_OF_STAY])
    assert dumps_cohort(a) != dumps_cohort(c)


def test_synthetic_prevalence_tracks_mean_risk():
    cohort, oracle = generate_synthetic_cohort(1000, 3, [MORTALITY])
    mean_risk = sum(oracle.risk(e.encounter_id, "mortality") for e in cohort) / len(cohort)
    prevalence = sum(e.labels["mortality"] for e in cohort) / len(cohort)
    assert abs(prevalence - mean_risk) <= 0.03


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 40), st.integers(0, 1000))
def test_synthetic_cohorts_always_have_ps(n, seed):
    cohort, _ = generate_synthetic_cohort(n, seed, [MORTALITY])
    assert all(e.ps_text.strip() for e in cohort)
