from __future__ import annotations

import base64

import pytest

from icu_agents.core import MORTALITY, CxrRef, EhrEvent, PatientEncounter, RrDoc
from icu_agents.gateway import Gateway, MockBackend, MockRule, MockScript
from icu_agents.protocols import ProtocolEnv
from icu_agents.templates import TemplateSet

PNG_URI = "data:image/png;base64," + base64.b64encode(b"\x89PNG fake image bytes").decode()


def make_encounter(eid="E1", *, ehr=True, cxr=True, rr=True, label=False, **kw):
    events = (EhrEvent(60, "heart_rate", 88.0), EhrEvent(120, "heart_rate", 96.0),
              EhrEvent(120, "ph", 7.4)) if ehr else ()
    return PatientEncounter(
        encounter_id=eid,
        ps_text=f"Patient {eid}: 70-year-old with heart failure.",
        ehr_events=events,
        cxr=CxrRef(PNG_URI, "AP", 600) if cxr else None,
        rr_docs=(RrDoc(300, "CT", "No acute findings."),) if rr else (),
        labels={"mortality": label},
        **kw,
    )


@pytest.fixture
def templates():
    return TemplateSet.load()


@pytest.fixture
def encounter():
    return make_encounter()


def scripted(*rules, default="PROBABILITY: 0.5", scope="all"):
    """MockBackend from ``(contains, respond)`` pairs."""
    return MockBackend(MockScript([MockRule(respond=r, contains=c, scope=scope) for c, r in rules], default))


@pytest.fixture
def make_env(templates):
    def _make(backend, **kw):
        kw.setdefault("max_parallel", 1)
        return ProtocolEnv(gateway=Gateway(backend), task=MORTALITY, templates=templates, **kw)
    return _make


def pytest_terminal_summary(terminalreporter):
    from .test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
