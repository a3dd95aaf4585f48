"""Meta-prompting: a coordinator predicts directly or consults modality experts once."""

from __future__ import annotations

import re

from ..core import Exchange, ModalityKind, PatientEncounter, PredictionRecord, ordered
from ..serialize import MissingBaseModality
from .base import AgentSpec, ProtocolEnv, assistant, user

_DECISION = re.compile(r"^\s*DECISION:\s*PREDICT\b", re.M | re.I)
_CONSULT = re.compile(r"^\s*CONSULT:\s*(.+)$", re.M | re.I)


def parse_meta_decision(text: str):
    """``("predict", [])``, ``("consult", [modalities])`` or ``("malformed", [])``."""
    consult = _CONSULT.findall(text or "")
    if consult:
        wanted = []
        for token in re.split(r"[,\s/]+", consult[-1]):
            token = token.strip().strip(".").upper()
            if token in ModalityKind.__members__ and ModalityKind(token) is not ModalityKind.PS:
                wanted.append(ModalityKind(token))
        if wanted:
            return "consult", ordered(set(wanted))
    if _DECISION.search(text or ""):
        return "predict", []
    return "malformed", []


def run_meta_prompt(encounter: PatientEncounter, env: ProtocolEnv, *, modalities=None,
                    protocol_id: str = "meta_prompt") -> PredictionRecord:
    available = encounter.available_modalities()
    allowed = available if modalities is None else available & frozenset(modalities)
    if ModalityKind.PS not in allowed:
        raise MissingBaseModality("meta-prompting needs the patient summary")
    menu = [m for m in ordered(allowed) if m is not ModalityKind.PS]
    base = list(env.context(encounter, {ModalityKind.PS}).parts)
    decide_part = env.text("meta_decide", modality_menu=", ".join(m.value for m in menu) or "none")

    decision_text, ex = env.call("meta", "decide", env.request(base + [decide_part]), parse=False)
    trace = [ex]
    kind, wanted = parse_meta_decision(decision_text)
    extra = {"meta_decision": kind, "consulted": [], "skipped": []}
    history = [assistant(decision_text)]

    if kind == "consult":
        reports = []
        for m in wanted:
            if m not in allowed:
                extra["skipped"].append(m.value)
                trace.append(Exchange(f"{m.value.lower()}_expert", "expert_skipped",
                                      note=f"{m.value} not available for this encounter"))
                continue
            expert = AgentSpec(f"{m.value.lower()}_expert", frozenset({m}))
            parts = list(env.context(encounter, {m}, require_base=False).parts)
            parts.append(env.text("meta_expert", modality=m.value))
            report, ex = env.call(expert.agent_id, "expert_report",
                                  env.request(parts, system=env.persona(expert)), parse=False)
            trace.append(ex)
            extra["consulted"].append(m.value)
            reports.append(f"[{m.value} specialist] {report.strip()}")
        reports_text = "\n".join(reports) or "(no specialist reports could be obtained)"
        history.append(user(env.text("meta_final", expert_reports=reports_text), env.text("answer")))
    else:
        history.append(user(env.text("answer")))

    _, final = env.call("meta", "final", env.request(base + [decide_part], history=history))
    trace.append(final)
    status = final.parse_status
    if kind == "malformed" and status == "ok":
        status = "fallback"
    return PredictionRecord.build(encounter.encounter_id, env.task, protocol_id, final.probability,
                                  status, trace, extra)
