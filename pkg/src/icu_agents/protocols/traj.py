"""Chain of EHR-chunk workers building a memory for a multimodal judge."""

from __future__ import annotations

import logging

from ..core import ModalityKind, PatientEncounter, PredictionRecord
from ..serialize import TextPart, modality_part, serialize_ehr_log, time_steps
from .base import ProtocolEnv, ProtocolError, StrategyKind
from .single import run_single

log = logging.getLogger(__name__)


def chunk_steps(events, chunk_size: int):
    """Consecutive chunks of at most ``chunk_size`` distinct time-steps."""
    steps = time_steps(events)
    return [steps[i:i + chunk_size] for i in range(0, len(steps), chunk_size)]


def run_traj_coa(encounter: PatientEncounter, env: ProtocolEnv, *, chunk_size: int = 100,
                 modalities=None, protocol_id: str = "traj_coa") -> PredictionRecord:
    if chunk_size < 1:
        raise ProtocolError("chunk_size must be positive")
    wanted = frozenset(modalities) if modalities is not None else frozenset(ModalityKind)
    if ModalityKind.EHR not in wanted or not encounter.ehr_events:
        log.info("encounter %s: no EHR, falling back to a single multimodal agent", encounter.encounter_id)
        context = env.context(encounter, wanted - {ModalityKind.EHR})
        record = run_single(StrategyKind.ZERO_SHOT, context, env, encounter_id=encounter.encounter_id,
                            protocol_id=protocol_id, agent_id="judge")
        return PredictionRecord.build(record.encounter_id, env.task, protocol_id, record.probability,
                                      record.parse_status, record.trace, {"degraded": "no_ehr"})

    chunks = chunk_steps(encounter.ehr_events, chunk_size)
    total = sum(len(c) for c in chunks)
    task_part = TextPart(env.task_prompt())

    def work(indexed):
        i, chunk = indexed
        first = i * chunk_size + 1
        events = [e for step in chunk for e in step]
        prompt = env.text("traj_worker", first_step=first, last_step=first + len(chunk) - 1,
                          total_steps=total, ehr_chunk=serialize_ehr_log(events))
        text, ex = env.call(f"worker_{i + 1}", "chunk_memory", env.request([task_part, prompt]), parse=False)
        start, end = chunk[0][0].t_offset_min, chunk[-1][0].t_offset_min
        return f"[steps {first}-{first + len(chunk) - 1}, T0+{start}m to T0+{end}m] {text.strip()}", ex

    results = env.parallel_map(work, enumerate(chunks))
    memory = "\n".join(m for m, _ in results)
    trace = [ex for _, ex in results]

    parts = [task_part]
    for m in (ModalityKind.PS, ModalityKind.CXR, ModalityKind.RR):
        if m in wanted:
            part = modality_part(encounter, m, env.mode, env.image_loader)
            if part is not None:
                parts.append(part)
        if m is ModalityKind.PS:
            parts.append(env.text("traj_memory", memory=memory))
    parts.append(env.text("answer"))
    _, judge = env.call("judge", "judge", env.request(parts))
    trace.append(judge)
    # an unusable judge answer still yields a (fallback) prediction
    status = "fallback" if judge.parse_status == "error" else judge.parse_status
    return PredictionRecord.build(encounter.encounter_id, env.task, protocol_id, judge.probability,
                                  status, trace, {"chunks": len(chunks), "memory": memory})
