"""Multi-round debate until unanimous labels or a round cap."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

from ..core import Exchange, PatientEncounter, PredictionRecord, decide
from .base import (
    _PROB_LINE,
    AgentRoster,
    AllAgentsFailed,
    ProtocolEnv,
    ProtocolError,
    assistant,
    combine_status,
    exact_mean,
    user,
)
from .voting import agent_context, participating

MAX = "MAX"


@dataclass(frozen=True)
class DebateTrace:
    """``rounds[r][agent_id] = {"probability", "predicted_label", "rationale", "parse_status"}``."""

    rounds: tuple[dict, ...]
    consensus_round: Union[int, str]
    final_probability: float
    max_rounds: int = 3

    def to_dict(self) -> dict:
        return {
            "rounds": [dict(r) for r in self.rounds],
            "consensus_round": self.consensus_round,
            "final_probability": self.final_probability,
            "max_rounds": self.max_rounds,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DebateTrace":
        return cls(tuple(d["rounds"]), d["consensus_round"], d["final_probability"], d.get("max_rounds", 3))


def rationale_of(text: str, limit: int) -> str:
    body = _PROB_LINE.sub("", text).strip()
    body = " ".join(body.split())
    return body if len(body) <= limit else body[: max(limit - 3, 0)] + "..."


def unanimous(round_entries: dict) -> bool:
    labels = {e["predicted_label"] for e in round_entries.values() if e["parse_status"] != "error"}
    return len(labels) == 1


def replay_consensus(trace: DebateTrace) -> Union[int, str]:
    """Recompute the first unanimous round from the stored per-round entries."""
    for r, entries in enumerate(trace.rounds, start=1):
        if unanimous(entries):
            return r
    return MAX


def run_debate(roster: AgentRoster, encounter: PatientEncounter, env: ProtocolEnv, *, max_rounds: int = 3,
               protocol_id: str = "debate") -> tuple[PredictionRecord, DebateTrace]:
    if max_rounds < 1:
        raise ProtocolError("max_rounds must be at least 1")
    active, skipped = participating(roster, encounter)
    if len(active) < 2:
        raise ProtocolError(f"debate needs at least two participating agents, got {len(active)}")
    threshold = env.task.decision_threshold
    contexts = {a.agent_id: list(agent_context(env, a, encounter).parts) + [env.text("answer")] for a in active}
    histories: dict[str, list] = {a.agent_id: [] for a in active}
    rounds: list[dict] = []
    trace: list[Exchange] = []
    consensus: Union[int, str] = MAX

    for r in range(1, max_rounds + 1):
        previous = rounds[-1] if rounds else None

        def speak(agent):
            history = list(histories[agent.agent_id])
            if previous is not None:
                peers = "\n".join(
                    env.templates.render("peer_message", agent_id=aid, probability=f"{e['probability']:.3f}",
                                         rationale=e["rationale"])
                    for aid, e in previous.items() if aid != agent.agent_id and e["parse_status"] != "error"
                ) or "(no peer assessments available)"
                history.append(user(env.text("debate", round=r, previous_round=r - 1, peer_messages=peers)))
            req = env.request(contexts[agent.agent_id], system=env.persona(agent), history=history)
            text, ex = env.call(agent.agent_id, "debate", req, round=r, backend=agent.backend)
            return agent, history, text, ex

        # barrier: round r+1 starts only after every round-r reply is in
        results = env.parallel_map(speak, active)
        entries = {}
        for agent, history, text, ex in results:
            histories[agent.agent_id] = history + [assistant(text)]
            trace.append(ex)
            entries[agent.agent_id] = {
                "probability": ex.probability,
                "predicted_label": decide(ex.probability, threshold),
                "rationale": rationale_of(text, env.peer_char_limit),
                "parse_status": ex.parse_status,
            }
        if all(e["parse_status"] == "error" for e in entries.values()):
            raise AllAgentsFailed(f"every debate agent failed in round {r} on {encounter.encounter_id}")
        rounds.append(entries)
        if unanimous(entries):
            consensus = r
            break

    final_entries = rounds[-1]
    valid = [e for e in final_entries.values() if e["parse_status"] != "error"]
    final = exact_mean([e["probability"] for e in valid])
    debate = DebateTrace(tuple(rounds), consensus, final, max_rounds)
    status = combine_status([e["parse_status"] for e in final_entries.values()])
    record = PredictionRecord.build(encounter.encounter_id, env.task, protocol_id, final, status,
                                    trace + skipped, {"debate": debate.to_dict()})
    return record, debate
