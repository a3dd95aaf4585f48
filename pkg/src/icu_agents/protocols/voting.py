"""Independent per-modality agents whose probabilities are pooled."""

from __future__ import annotations

import logging
from typing import Optional

from ..core import Exchange, PatientEncounter, PredictionRecord, decide
from .base import (
    AgentRoster,
    AgentSpec,
    AllAgentsFailed,
    DegenerateWeights,
    ProtocolEnv,
    ProtocolError,
    combine_status,
    exact_mean,
)

log = logging.getLogger(__name__)

AGGREGATIONS = ("probability", "hard_label")


def agent_context(env: ProtocolEnv, agent: AgentSpec, encounter: PatientEncounter):
    return env.context(encounter, agent.modalities, require_base=False)


def participating(roster: AgentRoster, encounter: PatientEncounter):
    """Split the roster into agents whose modalities are present and skip notes for the rest."""
    present = encounter.available_modalities()
    active, skipped = [], []
    for agent in roster.agents:
        if agent.modalities <= present:
            active.append(agent)
        else:
            missing = ",".join(sorted(m.value for m in agent.modalities - present))
            log.info("encounter %s: skipping %s (missing %s)", encounter.encounter_id, agent.agent_id, missing)
            skipped.append(Exchange(agent.agent_id, "skipped", note=f"modality absent: {missing}"))
    return active, skipped


def collect_votes(roster: AgentRoster, encounter: PatientEncounter, env: ProtocolEnv):
    active, skipped = participating(roster, encounter)

    def vote(agent: AgentSpec) -> Exchange:
        req = env.request(list(agent_context(env, agent, encounter).parts) + [env.text("answer")],
                          system=env.persona(agent))
        _, ex = env.call(agent.agent_id, "vote", req, backend=agent.backend)
        return ex

    return active, env.parallel_map(vote, active), skipped


def _pool(task, votes: list[Exchange], weights: Optional[list[float]], aggregation: str) -> float:
    if aggregation == "hard_label":
        values = [1.0 if decide(v.probability, task.decision_threshold) else 0.0 for v in votes]
    else:
        values = [v.probability for v in votes]
    if weights is None or len(set(weights)) == 1:
        # equal weights reduce to the plain mean, bit for bit
        return exact_mean(values)
    return exact_mean(values, weights)


def _vote(roster, encounter, env, weighted: bool, aggregation: str, protocol_id: str) -> PredictionRecord:
    if aggregation not in AGGREGATIONS:
        raise ProtocolError(f"unknown aggregation {aggregation!r}")
    active, votes, skipped = collect_votes(roster, encounter, env)
    if not active:
        raise AllAgentsFailed(f"no agent of the roster has its modality on {encounter.encounter_id}")
    valid = [(a, v) for a, v in zip(active, votes) if v.parse_status != "error"]
    if not valid:
        raise AllAgentsFailed(f"every agent failed on {encounter.encounter_id}")
    weights = None
    if weighted:
        if roster.weights is None:
            raise DegenerateWeights("weighted vote needs roster weights")
        weights = [float(roster.weights[a.agent_id]) for a, _ in valid]
        if sum(weights) <= 0:
            raise DegenerateWeights(f"participating agents on {encounter.encounter_id} have zero total weight")
    p_bar = _pool(env.task, [v for _, v in valid], weights, aggregation)
    extra = {
        "agent_probabilities": {a.agent_id: v.probability for a, v in zip(active, votes)},
        "aggregation": aggregation,
    }
    if weights is not None:
        extra["weights"] = {a.agent_id: w for (a, _), w in zip(valid, weights)}
    status = combine_status([v.parse_status for v in votes])
    return PredictionRecord.build(encounter.encounter_id, env.task, protocol_id, p_bar, status,
                                  list(votes) + skipped, extra)


def run_majority_vote(roster: AgentRoster, encounter: PatientEncounter, env: ProtocolEnv, *,
                      aggregation: str = "probability", protocol_id: str = "majority_vote") -> PredictionRecord:
    """Mean of the participating agents' probabilities, thresholded strictly."""
    return _vote(roster, encounter, env, False, aggregation, protocol_id)


def run_weighted_vote(roster: AgentRoster, encounter: PatientEncounter, env: ProtocolEnv, *,
                      aggregation: str = "probability", protocol_id: str = "weighted_vote") -> PredictionRecord:
    """Weight-normalized mean over participating agents."""
    return _vote(roster, encounter, env, True, aggregation, protocol_id)
