import dataclasses
import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icu_agents.core import EhrEvent, ModalityKind
from icu_agents.gateway import MockBackend
from icu_agents.ingest import Cohort
from icu_agents.protocols import (
    MAX,
    AgentRoster,
    AgentSpec,
    AllAgentsFailed,
    ExemplarUnavailable,
    ProtocolError,
    StrategyKind,
    exact_mean,
    multimodal_roster,
    parse_meta_decision,
    parse_probability,
    render_exemplars,
    replay_consensus,
    run_debate,
    run_majority_vote,
    run_meta_prompt,
    run_single,
    run_traj_coa,
    run_weighted_vote,
    select_exemplars,
    unimodal_roster,
)

from .conftest import make_encounter, scripted

PS, EHR, CXR, RR = ModalityKind
ALL = {PS, EHR, CXR, RR}


def agent(name):
    return f"You are agent {name.lower()}_agent"


# --- parsing -----------------------------------------------------------------

@pytest.mark.parametrize("text, expected", [
    ("PROBABILITY: 0.73", (0.73, "ok")),
    ("reasoning\nPROBABILITY: 0.2\nmore\nPROBABILITY: .9", (0.9, "ok")),
    ("PROBABILITY: 1", (1.0, "ok")),
    ("no number here", (0.5, "fallback")),
    ("the probability is 0.3", (0.5, "fallback")),
    ("PROBABILITY: 1.4", (0.5, "error")),
    ("PROBABILITY: -0.1", (0.5, "error")),
])
def test_parse_probability(text, expected):
    assert parse_probability(text) == expected


@given(st.floats(0, 1))
def test_parse_probability_round_trip(p):
    assert parse_probability(f"x\nPROBABILITY: {p!r}") == (p, "ok")


def test_parse_meta_decision():
    assert parse_meta_decision("DECISION: PREDICT") == ("predict", [])
    assert parse_meta_decision("CONSULT: rr, EHR.") == ("consult", [EHR, RR])
    assert parse_meta_decision("CONSULT: PS") == ("malformed", [])
    assert parse_meta_decision("I think more data") == ("malformed", [])


# --- single agent ------------------------------------------------------------

def test_zero_shot(make_env, encounter):
    mock = scripted(default="Because.\nPROBABILITY: 0.62")
    env = make_env(mock)
    rec = run_single("zero_shot", env.context(encounter, ALL), env, encounter_id="E1")
    assert (rec.probability, rec.parse_status, rec.predicted_label) == (0.62, "ok", True)
    assert mock.calls == 1 and len(rec.trace) == 1
    assert "[task:mortality]" in mock.requests[0].text


def test_fallback_recorded(make_env, encounter):
    env = make_env(MockBackend("I cannot tell."))
    rec = run_single("zero_shot", env.context(encounter, {PS}), env, encounter_id="E1")
    assert (rec.probability, rec.parse_status, rec.predicted_label) == (0.5, "fallback", False)


def test_few_shot_includes_exemplars(make_env):
    train = Cohort(tuple(make_encounter(f"T{i}", label=i % 2 == 1) for i in range(4)))
    pos, neg = select_exemplars(train, "mortality")
    assert (pos.encounter_id, neg.encounter_id) == ("T1", "T0")
    mock = MockBackend("PROBABILITY: 0.4")
    env = make_env(mock)
    ex = render_exemplars(env, (pos, neg), {PS})
    run_single("few_shot", env.context(make_encounter("E9"), {PS}), env, encounter_id="E9", exemplars=ex)
    text = mock.requests[0].text
    assert text.index("Patient T1") < text.index("Patient T0") < text.index("Patient E9")
    with pytest.raises(ExemplarUnavailable):
        select_exemplars(Cohort((make_encounter("A"),)), "mortality")


def test_cot_two_turns(make_env, encounter):
    # the answer turn repeats the reasoning prompt, so match on the last message only
    mock = scripted((("Think step by step",), "reasoning text"), default="PROBABILITY: 0.3", scope="last")
    env = make_env(mock)
    rec = run_single("cot", env.context(encounter, {PS}), env, encounter_id="E1")
    assert [e.step for e in rec.trace] == ["cot_reason", "cot_answer"]
    assert rec.trace[0].probability is None and rec.probability == 0.3
    last = mock.requests[1].messages
    assert [m.role for m in last] == ["user", "assistant", "user"]
    assert last[1].text_content == "reasoning text"


def test_cot_sc_mean_of_paths(make_env, encounter):
    answers = iter(["PROBABILITY: 0.6", "PROBABILITY: 0.7", "PROBABILITY: 0.8"])

    def respond(req):
        if "Think step by step" in req.messages[-1].text_content:
            return "reasoning"
        return next(answers)

    env = make_env(MockBackend(respond), seed=1)
    rec = run_single("cot_sc", env.context(encounter, {PS}), env, encounter_id="E1")
    assert rec.probability == exact_mean([0.6, 0.7, 0.8])
    assert abs(rec.probability - 0.7) <= 1e-12
    assert rec.parse_status == "ok" and len(rec.trace) == 6


def test_cot_sc_partial_failure(make_env, encounter):
    answers = iter(["PROBABILITY: 0.6", "no idea", "PROBABILITY: 0.8"])

    def respond(req):
        return "r" if "Think step by step" in req.messages[-1].text_content else next(answers)

    env = make_env(MockBackend(respond), seed=1)
    rec = run_single("cot_sc", env.context(encounter, {PS}), env, encounter_id="E1")
    assert rec.probability == pytest.approx(0.7, abs=1e-12)
    assert rec.parse_status == "fallback"


def test_cot_sc_paths_seeded(make_env, encounter):
    mock = MockBackend("PROBABILITY: 0.5")
    env = make_env(mock, seed=7, sc_paths=3)
    run_single("cot_sc", env.context(encounter, {PS}), env, encounter_id="E1")
    seeds = sorted({r.seed for r in mock.requests})
    assert seeds == [7000, 7001, 7002]
    assert all(r.temperature == 0.7 for r in mock.requests)


def test_self_refine(make_env, encounter):
    answers = iter(["PROBABILITY: 0.9", "overconfident", "PROBABILITY: 0.6"])
    env = make_env(MockBackend(lambda r: next(answers)))
    rec = run_single("self_refine", env.context(encounter, {PS}), env, encounter_id="E1")
    assert [e.step for e in rec.trace] == ["draft", "critique", "final"]
    assert rec.probability == 0.6


# --- voting ------------------------------------------------------------------

def vote_mock(probs):
    return scripted(*[((agent(m.value),), f"PROBABILITY: {p}") for m, p in probs.items()])


def test_majority_vote_example(make_env, encounter):
    env = make_env(vote_mock({PS: 0.8, EHR: 0.6, CXR: 0.4, RR: 0.2}))
    rec = run_majority_vote(unimodal_roster(ALL), encounter, env)
    assert rec.probability == 0.5 and rec.predicted_label is False
    assert rec.extra["agent_probabilities"] == {"ps_agent": 0.8, "ehr_agent": 0.6, "cxr_agent": 0.4,
                                                "rr_agent": 0.2}


def test_vote_agents_see_only_their_modality(make_env, encounter):
    mock = MockBackend("PROBABILITY: 0.5")
    run_majority_vote(unimodal_roster(ALL), encounter, make_env(mock))
    for req in mock.requests:
        labels = [line.split(":")[0] for line in req.text.splitlines() if line.startswith("Modality ")]
        assert len(labels) == 1


def test_vote_skips_absent_modality(make_env):
    enc = make_encounter(cxr=False)
    env = make_env(vote_mock({PS: 0.9, EHR: 0.6, RR: 0.3}))
    rec = run_majority_vote(unimodal_roster(ALL), enc, env)
    assert rec.probability == pytest.approx(0.6, abs=1e-12)
    assert [e.step for e in rec.trace if e.agent_id == "cxr_agent"] == ["skipped"]


def test_vote_excludes_error_votes(make_env, encounter):
    env = make_env(vote_mock({PS: 0.9, EHR: 1.7, CXR: 0.3, RR: 0.6}))
    rec = run_majority_vote(unimodal_roster(ALL), encounter, env)
    assert rec.probability == pytest.approx(0.6, abs=1e-12)
    assert rec.parse_status == "fallback"


def test_vote_all_failed(make_env, encounter):
    env = make_env(MockBackend("PROBABILITY: 3"))
    with pytest.raises(AllAgentsFailed):
        run_majority_vote(unimodal_roster(ALL), encounter, env)


def test_hard_label_aggregation(make_env, encounter):
    env = make_env(vote_mock({PS: 0.8, EHR: 0.6, CXR: 0.4, RR: 0.45}))
    rec = run_majority_vote(unimodal_roster(ALL), encounter, env, aggregation="hard_label")
    assert rec.probability == 0.5


def test_weighted_vote(make_env, encounter):
    probs = {PS: 0.8, EHR: 0.6, CXR: 0.4, RR: 0.2}
    roster = unimodal_roster(ALL)
    w = dict(zip([a.agent_id for a in roster.agents], [3.0, 1.0, 0.0, 0.0]))
    rec = run_weighted_vote(AgentRoster(roster.agents, w), encounter, make_env(vote_mock(probs)))
    assert rec.probability == pytest.approx(0.75, abs=1e-12)


def test_equal_weights_bit_identical(make_env, encounter):
    probs = {PS: 0.1, EHR: 0.7, CXR: 0.3, RR: 0.2}
    roster = unimodal_roster(ALL)
    weighted = AgentRoster(roster.agents, {a.agent_id: 0.37 for a in roster.agents})
    a = run_majority_vote(roster, encounter, make_env(vote_mock(probs))).probability
    b = run_weighted_vote(weighted, encounter, make_env(vote_mock(probs))).probability
    assert a == b


@settings(max_examples=100)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=6), st.randoms())
def test_exact_mean_permutation_invariant(values, rnd):
    shuffled = list(values)
    rnd.shuffle(shuffled)
    assert exact_mean(values) == exact_mean(shuffled)
    assert min(values) <= exact_mean(values) <= max(values)


def test_vote_permutation_invariant(make_env, encounter):
    probs = {PS: 0.1, EHR: 0.7, CXR: 0.3, RR: 0.2}
    base = unimodal_roster(ALL).agents
    seen = set()
    for perm in itertools.permutations(base):
        seen.add(run_majority_vote(AgentRoster(perm), encounter, make_env(vote_mock(probs))).probability)
    assert len(seen) == 1


# --- debate ------------------------------------------------------------------

def debate_mock(per_round):
    """per_round[r] = {modality: prob}; later rounds are matched first."""
    rules = []
    for r in sorted(per_round, reverse=True):
        for m, p in per_round[r].items():
            marker = (agent(m.value), f"Debate round {r}.") if r > 1 else (agent(m.value),)
            rules.append((marker, f"I weigh my data.\nPROBABILITY: {p}"))
    return scripted(*rules)


def test_debate_consensus_round_one(make_env, encounter):
    env = make_env(debate_mock({1: {PS: 0.8, EHR: 0.7, CXR: 0.9, RR: 0.6}}))
    rec, trace = run_debate(unimodal_roster(ALL), encounter, env)
    assert trace.consensus_round == 1 and len(trace.rounds) == 1
    assert rec.probability == pytest.approx(0.75, abs=1e-12)


def test_debate_consensus_round_two(make_env, encounter):
    mock = debate_mock({1: {PS: 0.8, EHR: 0.3, CXR: 0.9, RR: 0.6}, 2: {PS: 0.8, EHR: 0.6, CXR: 0.9, RR: 0.6}})
    rec, trace = run_debate(unimodal_roster(ALL), encounter, make_env(mock))
    assert trace.consensus_round == 2
    assert rec.probability == pytest.approx(0.725, abs=1e-12)
    # round-2 prompts carry the peers' round-1 messages, not the agent's own
    ehr_r2 = [r for r in mock.requests if agent("EHR") in r.text and "Debate round 2." in r.text][0]
    assert "ps_agent" in ehr_r2.text and "ehr_agent (probability" not in ehr_r2.text
    assert [m.role for m in ehr_r2.messages] == ["system", "user", "assistant", "user"]


def test_debate_no_consensus(make_env, encounter):
    split = {PS: 0.8, EHR: 0.3, CXR: 0.9, RR: 0.2}
    mock = debate_mock({1: split, 2: split, 3: split})
    rec, trace = run_debate(unimodal_roster(ALL), encounter, make_env(mock), max_rounds=3)
    assert trace.consensus_round == MAX and len(trace.rounds) == 3
    assert mock.calls == 12
    assert rec.probability == pytest.approx(0.55, abs=1e-12)
    assert replay_consensus(trace) == MAX


def test_debate_needs_two_agents(make_env):
    enc = make_encounter(ehr=False, cxr=False, rr=False)
    with pytest.raises(ProtocolError):
        run_debate(unimodal_roster(ALL), enc, make_env(MockBackend("PROBABILITY: 0.5")))


def test_debate_multimodal_roster(make_env, encounter):
    rec, trace = run_debate(multimodal_roster(ALL, 3), encounter, make_env(MockBackend("PROBABILITY: 0.2")))
    assert trace.consensus_round == 1 and len(trace.rounds[0]) == 3


# --- meta and traj -----------------------------------------------------------

def test_meta_predict_directly(make_env, encounter):
    mock = scripted((("DECISION: PREDICT",), "DECISION: PREDICT"), default="PROBABILITY: 0.33", scope="last")
    rec = run_meta_prompt(encounter, make_env(mock))
    assert rec.probability == 0.33 and rec.extra["meta_decision"] == "predict"
    assert mock.calls == 2


def test_meta_consults_experts(make_env):
    enc = make_encounter(cxr=False)
    mock = scripted((("CONSULT:",), "CONSULT: EHR, CXR"), (("specialist report",), "HR rising"),
                    default="PROBABILITY: 0.7", scope="last")
    rec = run_meta_prompt(enc, make_env(mock))
    assert rec.extra["consulted"] == ["EHR"] and rec.extra["skipped"] == ["CXR"]
    assert "expert_skipped" in [e.step for e in rec.trace]
    assert rec.probability == 0.7 and rec.parse_status == "ok"


def test_meta_malformed_decision(make_env, encounter):
    answers = iter(["hmm", "PROBABILITY: 0.4"])
    rec = run_meta_prompt(encounter, make_env(MockBackend(lambda r: next(answers))))
    assert rec.extra["meta_decision"] == "malformed"
    assert rec.parse_status == "fallback" and rec.probability == 0.4


def _long_encounter(steps):
    events = tuple(EhrEvent(t * 10, "heart_rate", 80 + t % 7) for t in range(steps))
    return dataclasses.replace(make_encounter(ehr=False), ehr_events=events)


def test_traj_chunks_and_memory(make_env):
    enc = _long_encounter(250)
    mock = scripted((("EHR MEMORY TASK",), "stable heart rate"), default="PROBABILITY: 0.45", scope="last")
    rec = run_traj_coa(enc, make_env(mock), chunk_size=100)
    assert rec.extra["chunks"] == 3 and mock.calls == 4
    assert "[steps 201-250" in rec.extra["memory"]
    judge = mock.requests[-1].text
    assert "stable heart rate" in judge and "[T0+" not in judge
    assert rec.probability == 0.45


def test_traj_without_ehr_degrades(make_env):
    rec = run_traj_coa(make_encounter(ehr=False), make_env(MockBackend("PROBABILITY: 0.2")))
    assert rec.extra["degraded"] == "no_ehr" and rec.probability == 0.2


def test_traj_judge_error_becomes_fallback(make_env):
    rec = run_traj_coa(_long_encounter(10), make_env(MockBackend("PROBABILITY: 2")))
    assert rec.parse_status == "fallback" and rec.probability == 0.5


def test_strategy_enum_values():
    assert [s.value for s in StrategyKind] == ["zero_shot", "few_shot", "cot", "cot_sc", "self_refine"]
    assert AgentSpec("a", frozenset({PS})).persona == ""
