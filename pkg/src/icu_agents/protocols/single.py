"""Single-agent prompting strategies over one prompt context."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from ..core import PatientEncounter, PredictionRecord
from ..ingest import Cohort
from ..serialize import PromptContext
from .base import (
    ExemplarUnavailable,
    ProtocolEnv,
    StrategyKind,
    assistant,
    exact_mean,
    user,
)


@dataclass(frozen=True)
class FewShotExemplars:
    """Rendered positive and negative training examples (modality parts only)."""

    positive: PromptContext
    negative: PromptContext


def select_exemplars(train: Cohort, task_id: str) -> tuple[PatientEncounter, PatientEncounter]:
    """Lowest-id positive and lowest-id negative training encounters."""
    ranked = sorted(train.encounters, key=lambda e: e.encounter_id)
    pos = next((e for e in ranked if e.labels.get(task_id) is True), None)
    neg = next((e for e in ranked if e.labels.get(task_id) is False), None)
    if pos is None or neg is None:
        missing = "positive" if pos is None else "negative"
        raise ExemplarUnavailable(f"training split has no {missing} example for task {task_id!r}")
    return pos, neg


def render_exemplars(env: ProtocolEnv, pair, modalities) -> FewShotExemplars:
    pos, neg = pair
    strip = lambda ctx: PromptContext(ctx.parts[1:], ctx.task_prompt_id)
    return FewShotExemplars(strip(env.context(pos, modalities)), strip(env.context(neg, modalities)))


def _few_shot_parts(env: ProtocolEnv, context: PromptContext, exemplars: FewShotExemplars):
    parts = [context.parts[0], env.text("few_shot_intro", n_examples=2)]
    for index, (outcome, ex) in enumerate((("positive", exemplars.positive),
                                           ("negative", exemplars.negative)), start=1):
        parts.append(env.text("few_shot_example", index=index, outcome=outcome))
        parts.extend(ex.parts)
    parts.append(env.text("few_shot_target"))
    parts.extend(context.parts[1:])
    return parts


def _cot_path(env: ProtocolEnv, context: PromptContext, agent_id: str, *, system=None,
              temperature=None, seed=None, tag: str = ""):
    parts = list(context.parts) + [env.text("cot_reason")]
    req = env.request(parts, system=system, temperature=temperature, seed=seed)
    reasoning, ex1 = env.call(agent_id, f"cot_reason{tag}", req, parse=False)
    req2 = env.request(parts, system=system, temperature=temperature, seed=seed,
                       history=[assistant(reasoning), user(env.text("cot_answer"))])
    _, ex2 = env.call(agent_id, f"cot_answer{tag}", req2)
    return [ex1, ex2], ex2.probability, ex2.parse_status


def run_single(strategy, context: PromptContext, env: ProtocolEnv, *, encounter_id: str,
               exemplars: Optional[FewShotExemplars] = None, protocol_id: Optional[str] = None,
               agent_id: str = "agent", system: Optional[str] = None) -> PredictionRecord:
    strategy = StrategyKind(strategy)
    protocol_id = protocol_id or f"single/{strategy.value}"
    trace = []
    extra: dict = {"strategy": strategy.value}

    if strategy is StrategyKind.ZERO_SHOT:
        req = env.request(list(context.parts) + [env.text("answer")], system=system)
        _, ex = env.call(agent_id, "answer", req)
        trace.append(ex)
        prob, status = ex.probability, ex.parse_status

    elif strategy is StrategyKind.FEW_SHOT:
        if exemplars is None:
            raise ExemplarUnavailable("few-shot prompting needs one positive and one negative example")
        req = env.request(_few_shot_parts(env, context, exemplars) + [env.text("answer")], system=system)
        _, ex = env.call(agent_id, "answer", req)
        trace.append(ex)
        prob, status = ex.probability, ex.parse_status

    elif strategy is StrategyKind.COT:
        exchanges, prob, status = _cot_path(env, context, agent_id, system=system)
        trace.extend(exchanges)

    elif strategy is StrategyKind.COT_SC:
        def path(i):
            seed = None if env.seed is None else env.seed * 1000 + i
            return _cot_path(env, context, agent_id, system=system, temperature=env.sc_temperature,
                             seed=seed, tag=f"[{i}]")

        results = env.parallel_map(path, range(env.sc_paths))
        for exchanges, _, _ in results:
            trace.extend(exchanges)
        statuses = [s for _, _, s in results]
        good = [p for _, p, s in results if s == "ok"]
        extra["path_probabilities"] = [p for _, p, _ in results]
        if len(good) == len(results):
            prob, status = exact_mean(good), "ok"
        elif good:
            prob, status = exact_mean(good), "fallback"
        else:
            prob, status = 0.5, "error" if "error" in statuses else "fallback"

    else:  # self-refine: draft, one critique, final answer
        parts = list(context.parts) + [env.text("answer")]
        draft, ex1 = env.call(agent_id, "draft", env.request(parts, system=system))
        history = [assistant(draft), user(env.text("refine_critique"))]
        critique, ex2 = env.call(agent_id, "critique", env.request(parts, system=system, history=history),
                                 parse=False)
        history += [assistant(critique), user(env.text("refine_final"))]
        _, ex3 = env.call(agent_id, "final", env.request(parts, system=system, history=history))
        trace.extend([ex1, ex2, ex3])
        prob, status = ex3.probability, ex3.parse_status

    return PredictionRecord.build(encounter_id, env.task, protocol_id, prob, status, trace, extra)
