from __future__ import annotations

import enum
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Mapping, Optional, Sequence

from ..core import (
    Exchange,
    HarnessError,
    ModalityKind,
    TaskSpec,
    ValidationError,
    ordered,
)
from ..gateway import cache_key
from ..gateway.models import CompletionRequest, Message
from ..serialize import Part, PromptContext, SerializationMode, TextPart, assemble_context
from ..templates import TemplateSet

log = logging.getLogger(__name__)

_PROB_LINE = re.compile(r"^\s*PROBABILITY:\s*([-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d+)?)\s*$", re.M)


class ProtocolError(HarnessError):
    pass


class AllAgentsFailed(ProtocolError):
    pass


class DegenerateWeights(ProtocolError):
    pass


class ExemplarUnavailable(ProtocolError):
    pass


class StrategyKind(str, enum.Enum):
    ZERO_SHOT = "zero_shot"
    FEW_SHOT = "few_shot"
    COT = "cot"
    COT_SC = "cot_sc"
    SELF_REFINE = "self_refine"


class ProtocolKind(str, enum.Enum):
    SINGLE_UNIMODAL = "single_unimodal"
    SINGLE_MULTIMODAL = "single_multimodal"
    MAJORITY_VOTE = "majority_vote"
    WEIGHTED_VOTE = "weighted_vote"
    DEBATE_UNIMODAL = "debate_unimodal"
    DEBATE_MULTIMODAL = "debate_multimodal"
    META_PROMPT = "meta_prompt"
    TRAJ_COA = "traj_coa"
    PLUGIN = "plugin"


MULTI_AGENT_PROTOCOLS = frozenset({
    ProtocolKind.MAJORITY_VOTE, ProtocolKind.WEIGHTED_VOTE, ProtocolKind.DEBATE_UNIMODAL,
})


def parse_probability(response_text: str) -> tuple[float, str]:
    """Last ``PROBABILITY: x`` line -> ``(x, "ok")``; none -> ``(0.5, "fallback")``;
    out of [0, 1] -> ``(0.5, "error")``."""
    matches = _PROB_LINE.findall(response_text or "")
    if not matches:
        return 0.5, "fallback"
    value = float(matches[-1])
    if not 0.0 <= value <= 1.0:
        return 0.5, "error"
    return value, "ok"


def exact_mean(values: Sequence[float], weights: Optional[Sequence[float]] = None) -> float:
    """Correctly rounded (weighted) mean, independent of summation order."""
    if weights is None:
        return float(sum(Fraction(v) for v in values) / len(values))
    total = sum(Fraction(w) for w in weights)
    return float(sum(Fraction(w) * Fraction(v) for w, v in zip(weights, values)) / total)


def combine_status(statuses: Sequence[str]) -> str:
    if all(s == "ok" for s in statuses):
        return "ok"
    if all(s == "error" for s in statuses):
        return "error"
    return "fallback"


@dataclass(frozen=True)
class AgentSpec:
    agent_id: str
    modalities: frozenset[ModalityKind]
    persona: str = ""
    backend: Optional[str] = None


@dataclass(frozen=True)
class AgentRoster:
    agents: tuple[AgentSpec, ...]
    weights: Optional[Mapping[str, float]] = None

    def __post_init__(self):
        object.__setattr__(self, "agents", tuple(self.agents))
        ids = [a.agent_id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise ValidationError("agent ids must be unique")
        if self.weights is not None:
            missing = set(ids) - set(self.weights)
            if missing:
                raise ValidationError(f"weights missing for {sorted(missing)}")
            if any(w < 0 for w in self.weights.values()) or sum(self.weights.values()) <= 0:
                raise ValidationError("weights must be non-negative with a positive sum")


@dataclass
class ProtocolEnv:
    """Everything a protocol needs besides the encounter: backend, task, templates, settings."""

    gateway: object
    task: TaskSpec
    templates: TemplateSet = field(default_factory=TemplateSet.load)
    model_id: str = "mock"
    max_tokens: int = 1024
    temperature: float = 0.0
    sc_temperature: float = 0.7
    sc_paths: int = 3
    seed: Optional[int] = None
    mode: SerializationMode = SerializationMode.LOG
    image_loader: Optional[Callable] = None
    peer_char_limit: int = 600
    max_parallel: int = 4
    backends: Mapping[str, object] = field(default_factory=dict)

    def task_prompt(self) -> str:
        return self.templates.render(
            "task",
            task_id=self.task.task_id,
            task_name=self.task.name,
            window_hours=self.task.observation_window_hours,
            positive_meaning=self.task.positive_meaning,
        )

    def context(self, encounter, modalities, *, require_base: bool = True) -> PromptContext:
        return assemble_context(self.task_prompt(), encounter, modalities, self.mode,
                                require_base=require_base, image_loader=self.image_loader)

    def persona(self, agent: AgentSpec) -> str:
        if agent.persona:
            return agent.persona
        names = ", ".join(m.value for m in ordered(agent.modalities))
        return self.templates.render("agent_persona", agent_id=agent.agent_id, modality_names=names)

    def text(self, name: str, **values) -> TextPart:
        return TextPart(self.templates.render(name, **values))

    def request(self, parts: Sequence[Part], *, system: Optional[str] = None,
                history: Sequence[tuple[str, Sequence[Part]]] = (),
                temperature: Optional[float] = None, seed: Optional[int] = None) -> CompletionRequest:
        """Build a request: optional system message, the user parts, then alternating turns."""
        messages = [Message.text("system", system)] if system else []
        messages.append(Message("user", tuple(parts)))
        for role, turn_parts in history:
            messages.append(Message(role, tuple(turn_parts)))
        return CompletionRequest(
            model_id=self.model_id,
            messages=tuple(messages),
            temperature=self.temperature if temperature is None else temperature,
            max_tokens=self.max_tokens,
            seed=self.seed if seed is None else seed,
        )

    def call(self, agent_id: str, step: str, request: CompletionRequest, *, parse: bool = True,
             round: Optional[int] = None, backend: Optional[str] = None) -> tuple[str, Exchange]:
        target = self.backends[backend] if backend else self.gateway
        response = target.complete(request)
        prob, status = parse_probability(response.text) if parse else (None, None)
        exchange = Exchange(
            agent_id=agent_id,
            step=step,
            prompt_digest=cache_key(request),
            response_text=response.text,
            probability=prob,
            parse_status=status,
            retry_count=response.retry_count,
            round=round,
        )
        return response.text, exchange

    def parallel_map(self, fn, items):
        items = list(items)
        if self.max_parallel <= 1 or len(items) <= 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=min(self.max_parallel, len(items))) as pool:
            return list(pool.map(fn, items))


def assistant(text: str) -> tuple[str, tuple[Part, ...]]:
    return ("assistant", (TextPart(text),))


def user(*parts: Part) -> tuple[str, tuple[Part, ...]]:
    return ("user", tuple(parts))


def unimodal_roster(modalities, personas: Optional[Mapping[ModalityKind, str]] = None) -> AgentRoster:
    """One specialist per modality, in canonical modality order."""
    personas = personas or {}
    return AgentRoster(tuple(
        AgentSpec(f"{m.value.lower()}_agent", frozenset({m}), personas.get(m, ""))
        for m in ordered(modalities)
    ))


def multimodal_roster(modalities, n_agents: int = 4) -> AgentRoster:
    mods = frozenset(modalities)
    return AgentRoster(tuple(AgentSpec(f"generalist_{i + 1}", mods) for i in range(n_agents)))
