"""Agentic strategies and collaboration protocols."""

from __future__ import annotations

from typing import Callable, Dict

from .base import (
    AgentRoster,
    AgentSpec,
    AllAgentsFailed,
    DegenerateWeights,
    ExemplarUnavailable,
    ProtocolEnv,
    ProtocolError,
    ProtocolKind,
    StrategyKind,
    exact_mean,
    multimodal_roster,
    parse_probability,
    unimodal_roster,
)
from .debate import MAX, DebateTrace, replay_consensus, run_debate
from .meta import parse_meta_decision, run_meta_prompt
from .single import FewShotExemplars, render_exemplars, run_single, select_exemplars
from .traj import chunk_steps, run_traj_coa
from .voting import run_majority_vote, run_weighted_vote

# plugin name -> callable(encounter, env, modalities) -> PredictionRecord
PLUGINS: Dict[str, Callable] = {}


def register_protocol(name: str, fn: Callable = None):
    """Register an external protocol; usable as a decorator."""
    def _register(f):
        PLUGINS[name] = f
        return f
    return _register(fn) if fn is not None else _register


def get_plugin(name: str) -> Callable:
    try:
        return PLUGINS[name]
    except KeyError:
        raise ProtocolError(f"protocol plugin {name!r} is not registered") from None


__all__ = [
    "AgentRoster", "AgentSpec", "AllAgentsFailed", "DebateTrace", "DegenerateWeights", "ExemplarUnavailable",
    "FewShotExemplars", "MAX", "PLUGINS", "ProtocolEnv", "ProtocolError", "ProtocolKind", "StrategyKind",
    "chunk_steps", "exact_mean", "get_plugin", "multimodal_roster", "parse_meta_decision", "parse_probability",
    "register_protocol", "render_exemplars", "replay_consensus", "run_debate", "run_majority_vote",
    "run_meta_prompt", "run_single", "run_traj_coa", "run_weighted_vote", "select_exemplars", "unimodal_roster",
]
