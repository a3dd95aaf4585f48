"""Versioned prompt template sets loaded from plain-text files."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional

from ..core import HarnessError

DEFAULT_DIR = Path(__file__).parent

REQUIRED = (
    "task", "answer", "few_shot_intro", "few_shot_example", "few_shot_target", "cot_reason",
    "cot_answer", "refine_critique", "refine_final", "agent_persona", "debate", "peer_message",
    "meta_decide", "meta_expert", "meta_final", "traj_worker", "traj_memory",
)


class TemplateError(HarnessError):
    pass


@dataclass(frozen=True)
class TemplateSet:
    texts: Mapping[str, str]
    source: str = "builtin"

    @classmethod
    def load(cls, directory: Optional[Path] = None) -> "TemplateSet":
        directory = Path(directory) if directory else DEFAULT_DIR
        texts = {p.stem: p.read_text(encoding="utf-8").rstrip("\n") for p in sorted(directory.glob("*.txt"))}
        missing = [name for name in REQUIRED if name not in texts]
        if missing:
            raise TemplateError(f"template directory {directory} lacks: {', '.join(missing)}")
        return cls(texts, "builtin" if directory == DEFAULT_DIR else str(directory))

    @property
    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.texts):
            h.update(name.encode())
            h.update(b"\0")
            h.update(self.texts[name].encode("utf-8"))
            h.update(b"\0")
        return h.hexdigest()

    def render(self, name: str, **values) -> str:
        try:
            return self.texts[name].format_map(values)
        except KeyError as exc:
            raise TemplateError(f"template {name!r} needs placeholder {exc}") from None
