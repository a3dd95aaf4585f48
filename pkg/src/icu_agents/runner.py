"""Experiment execution: config, per-encounter persistence, resume, manifests, ablations."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import re
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import yaml

from .core import (
    BUILTIN_TASKS,
    Exchange,
    HarnessError,
    ModalityKind,
    PatientEncounter,
    PredictionRecord,
    TaskSpec,
    ordered,
    parse_modalities,
)
from .gateway import BackendSpec, Gateway, HttpBackend, load_mock_backend
from .ingest import Cohort, apply_window_and_pairing, ensure_split
from .metrics import DegenerateClasses, MetricReport, auroc, report_from_records, samples_from
from .protocols import (
    AgentRoster,
    ProtocolEnv,
    ProtocolKind,
    StrategyKind,
    get_plugin,
    multimodal_roster,
    render_exemplars,
    run_debate,
    run_majority_vote,
    run_meta_prompt,
    run_single,
    run_traj_coa,
    run_weighted_vote,
    select_exemplars,
    unimodal_roster,
)
from .serialize import SerializationMode
from .templates import TemplateSet

log = logging.getLogger(__name__)


class ConfigError(HarnessError):
    pass


# fields that do not change any prediction; excluded from the resume key
_RUNTIME_FIELDS = {"worker_count", "cache_dir", "output_dir", "max_concurrent", "requests_per_minute",
                   "max_retries", "backoff_base_ms", "auth_token_env", "bootstrap_n", "n_bins", "max_samples"}


@dataclass
class ExperimentConfig:
    task_id: str = "mortality"
    protocol: str = "single_multimodal"
    strategy: str = "zero_shot"
    modalities: frozenset = frozenset({ModalityKind.PS})
    serialization_mode: str = "log"
    model_id: str = "mock"
    backend_url: Optional[str] = None
    mock_script: Optional[str] = None
    auth_token_env: Optional[str] = None
    max_concurrent: int = 4
    requests_per_minute: int = 600
    max_retries: int = 3
    backoff_base_ms: int = 500
    seed: int = 0
    worker_count: int = 4
    cache_dir: Optional[str] = None
    output_dir: str = "runs/latest"
    max_samples: Optional[int] = None
    n_bins: int = 10
    bootstrap_n: int = 1000
    temperature: float = 0.0
    sc_temperature: float = 0.7
    max_tokens: int = 1024
    max_rounds: int = 3
    chunk_steps: int = 100
    aggregation: str = "probability"
    peer_char_limit: int = 600
    template_dir: Optional[str] = None
    # custom binary task (used when task_id is not a built-in)
    task_name: Optional[str] = None
    positive_meaning: Optional[str] = None
    observation_window_hours: int = 48
    decision_threshold: float = 0.5

    def __post_init__(self):
        self.modalities = parse_modalities(self.modalities)
        self.validate()

    @property
    def protocol_kind(self) -> ProtocolKind:
        if self.protocol.startswith("plugin:"):
            return ProtocolKind.PLUGIN
        try:
            return ProtocolKind(self.protocol)
        except ValueError:
            raise ConfigError(f"unknown protocol {self.protocol!r}") from None

    def validate(self):
        if ModalityKind.PS not in self.modalities:
            raise ConfigError("modalities must include PS, the base modality")
        if self.worker_count < 1:
            raise ConfigError("worker_count must be at least 1")
        if self.max_samples is not None and self.max_samples < 1:
            raise ConfigError("max_samples must be positive")
        try:
            StrategyKind(self.strategy)
            SerializationMode(self.serialization_mode)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        kind = self.protocol_kind
        if kind in (ProtocolKind.MAJORITY_VOTE, ProtocolKind.WEIGHTED_VOTE, ProtocolKind.DEBATE_UNIMODAL) \
                and len(self.modalities) < 2:
            raise ConfigError(
                f"{kind.value} pools one agent per modality and needs at least two modalities; "
                f"got {{{', '.join(m.value for m in ordered(self.modalities))}}}. "
                "Use single_unimodal or single_multimodal for a single modality."
            )
        if kind is ProtocolKind.SINGLE_UNIMODAL and self.modalities != frozenset({ModalityKind.PS}):
            raise ConfigError("single_unimodal uses the patient summary only; set modalities to ps")
        if self.aggregation not in ("probability", "hard_label"):
            raise ConfigError(f"unknown aggregation {self.aggregation!r}")
        self.task()

    def task(self) -> TaskSpec:
        if self.task_id in BUILTIN_TASKS and self.positive_meaning is None:
            return BUILTIN_TASKS[self.task_id]
        if not self.positive_meaning:
            raise ConfigError(f"task {self.task_id!r} is not built in; set positive_meaning (and task_name)")
        return TaskSpec(self.task_id, self.task_name or self.task_id, self.positive_meaning,
                        self.observation_window_hours, self.decision_threshold)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["modalities"] = [m.value for m in ordered(self.modalities)]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**data)

    @classmethod
    def from_file(cls, path, **overrides) -> "ExperimentConfig":
        """Load a YAML key-value file; non-None overrides win."""
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a mapping of config keys")
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(data)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def _digest(obj: Any) -> str:
    blob = json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def config_hash(config: ExperimentConfig) -> str:
    return _digest(config.to_dict())


def run_key(config: ExperimentConfig, templates: TemplateSet, provenance: str) -> str:
    fields = {k: v for k, v in config.to_dict().items() if k not in _RUNTIME_FIELDS}
    return _digest({"config": fields, "templates": templates.digest, "cohort": provenance})


@dataclass
class RunManifest:
    config_hash: str
    template_hash: str
    cohort_provenance: str
    run_key: str
    records: dict[str, str]
    wall_time_s: float
    gateway_calls: int
    cache_hits: int
    uncacheable_calls: int
    resumed_records: int
    error_records: int
    weights: Optional[dict] = None
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class RunResult:
    manifest: RunManifest
    report: MetricReport
    records: list[PredictionRecord]
    output_dir: Path


def _atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def record_filename(encounter_id: str) -> str:
    safe = re.sub(r"[^A-Za-z0-9._-]", "_", encounter_id)
    if safe != encounter_id:
        safe += "-" + hashlib.sha1(encounter_id.encode()).hexdigest()[:8]
    return f"{safe}.json"


def dumps_record(record: PredictionRecord) -> str:
    return json.dumps(record.to_dict(), sort_keys=True, indent=1, ensure_ascii=False) + "\n"


def build_backend(config: ExperimentConfig):
    if config.mock_script:
        return load_mock_backend(config.mock_script)
    if config.backend_url:
        return HttpBackend(BackendSpec(
            endpoint_url=config.backend_url,
            auth_token_env=config.auth_token_env,
            max_concurrent=config.max_concurrent,
            requests_per_minute=config.requests_per_minute,
            max_retries=config.max_retries,
            backoff_base_ms=config.backoff_base_ms,
        ))
    raise ConfigError("configure either backend_url or mock_script")


def make_env(config: ExperimentConfig, gateway, templates: TemplateSet) -> ProtocolEnv:
    return ProtocolEnv(
        gateway=gateway,
        task=config.task(),
        templates=templates,
        model_id=config.model_id,
        max_tokens=config.max_tokens,
        temperature=config.temperature,
        sc_temperature=config.sc_temperature,
        seed=config.seed,
        mode=SerializationMode(config.serialization_mode),
        peer_char_limit=config.peer_char_limit,
    )


def estimate_weights(config: ExperimentConfig, val: Cohort, env: ProtocolEnv) -> dict[str, float]:
    """Per-agent weights = each specialist's zero-shot AUROC on the validation split."""
    task_id = env.task.task_id
    weights = {}
    for agent in unimodal_roster(config.modalities).agents:
        probs, labels = [], []
        for enc in val.encounters:
            if task_id not in enc.labels or not agent.modalities <= enc.available_modalities():
                continue
            ctx = env.context(enc, agent.modalities, require_base=False)
            rec = run_single(StrategyKind.ZERO_SHOT, ctx, env, encounter_id=enc.encounter_id,
                             agent_id=agent.agent_id, system=env.persona(agent))
            if rec.parse_status != "error":
                probs.append(rec.probability)
                labels.append(enc.labels[task_id])
        try:
            weights[agent.agent_id] = auroc(samples_from(probs, labels))
        except DegenerateClasses:
            log.warning("validation split cannot score %s; using weight 1.0", agent.agent_id)
            weights[agent.agent_id] = 1.0
    if sum(weights.values()) <= 0:
        weights = {k: 1.0 for k in weights}
    return weights


class ProtocolRunner:
    """Runs the configured protocol on one encounter."""

    def __init__(self, config: ExperimentConfig, env: ProtocolEnv, exemplars=None, weights=None):
        self.config = config
        self.env = env
        self.exemplars = exemplars
        self.weights = weights

    def __call__(self, enc: PatientEncounter) -> PredictionRecord:
        cfg, env = self.config, self.env
        kind = cfg.protocol_kind
        mods = cfg.modalities
        if kind in (ProtocolKind.SINGLE_UNIMODAL, ProtocolKind.SINGLE_MULTIMODAL):
            ctx = env.context(enc, mods)
            return run_single(cfg.strategy, ctx, env, encounter_id=enc.encounter_id,
                              exemplars=self.exemplars, protocol_id=kind.value)
        if kind is ProtocolKind.MAJORITY_VOTE:
            return run_majority_vote(unimodal_roster(mods), enc, env, aggregation=cfg.aggregation)
        if kind is ProtocolKind.WEIGHTED_VOTE:
            roster = AgentRoster(unimodal_roster(mods).agents, self.weights)
            return run_weighted_vote(roster, enc, env, aggregation=cfg.aggregation)
        if kind is ProtocolKind.DEBATE_UNIMODAL:
            return run_debate(unimodal_roster(mods), enc, env, max_rounds=cfg.max_rounds,
                              protocol_id=kind.value)[0]
        if kind is ProtocolKind.DEBATE_MULTIMODAL:
            return run_debate(multimodal_roster(mods), enc, env, max_rounds=cfg.max_rounds,
                              protocol_id=kind.value)[0]
        if kind is ProtocolKind.META_PROMPT:
            return run_meta_prompt(enc, env, modalities=mods)
        if kind is ProtocolKind.TRAJ_COA:
            return run_traj_coa(enc, env, chunk_size=cfg.chunk_steps, modalities=mods)
        return get_plugin(cfg.protocol.split(":", 1)[1])(enc, env, mods)


def _error_record(enc: PatientEncounter, task: TaskSpec, protocol_id: str, exc: Exception) -> PredictionRecord:
    note = f"{type(exc).__name__}: {exc}"
    return PredictionRecord.build(enc.encounter_id, task, protocol_id, 0.5, "error",
                                  (Exchange("harness", "failure", note=note),))


def run_experiment(config: ExperimentConfig, cohort: Cohort, *, backend=None,
                   templates: Optional[TemplateSet] = None) -> RunResult:
    """Run the configured protocol over the test split, resuming from persisted records."""
    started = time.monotonic()
    templates = templates or TemplateSet.load(config.template_dir)
    task = config.task()
    out = Path(config.output_dir)
    key = run_key(config, templates, cohort.provenance)
    run_file = out / "run.json"
    if run_file.exists():
        previous = json.loads(run_file.read_text(encoding="utf-8"))
        if previous.get("run_key") != key:
            raise ConfigError(f"{out} holds records of a different run; choose another output directory")
    else:
        _atomic_write(run_file, json.dumps({"run_key": key, "config": config.to_dict()}, sort_keys=True, indent=1))

    paired = apply_window_and_pairing(cohort, task)
    train, val, test = ensure_split(paired, seed=config.seed)
    evaluable = sorted((e for e in test.encounters if task.task_id in e.labels), key=lambda e: e.encounter_id)
    if len(evaluable) < len(test):
        log.warning("%d test encounters lack a %s label and are skipped", len(test) - len(evaluable), task.task_id)
    if config.max_samples is not None:
        evaluable = evaluable[: config.max_samples]

    gateway = Gateway(backend if backend is not None else build_backend(config), config.cache_dir)
    env = make_env(config, gateway, templates)

    exemplars = None
    if config.strategy == StrategyKind.FEW_SHOT.value and config.protocol_kind in (
            ProtocolKind.SINGLE_UNIMODAL, ProtocolKind.SINGLE_MULTIMODAL):
        exemplars = render_exemplars(env, select_exemplars(train, task.task_id), config.modalities)

    weights = None
    if config.protocol_kind is ProtocolKind.WEIGHTED_VOTE:
        stored = json.loads(run_file.read_text(encoding="utf-8")).get("weights")
        weights = stored or estimate_weights(config, val, env)
        if not stored:
            meta = json.loads(run_file.read_text(encoding="utf-8"))
            meta["weights"] = weights
            _atomic_write(run_file, json.dumps(meta, sort_keys=True, indent=1))

    runner = ProtocolRunner(config, env, exemplars, weights)
    record_dir = out / "records"
    records: dict[str, PredictionRecord] = {}
    pending = []
    for enc in evaluable:
        path = record_dir / record_filename(enc.encounter_id)
        if path.exists():
            records[enc.encounter_id] = PredictionRecord.from_dict(json.loads(path.read_text(encoding="utf-8")))
        else:
            pending.append(enc)
    resumed = len(records)

    def work(enc: PatientEncounter) -> PredictionRecord:
        try:
            rec = runner(enc)
        except Exception as exc:  # one encounter never aborts the sweep
            log.warning("encounter %s failed: %s", enc.encounter_id, exc)
            rec = _error_record(enc, task, config.protocol, exc)
        _atomic_write(record_dir / record_filename(enc.encounter_id), dumps_record(rec))
        return rec

    if config.worker_count == 1:
        for enc in pending:
            records[enc.encounter_id] = work(enc)
    else:
        with ThreadPoolExecutor(max_workers=config.worker_count) as pool:
            futures = {pool.submit(work, enc): enc for enc in pending}
            for fut in as_completed(futures):
                records[futures[fut].encounter_id] = fut.result()

    ordered_records = [records[e.encounter_id] for e in evaluable]
    labels = {e.encounter_id: e.labels[task.task_id] for e in evaluable}
    report = report_from_records(ordered_records, labels, n_bins=config.n_bins,
                                 n_resamples=config.bootstrap_n, seed=config.seed)
    manifest = RunManifest(
        config_hash=config_hash(config),
        template_hash=templates.digest,
        cohort_provenance=cohort.provenance,
        run_key=key,
        records={e.encounter_id: f"records/{record_filename(e.encounter_id)}" for e in evaluable},
        wall_time_s=round(time.monotonic() - started, 3),
        gateway_calls=gateway.stats.network_calls,
        cache_hits=gateway.stats.cache_hits,
        uncacheable_calls=gateway.stats.uncacheable,
        resumed_records=resumed,
        error_records=sum(r.parse_status == "error" for r in ordered_records),
        weights=weights,
        config=config.to_dict(),
    )
    _atomic_write(out / "metrics.json", json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n")
    _atomic_write(out / "manifest.json", json.dumps(manifest.to_dict(), sort_keys=True, indent=1) + "\n")
    return RunResult(manifest, report, ordered_records, out)


def load_run(output_dir) -> tuple[RunManifest, MetricReport, list[PredictionRecord]]:
    out = Path(output_dir)
    manifest = RunManifest(**json.loads((out / "manifest.json").read_text(encoding="utf-8")))
    report = MetricReport.from_dict(json.loads((out / "metrics.json").read_text(encoding="utf-8")))
    records = [PredictionRecord.from_dict(json.loads((out / rel).read_text(encoding="utf-8")))
               for rel in manifest.records.values()]
    return manifest, report, records


# nested ablation sets: {PS} ⊂ {PS,CXR} ⊂ {PS,CXR,RR} ⊂ all
DEFAULT_ABLATION_SETS = (
    frozenset({ModalityKind.PS}),
    frozenset({ModalityKind.PS, ModalityKind.CXR}),
    frozenset({ModalityKind.PS, ModalityKind.CXR, ModalityKind.RR}),
    frozenset(ModalityKind),
)


@dataclass
class AblationRow:
    arch: str
    protocol: str
    strategy: str
    modalities: tuple[str, ...]
    report: MetricReport
    backbone: str
    output_dir: str


def run_ablation_sweep(base: ExperimentConfig, modality_sets: Sequence = DEFAULT_ABLATION_SETS,
                       cohort: Optional[Cohort] = None, *, backend=None,
                       templates: Optional[TemplateSet] = None) -> list[AblationRow]:
    """Single-agent zero-shot for every set, majority vote for every set with two or more modalities."""
    sets = [parse_modalities(s) for s in modality_sets]
    for s in sets:
        if ModalityKind.PS not in s:
            raise ConfigError(f"ablation set {sorted(m.value for m in s)} lacks PS")
    rows = []
    root = Path(base.output_dir)
    for mods in sets:
        names = tuple(m.value for m in ordered(mods))
        tag = "-".join(n.lower() for n in names)
        plans = [("Single (ZS)", "single_unimodal" if len(mods) == 1 else "single_multimodal")]
        if len(mods) >= 2:
            plans.append(("Multi (MV)", "majority_vote"))
        for arch, protocol in plans:
            cfg = base.replace(protocol=protocol, strategy="zero_shot", modalities=mods,
                               output_dir=str(root / f"{protocol}_{tag}"))
            result = run_experiment(cfg, cohort, backend=backend, templates=templates)
            rows.append(AblationRow(arch, protocol, "zero_shot", names, result.report, base.model_id,
                                    str(result.output_dir)))
    return rows
