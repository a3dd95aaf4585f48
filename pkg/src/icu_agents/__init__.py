"""Benchmark harness for LLM/VLM agents on multimodal ICU risk prediction."""

from .core import (
    BUILTIN_TASKS,
    LENGTH_OF_STAY,
    MORTALITY,
    CxrRef,
    EhrEvent,
    ModalityKind,
    PatientEncounter,
    PredictionRecord,
    RrDoc,
    TaskSpec,
    canonical_variables,
    decide,
)
from .ingest import Cohort, generate_synthetic_cohort, load_cohort, write_cohort

__version__ = "0.1.0"

__all__ = [
    "BUILTIN_TASKS", "LENGTH_OF_STAY", "MORTALITY", "Cohort", "CxrRef", "EhrEvent", "ModalityKind",
    "PatientEncounter", "PredictionRecord", "RrDoc", "TaskSpec", "canonical_variables", "decide",
    "generate_synthetic_cohort", "load_cohort", "write_cohort",
]
