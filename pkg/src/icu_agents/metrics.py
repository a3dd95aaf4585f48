"""Discrimination and calibration metrics, bootstrap intervals, debate consensus tables."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .core import HarnessError, PredictionRecord, ValidationError

log = logging.getLogger(__name__)


class DegenerateClasses(HarnessError):
    pass


class EmptyInput(HarnessError):
    pass


class TooManyDegenerateResamples(HarnessError):
    pass


@dataclass(frozen=True)
class ScoredSample:
    probability: float
    label: bool

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ValidationError(f"probability {self.probability} outside [0, 1]")


def _arrays(samples) -> tuple[np.ndarray, np.ndarray]:
    samples = list(samples)
    probs = np.fromiter((s.probability for s in samples), dtype=float, count=len(samples))
    labels = np.fromiter((bool(s.label) for s in samples), dtype=bool, count=len(samples))
    return probs, labels


def samples_from(probabilities: Iterable[float], labels: Iterable) -> list[ScoredSample]:
    return [ScoredSample(float(p), bool(y)) for p, y in zip(probabilities, labels)]


def _auroc(probs: np.ndarray, labels: np.ndarray) -> float:
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateClasses("AUROC needs at least one positive and one negative")
    # midranks turn the rank-sum into wins + ties/2 over all positive-negative pairs
    order = np.argsort(probs, kind="mergesort")
    sorted_p = probs[order]
    boundaries = np.flatnonzero(np.diff(sorted_p)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [probs.size]))
    group = np.repeat(np.arange(starts.size), ends - starts)
    ranks = np.empty(probs.size, dtype=float)
    ranks[order] = ((starts + ends + 1) / 2.0)[group]
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _auprc(probs: np.ndarray, labels: np.ndarray) -> float:
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise DegenerateClasses("AUPRC needs at least one positive")
    order = np.argsort(-probs, kind="mergesort")
    p, y = probs[order], labels[order]
    # one threshold per distinct score: take cumulative counts at the end of each tie group
    last = np.concatenate((np.flatnonzero(np.diff(p)), [p.size - 1]))
    tp = np.cumsum(y)[last].astype(float)
    seen = (last + 1).astype(float)
    precision = tp / seen
    recall_gain = np.diff(np.concatenate(([0.0], tp))) / n_pos
    return float(np.sum(recall_gain * precision))


def _ece(probs: np.ndarray, labels: np.ndarray, n_bins: int) -> float:
    if n_bins < 1:
        raise ValidationError("n_bins must be at least 1")
    if probs.size == 0:
        raise EmptyInput("ECE of an empty sample set")
    bins = np.minimum(np.floor(probs * n_bins).astype(int), n_bins - 1)
    total = 0.0
    for b in np.unique(bins):
        mask = bins == b
        # n_b/N * |mean_p - rate| == |sum_p - sum_y| / N
        gap = abs(math.fsum(probs[mask]) - float(labels[mask].sum()))
        total += gap
    return total / probs.size


def auroc(samples: Sequence[ScoredSample]) -> float:
    return _auroc(*_arrays(samples))


def auprc(samples: Sequence[ScoredSample]) -> float:
    """Average precision with ties grouped at one threshold."""
    return _auprc(*_arrays(samples))


def ece(samples: Sequence[ScoredSample], n_bins: int = 10) -> float:
    """Binary expected calibration error over equal-width bins (last bin right-closed)."""
    return _ece(*_arrays(samples), n_bins)


METRICS = ("auroc", "auprc", "ece")


def _metric_fn(metric: str, n_bins: int) -> Callable[[np.ndarray, np.ndarray], float]:
    if metric == "auroc":
        return _auroc
    if metric == "auprc":
        return _auprc
    if metric == "ece":
        return lambda p, y: _ece(p, y, n_bins)
    raise ValidationError(f"unknown metric {metric!r}")


def _degenerate(metric: str, labels: np.ndarray) -> bool:
    n_pos = int(labels.sum())
    if metric == "auroc":
        return n_pos == 0 or n_pos == labels.size
    if metric == "auprc":
        return n_pos == 0
    return labels.size == 0


CI_METHODS = ("percentile", "bias_corrected")
# The plug-in ECE is bounded below by zero and biased upward, so on well calibrated
# data every resample can score above the point estimate and a plain percentile
# interval would exclude it. Shifting the quantiles by the bootstrap bias estimate
# recentres the interval on the point.
DEFAULT_CI_METHOD = {"auroc": "percentile", "auprc": "percentile", "ece": "bias_corrected"}


def bootstrap_ci(metric: str, samples: Sequence[ScoredSample], n_resamples: int = 1000, seed: int = 0,
                 level: float = 0.95, n_bins: int = 10, max_redraws: int = 100,
                 method: Optional[str] = None) -> tuple[float, float]:
    """Bootstrap interval: percentile, or percentile shifted by the estimated bias.

    Each resample draws from its own generator spawned from ``seed``, so the
    result does not depend on evaluation order.
    """
    method = method or DEFAULT_CI_METHOD.get(metric, "percentile")
    if method not in CI_METHODS:
        raise ValidationError(f"unknown interval method {method!r}")
    fn = _metric_fn(metric, n_bins)
    probs, labels = _arrays(samples)
    if _degenerate(metric, labels):
        raise DegenerateClasses(f"{metric} is undefined on these samples")
    n = probs.size
    values = []
    skipped = 0
    for child in np.random.SeedSequence(seed).spawn(n_resamples):
        rng = np.random.default_rng(child)
        for _ in range(max_redraws):
            idx = rng.integers(0, n, n)
            if not _degenerate(metric, labels[idx]):
                values.append(fn(probs[idx], labels[idx]))
                break
        else:
            skipped += 1
    if skipped:
        log.warning("%s bootstrap: skipped %d degenerate resamples", metric, skipped)
    if skipped > n_resamples // 2 or not values:
        raise TooManyDegenerateResamples(f"{skipped} of {n_resamples} resamples were degenerate")
    alpha = (1.0 - level) / 2.0
    boot = np.asarray(values)
    low, high = np.quantile(boot, [alpha, 1.0 - alpha])
    if method == "bias_corrected":
        bias = math.fsum(boot) / boot.size - fn(probs, labels)
        low, high = max(low - bias, 0.0), high - bias
    return float(low), float(high)


@dataclass(frozen=True)
class MetricValue:
    point: Optional[float]
    ci_low: Optional[float] = None
    ci_high: Optional[float] = None

    def to_dict(self) -> dict:
        return {"point": self.point, "ci_low": self.ci_low, "ci_high": self.ci_high}


@dataclass(frozen=True)
class MetricReport:
    auroc: MetricValue
    auprc: MetricValue
    ece: MetricValue
    n_samples: int
    n_error_records: int
    ci_method: str = ""

    def to_dict(self) -> dict:
        return {
            "auroc": self.auroc.to_dict(),
            "auprc": self.auprc.to_dict(),
            "ece": self.ece.to_dict(),
            "n_samples": self.n_samples,
            "n_error_records": self.n_error_records,
            "ci_method": self.ci_method,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricReport":
        return cls(*(MetricValue(**d[m]) for m in METRICS), d["n_samples"], d["n_error_records"],
                   d.get("ci_method", ""))


def metric_report(samples: Sequence[ScoredSample], n_error_records: int = 0, *, n_bins: int = 10,
                  n_resamples: int = 1000, seed: int = 0, level: float = 0.95) -> MetricReport:
    """Point estimates and bootstrap intervals; a metric undefined on the data is reported as None."""
    values = {}
    for metric in METRICS:
        fn = _metric_fn(metric, n_bins)
        probs, labels = _arrays(samples)
        if probs.size == 0 or _degenerate(metric, labels):
            values[metric] = MetricValue(None)
            continue
        point = fn(probs, labels)
        try:
            low, high = bootstrap_ci(metric, samples, n_resamples, seed, level, n_bins)
        except TooManyDegenerateResamples as exc:
            log.warning("no interval for %s: %s", metric, exc)
            low = high = None
        values[metric] = MetricValue(point, low, high)
    method = (f"bootstrap, {n_resamples} resamples, level {level}, seed {seed}; percentile for AUROC/AUPRC, "
              f"bias-corrected percentile for ECE")
    return MetricReport(values["auroc"], values["auprc"], values["ece"], len(samples), n_error_records, method)


def report_from_records(records: Iterable[PredictionRecord], labels: Mapping[str, bool], **kwargs) -> MetricReport:
    """Score records against labels; error records are excluded and counted, fallbacks kept."""
    samples, errors = [], 0
    for rec in records:
        if rec.parse_status == "error":
            errors += 1
            continue
        samples.append(ScoredSample(rec.probability, labels[rec.encounter_id]))
    return metric_report(samples, errors, **kwargs)


@dataclass(frozen=True)
class ConsensusStats:
    rows: tuple[tuple[Union[int, str], int, float], ...]  # (round, count, percent)
    total: int
    auroc: Optional[float]

    def percent(self, round_id) -> float:
        return next(p for r, _, p in self.rows if r == round_id)

    def count(self, round_id) -> int:
        return next(c for r, c, _ in self.rows if r == round_id)

    def to_dict(self) -> dict:
        return {
            "rows": [{"round": r, "count": c, "percent": p} for r, c, p in self.rows],
            "total": self.total,
            "auroc": self.auroc,
        }


def consensus_stats(traces, samples: Sequence[ScoredSample] = (), max_rounds: Optional[int] = None) -> ConsensusStats:
    """Share of debates reaching consensus at each round (or never, ``MAX``)."""
    traces = list(traces)
    if not traces:
        raise EmptyInput("no debate traces")
    if max_rounds is None:
        max_rounds = max(getattr(t, "max_rounds", 3) for t in traces)
    counts = {r: 0 for r in range(1, max_rounds + 1)}
    counts["MAX"] = 0
    for t in traces:
        counts[t.consensus_round] += 1
    total = len(traces)
    rows = tuple((r, c, 100.0 * c / total) for r, c in counts.items())
    score = None
    if samples:
        try:
            score = auroc(samples)
        except DegenerateClasses:
            score = None
    return ConsensusStats(rows, total, score)
