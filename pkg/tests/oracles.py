"""Slow, obviously-correct reference implementations used only by the tests."""

from __future__ import annotations

import random


def auroc_pairs(probs, labels):
    """Exhaustive positive/negative pair counting: wins + ties/2 over n_pos*n_neg."""
    pos = [p for p, y in zip(probs, labels) if y]
    neg = [p for p, y in zip(probs, labels) if not y]
    score = 0.0
    for a in pos:
        for b in neg:
            score += 1.0 if a > b else 0.5 if a == b else 0.0
    return score / (len(pos) * len(neg))


def auprc_rank_walk(probs, labels):
    """Walk thresholds from the highest distinct score down; sum precision times recall step."""
    n_pos = sum(1 for y in labels if y)
    ap, prev_recall = 0.0, 0.0
    for t in sorted(set(probs), reverse=True):
        tp = sum(1 for p, y in zip(probs, labels) if p >= t and y)
        seen = sum(1 for p in probs if p >= t)
        recall = tp / n_pos
        ap += (recall - prev_recall) * (tp / seen)
        prev_recall = recall
    return ap


def ece_bins(probs, labels, n_bins=10):
    bins = {}
    for p, y in zip(probs, labels):
        b = min(int(p * n_bins), n_bins - 1)
        bins.setdefault(b, []).append((p, y))
    total = 0.0
    for members in bins.values():
        conf = sum(p for p, _ in members) / len(members)
        rate = sum(1 for _, y in members if y) / len(members)
        total += len(members) / len(probs) * abs(conf - rate)
    return total


def random_dataset(seed, n=200, ties=True):
    """Scores on a coarse grid (so ties occur) or continuous; both classes present."""
    rng = random.Random(seed)
    while True:
        if ties:
            probs = [rng.randint(0, 40) / 40 for _ in range(n)]
        else:
            probs = [rng.random() for _ in range(n)]
        labels = [rng.random() < 0.2 + 0.6 * p for p in probs]
        if 0 < sum(labels) < n:
            return probs, labels
