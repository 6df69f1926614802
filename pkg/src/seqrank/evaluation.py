"""Offline ranking metrics: the linear final score over head probabilities
and HIT@K aggregated per user over recommendation chunks."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .dataset import HEAD_NAMES, TrainingExample
from .losses import HeadConfig

# Heads where a lower HIT@K is better (negative engagement).
LOWER_IS_BETTER = frozenset({"hide"})


@dataclass
class ScoredItem:
    user_id: int
    chunk_id: int
    pin_id: int
    probs: np.ndarray  # (H,) in [0, 1]
    labels: np.ndarray  # (H,) in {0, 1}


def scored_items_from(examples: list[TrainingExample], probs: np.ndarray) -> list[ScoredItem]:
    """Pair eval examples with model probabilities, pin ids by input order."""
    return [
        ScoredItem(ex.user_id, ex.chunk_id, pin_id, probs[pin_id], ex.labels)
        for pin_id, ex in enumerate(examples)
    ]


def final_score(item: ScoredItem, cfg: HeadConfig) -> float:
    """Utility-weighted sum of head probabilities."""
    return float(np.dot(np.asarray(cfg.utility_weights, np.float64), item.probs))


def hit_at_k(
    items: list[ScoredItem],
    k: int = 3,
    head: str = "repin",
    cfg: HeadConfig = HeadConfig(),
) -> float:
    """Sum over (user, chunk) groups of label-1 items in the score top-k,
    divided by the number of distinct users.

    Chunks are sorted by final score descending with ties broken by pin id
    ascending, so the metric is independent of input order.
    """
    h = cfg.index(head)
    chunks: dict[tuple[int, int], list[ScoredItem]] = defaultdict(list)
    for item in items:
        chunks[(item.user_id, item.chunk_id)].append(item)
    if not chunks:
        return 0.0

    users = {u for u, _ in chunks}
    total = 0
    for group in chunks.values():
        ranked = sorted(group, key=lambda it: (-final_score(it, cfg), it.pin_id))
        total += sum(int(it.labels[h]) for it in ranked[:k])
    return total / len(users)


def hit_report(items: list[ScoredItem], k: int = 3, cfg: HeadConfig = HeadConfig()) -> dict[str, float]:
    return {head: hit_at_k(items, k, head, cfg) for head in cfg.names}


def render_report(
    name: str,
    hits: dict[str, float],
    baseline_name: str | None = None,
    baseline: dict[str, float] | None = None,
    k: int = 3,
) -> str:
    """Text table of per-head HIT@k, optionally with deltas vs a baseline."""
    lines = [f"HIT@{k} report: {name}"]
    header = f"{'head':>10}  {'hit':>10}"
    if baseline is not None:
        header += f"  {'baseline':>10}  {'delta':>9}  direction"
        lines[0] += f" (baseline: {baseline_name})"
    lines.append(header)
    lines.append("-" * len(header))
    for head, value in hits.items():
        row = f"{head:>10}  {value:10.4f}"
        if baseline is not None:
            base = baseline[head]
            delta = (value - base) / base * 100 if base else float("inf") if value else 0.0
            direction = "lower is better" if head in LOWER_IS_BETTER else "higher is better"
            row += f"  {base:10.4f}  {delta:+8.2f}%  {direction}"
        lines.append(row)
    return "\n".join(lines)


__all__ = [
    "HEAD_NAMES",
    "LOWER_IS_BETTER",
    "ScoredItem",
    "final_score",
    "hit_at_k",
    "hit_report",
    "render_report",
    "scored_items_from",
]
