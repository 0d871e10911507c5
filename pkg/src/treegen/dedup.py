"""Sibling-candidate selection: greedy MMR plus a near-duplicate cutoff.

Candidate pools are small (a few hundred at most), so everything here is the
plain O(n*k) greedy algorithm with exact arithmetic-order determinism: ties
always resolve to the lowest candidate index.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .backends import EmbeddingVector
from .errors import ConfigError


def cosine(a: EmbeddingVector, b: EmbeddingVector) -> float:
    """Cosine similarity in [-1, 1]; a zero vector has similarity 0 by definition."""
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    dot = 0.0
    norm_a = 0.0
    norm_b = 0.0
    for x, y in zip(a.values, b.values):
        dot += x * y
        norm_a += x * x
        norm_b += y * y
    if norm_a == 0.0 or norm_b == 0.0:
        return 0.0
    return dot / (norm_a**0.5 * norm_b**0.5)


@dataclass(frozen=True)
class MmrSelection:
    """Result of one selection pass over a candidate pool.

    ``pool_scores`` holds, for every candidate, its MMR score against the
    final selected set (the pick-step score for selected candidates); the
    duplicate filter uses it as the backfill order.
    """

    selected: tuple[int, ...]
    scores: tuple[float, ...]
    dropped_as_duplicates: tuple[int, ...]
    pool_scores: tuple[float, ...] = ()


def mmr_select(candidates: Sequence[EmbeddingVector], query: EmbeddingVector,
               k: int, lambda_: float) -> MmrSelection:
    """Greedy maximal-marginal-relevance selection of ``k`` candidates.

    The first pick maximizes relevance to the query; each later pick maximizes
    lambda*relevance - (1-lambda)*max-similarity-to-selected. Ties break to
    the lowest index.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1 (got {k})")
    if k > len(candidates):
        raise ConfigError(f"k={k} exceeds candidate pool size {len(candidates)}")
    if not 0.0 <= lambda_ <= 1.0:
        raise ConfigError(f"lambda must be in [0, 1] (got {lambda_})")

    relevance = [cosine(c, query) for c in candidates]
    n = len(candidates)
    selected: list[int] = []
    scores: list[float] = []
    # max similarity of each candidate to the selected set so far; similarities
    # may be negative, so the empty-set sentinel must be -inf, not 0
    max_sim = [float("-inf")] * n

    for step in range(k):
        best_idx = -1
        best_score = 0.0
        # scan in index order with strict >, so ties resolve to the lowest index
        for i in range(n):
            if i in selected:
                continue
            if step == 0:
                score = relevance[i]
            else:
                score = lambda_ * relevance[i] - (1.0 - lambda_) * max_sim[i]
            if best_idx == -1 or score > best_score:
                best_idx = i
                best_score = score
        selected.append(best_idx)
        scores.append(best_score)
        for i in range(n):
            if i not in selected:
                sim = cosine(candidates[i], candidates[best_idx])
                if sim > max_sim[i]:
                    max_sim[i] = sim

    pool_scores = []
    for i in range(n):
        if i in selected:
            pool_scores.append(scores[selected.index(i)])
        else:
            pool_scores.append(lambda_ * relevance[i] - (1.0 - lambda_) * max_sim[i])

    return MmrSelection(selected=tuple(selected), scores=tuple(scores),
                        dropped_as_duplicates=(), pool_scores=tuple(pool_scores))


def near_duplicate_filter(candidates: Sequence[EmbeddingVector],
                          selection: MmrSelection, threshold: float) -> MmrSelection:
    """Drop selected candidates that near-duplicate an earlier kept one.

    Scans the selection in pick order, dropping any candidate whose cosine to
    an already kept candidate reaches ``threshold``, then backfills from the
    unselected pool in MMR-score order under the same rule. Thresholds above
    1 disable the filter entirely.
    """
    if not 0.0 < threshold <= 1.01:
        raise ConfigError(f"threshold must be in (0, 1.01] (got {threshold})")
    if threshold > 1.0:
        return selection

    target = len(selection.selected)
    kept: list[int] = []
    kept_scores: list[float] = []
    dropped = list(selection.dropped_as_duplicates)

    def is_duplicate(idx: int) -> bool:
        return any(cosine(candidates[idx], candidates[j]) >= threshold for j in kept)

    for idx, score in zip(selection.selected, selection.scores):
        if is_duplicate(idx):
            dropped.append(idx)
        else:
            kept.append(idx)
            kept_scores.append(score)

    if len(kept) < target:
        in_selection = set(selection.selected)
        backfill = [i for i in range(len(candidates)) if i not in in_selection]
        backfill.sort(key=lambda i: (-selection.pool_scores[i], i) if selection.pool_scores
                      else (0, i))
        for idx in backfill:
            if len(kept) >= target:
                break
            if is_duplicate(idx):
                dropped.append(idx)
            else:
                kept.append(idx)
                kept_scores.append(selection.pool_scores[idx]
                                   if selection.pool_scores else 0.0)

    return MmrSelection(selected=tuple(kept), scores=tuple(kept_scores),
                        dropped_as_duplicates=tuple(dropped),
                        pool_scores=selection.pool_scores)
