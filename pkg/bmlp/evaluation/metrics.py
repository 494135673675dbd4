"""
Ranking metrics with a single relevant item per sample.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from ..errors import InvalidTargetError, UndefinedMetricError


def rank_of_target(scores: np.ndarray, target: int, exclude: Iterable[int] = (0,)) -> int:
    """
    1-based rank of ``target`` under descending score; ties go to the lower
    item index. Indices in ``exclude`` are not candidates.
    """
    flat = np.asarray(scores).reshape(-1)
    excluded = set(int(i) for i in exclude)
    if target in excluded:
        raise InvalidTargetError(f"target {target} is excluded from ranking")
    if not 0 <= target < flat.size:
        raise InvalidTargetError(f"target {target} outside score vector of length {flat.size}")
    live = np.ones(flat.size, dtype=bool)
    live[list(excluded)] = False
    s = flat[target]
    ahead = (flat > s) | ((flat == s) & (np.arange(flat.size) < target))
    return int(np.count_nonzero(ahead & live)) + 1


def _as_ranks(ranks: Sequence[int]) -> np.ndarray:
    arr = np.asarray(ranks, dtype=np.int64)
    if arr.size == 0:
        raise UndefinedMetricError("metric over zero samples")
    if (arr < 1).any():
        raise ValueError(f"ranks must be >= 1, got min {int(arr.min())}")
    return arr


def hr_at_k(ranks: Sequence[int], k: int) -> float:
    return float(np.mean(_as_ranks(ranks) <= k))


def ndcg_at_k(ranks: Sequence[int], k: int) -> float:
    arr = _as_ranks(ranks)
    gains = np.where(arr <= k, 1.0 / np.log2(arr + 1.0), 0.0)
    return float(np.mean(gains))
