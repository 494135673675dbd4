"""
Preprocess - dedup and purchase-count filtering on a records frame
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List

import pandas as pd
from loguru import logger

from ..errors import ConfigurationError, EmptyDatasetError

KEY = ["user", "item", "behavior"]


def dedup_earliest(frame: pd.DataFrame) -> pd.DataFrame:
    """
    Keep only the earliest record of each (user, item, behavior) triple.

    Equal timestamps keep the earlier line. Survivors stay in file order.
    """
    earliest = frame.sort_values("timestamp", kind="mergesort").drop_duplicates(KEY, keep="first")
    out = frame.loc[earliest.index.sort_values()]
    removed = len(frame) - len(out)
    if removed:
        logger.info(f"Dedup removed {removed:,} duplicate records")
    return out


@dataclass
class FilterStats:
    rounds: int = 0
    removed_items: List[str] = field(default_factory=list)
    removed_users: List[str] = field(default_factory=list)
    removed_records: int = 0


def iterative_filter(
    frame: pd.DataFrame,
    min_item_purchases: int,
    min_user_purchases: int,
    target_behavior: str,
) -> tuple[pd.DataFrame, FilterStats]:
    """
    Alternately drop items purchased fewer than ``min_item_purchases`` times
    and users with fewer than ``min_user_purchases`` purchases, until a pass
    removes nothing.
    """
    if min_item_purchases < 1 or min_user_purchases < 1:
        raise ConfigurationError(
            f"thresholds must be >= 1, got items={min_item_purchases} users={min_user_purchases}"
        )
    stats = FilterStats()
    start = len(frame)
    while True:
        stats.rounds += 1
        changed = False
        for column, threshold, removed in (
            ("item", min_item_purchases, stats.removed_items),
            ("user", min_user_purchases, stats.removed_users),
        ):
            counts = frame.loc[frame["behavior"] == target_behavior, column].value_counts()
            keep = counts.index[counts >= threshold]
            mask = frame[column].isin(keep)
            if not mask.all():
                dropped = sorted(frame.loc[~mask, column].unique())
                removed.extend(dropped)
                frame = frame[mask]
                changed = True
                logger.debug(f"Filter round {stats.rounds}: dropped {len(dropped)} {column}s")
        if frame.empty:
            raise EmptyDatasetError(
                f"iterative_filter removed everything (items >= {min_item_purchases}, "
                f"users >= {min_user_purchases} '{target_behavior}' events)"
            )
        if not changed:
            break
    stats.removed_records = start - len(frame)
    logger.info(
        f"Filter fixed point after {stats.rounds} rounds: {frame['user'].nunique():,} users, "
        f"{frame['item'].nunique():,} items, {len(frame):,} records"
    )
    return frame, stats
