"""
Ingest - raw interaction logs into a records frame

A records frame is a DataFrame with columns user, item, behavior (str) and
timestamp (int64), one row per event, in file order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import pandas as pd
from loguru import logger

from ..errors import ConfigurationError, MalformedInputError

COLUMNS = ("user", "item", "behavior", "timestamp")
MAX_MALFORMED_FRACTION = 0.01

# (min item purchases, min user purchases)
DATASET_PRESETS: Dict[str, Tuple[int, int]] = {
    "rec15": (5, 5),
    "tmall": (20, 10),
    "ml1m": (5, 5),
    "ub": (10, 5),
}


@dataclass(frozen=True)
class InteractionRecord:
    user: str
    item: str
    behavior: str
    timestamp: int


@dataclass
class IngestResult:
    records: pd.DataFrame
    total_lines: int
    malformed: int = 0
    offenders: List[str] = field(default_factory=list)

    def to_records(self) -> List[InteractionRecord]:
        return to_records(self.records)


def to_records(frame: pd.DataFrame) -> List[InteractionRecord]:
    return [
        InteractionRecord(str(u), str(i), str(b), int(t))
        for u, i, b, t in frame[list(COLUMNS)].itertuples(index=False, name=None)
    ]


def records_frame(records: Sequence[InteractionRecord]) -> pd.DataFrame:
    frame = pd.DataFrame(list(records), columns=list(COLUMNS))
    return frame.astype({"user": str, "item": str, "behavior": str, "timestamp": "int64"})


def ingest(
    path: Union[str, Path],
    fmt: str = "tsv",
    columns: Sequence[str] = COLUMNS,
    has_header: bool = True,
    behaviors: Optional[Sequence[str]] = None,
) -> IngestResult:
    """
    Parse a TSV/CSV interaction log.

    ``columns`` names the file's columns in order and must include user,
    item, behavior and timestamp (extra columns are ignored). Lines with the
    wrong field count, an empty field, a non-integer or negative timestamp,
    or a behavior outside ``behaviors`` are malformed and skipped; more than
    1% malformed is fatal.
    """
    path = Path(path)
    if fmt not in ("tsv", "csv"):
        raise ConfigurationError(f"unknown input format '{fmt}' (tsv or csv)")
    missing = set(COLUMNS) - set(columns)
    if missing:
        raise ConfigurationError(f"column mapping lacks {sorted(missing)}")
    if not path.is_file():
        raise FileNotFoundError(f"input file not found: {path}")

    sep = "\t" if fmt == "tsv" else ","
    bad_lines: List[str] = []

    def _reject(fields: List[str]) -> None:
        bad_lines.append(sep.join(fields))
        return None

    raw = pd.read_csv(
        path,
        sep=sep,
        header=0 if has_header else None,
        names=list(columns),
        dtype=str,
        keep_default_na=False,
        engine="python",
        on_bad_lines=_reject,
    )
    raw = raw[list(COLUMNS)].fillna("")

    ok = raw.ne("").all(axis=1) & raw["timestamp"].str.fullmatch(r"\d+")
    if behaviors is not None:
        ok &= raw["behavior"].isin(list(behaviors))
    offenders = bad_lines + [sep.join(row) for row in raw[~ok].itertuples(index=False, name=None)]

    records = raw[ok].astype({"timestamp": "int64"}).reset_index(drop=True)
    total = len(raw) + len(bad_lines)
    malformed = total - len(records)
    logger.info(f"Ingested {len(records):,} records from {path.name} ({malformed} malformed)")

    if total and malformed / total > MAX_MALFORMED_FRACTION:
        shown = "\n  ".join(offenders[:10])
        raise MalformedInputError(
            f"{path}: {malformed}/{total} malformed lines exceeds "
            f"{MAX_MALFORMED_FRACTION:.0%}; first offenders:\n  {shown}"
        )
    if malformed:
        logger.warning(f"Skipped {malformed} malformed lines in {path.name}")
    return IngestResult(records=records, total_lines=total, malformed=malformed, offenders=offenders[:10])


# ----------------------------------------------------------------------
# Dataset-specific transforms
# ----------------------------------------------------------------------

def ratings_to_behaviors(
    frame: pd.DataFrame,
    threshold: int = 5,
    target: str = "buy",
    auxiliary: str = "click",
) -> pd.DataFrame:
    """
    Turn explicit ratings (held in the behavior column) into behaviors:
    rating >= threshold becomes ``target``, anything else ``auxiliary``.
    """
    ratings = pd.to_numeric(frame["behavior"], errors="coerce")
    if ratings.isna().any():
        bad = frame.loc[ratings.isna(), "behavior"].head(3).tolist()
        raise ConfigurationError(f"ratings_to_behaviors: non-numeric ratings {bad}")
    out = frame.copy()
    out["behavior"] = ratings.ge(threshold).map({True: target, False: auxiliary})
    logger.info(f"Ratings mapped: {int(ratings.ge(threshold).sum()):,} {target} / "
                f"{int(ratings.lt(threshold).sum()):,} {auxiliary}")
    return out


def exclude_time_range(frame: pd.DataFrame, start: int, end: int) -> pd.DataFrame:
    """Drop records with start <= timestamp < end."""
    if end <= start:
        raise ConfigurationError(f"exclude_time_range: empty range [{start}, {end})")
    inside = frame["timestamp"].between(start, end, inclusive="left")
    logger.info(f"Excluded {int(inside.sum()):,} records in [{start}, {end})")
    return frame[~inside].reset_index(drop=True)
