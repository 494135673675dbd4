"""
Split - leave-last-two-purchases splitting and training-instance generation

Per user (events in time order, ties in file order):

    test        target = last purchase,        history = everything before it
    validation  target = penultimate purchase, history = everything before it
    train       the events before the penultimate purchase

Split directories hold msgpack documents (train.bin, valid.bin, test.bin,
vocab.bin and, when produced, intent.bin) with users in sorted order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple, Union

import msgpack
import pandas as pd
from loguru import logger

from ..core.encoding import Vocab, extract_aux, make_hetero
from ..core.model import HyperParams, TrainingInstance
from ..errors import CorruptDataError, EmptyDatasetError

SPLIT_FORMAT = 1
SPLIT_FILES = {"train": "train.bin", "validation": "valid.bin", "test": "test.bin", "intent": "intent.bin"}


class Event(NamedTuple):
    item: int
    behavior: int
    timestamp: int


@dataclass
class Sample:
    """One evaluation case: predict ``target_item`` from ``history``."""
    user: str
    history: List[Event]
    target_item: int
    target_behavior: int

    def pairs(self) -> List[Tuple[int, int]]:
        return [(e.item, e.behavior) for e in self.history]


@dataclass
class DatasetSplit:
    train: Dict[str, List[Event]]
    validation: List[Sample]
    test: List[Sample]
    excluded_users: List[str] = field(default_factory=list)
    cold_start: Dict[str, int] = field(default_factory=lambda: {"validation": 0, "test": 0})
    # validation samples whose penultimate purchase is the first event
    empty_history: int = 0

    def train_items(self) -> set:
        return {e.item for events in self.train.values() for e in events}

    def counts(self) -> Dict[str, int]:
        return {
            "train_users": len(self.train),
            "train_events": sum(len(v) for v in self.train.values()),
            "validation": len(self.validation),
            "test": len(self.test),
            "excluded_users": len(self.excluded_users),
            "cold_start_validation": self.cold_start["validation"],
            "cold_start_test": self.cold_start["test"],
            "empty_history_validation": self.empty_history,
        }


def user_sequences(frame: pd.DataFrame, vocab: Vocab) -> Dict[str, List[Event]]:
    """Encoded, time-ordered events per user, users in sorted order."""
    ordered = frame.sort_values("timestamp", kind="mergesort")
    try:
        items = ordered["item"].map(vocab.item_index).astype("int64")
        behaviors = ordered["behavior"].map(vocab.behavior_index).astype("int64")
    except (ValueError, TypeError) as exc:
        raise CorruptDataError(f"records contain ids missing from the vocabulary ({exc})") from exc
    encoded = pd.DataFrame(
        {"user": ordered["user"], "item": items, "behavior": behaviors, "timestamp": ordered["timestamp"]}
    )
    sequences: Dict[str, List[Event]] = {}
    for user, group in encoded.groupby("user", sort=True):
        sequences[str(user)] = [
            Event(int(i), int(b), int(t))
            for i, b, t in group[["item", "behavior", "timestamp"]].itertuples(index=False, name=None)
        ]
    return sequences


def purchase_positions(events: Sequence[Event], target_behavior: int) -> List[int]:
    return [pos for pos, e in enumerate(events) if e.behavior == target_behavior]


def split(frame: pd.DataFrame, vocab: Vocab) -> DatasetSplit:
    sequences = user_sequences(frame, vocab)
    target = vocab.target_behavior
    result = DatasetSplit(train={}, validation=[], test=[])
    pending: List[Tuple[Sample, Sample]] = []
    for user, events in sequences.items():
        buys = purchase_positions(events, target)
        if len(buys) < 2:
            result.excluded_users.append(user)
            continue
        p1, p2 = buys[-2], buys[-1]
        result.train[user] = events[:p1]
        pending.append((
            Sample(user, events[:p1], events[p1].item, target),
            Sample(user, events[:p2], events[p2].item, target),
        ))
    if result.excluded_users:
        logger.warning(f"Split excluded {len(result.excluded_users)} users with fewer than 2 purchases")

    known = result.train_items()
    for valid, test in pending:
        for part, sample in (("validation", valid), ("test", test)):
            if not sample.history:
                result.empty_history += 1
            elif sample.target_item in known:
                getattr(result, part).append(sample)
            else:
                result.cold_start[part] += 1
    if sum(result.cold_start.values()):
        logger.warning(f"Cold-start samples dropped: {result.cold_start}")
    if result.empty_history:
        logger.warning(f"Validation samples with empty history dropped: {result.empty_history}")
    if not result.test:
        raise EmptyDatasetError("split produced no test samples")
    logger.info(
        f"Split: {len(result.train)} train users, {len(result.validation)} validation, "
        f"{len(result.test)} test samples"
    )
    return result


# ----------------------------------------------------------------------
# Instances
# ----------------------------------------------------------------------

def build_instance(
    user: str,
    prefix: Sequence[Event],
    target_item: int,
    hyper: HyperParams,
    vocab: Vocab,
    position: int = -1,
) -> TrainingInstance:
    pairs = [(e.item, e.behavior) for e in prefix]
    return TrainingInstance(
        hetero=make_hetero(pairs, hyper.seq_len, target_item, user),
        aux=extract_aux(pairs, hyper.aux_len, vocab),
        target_item=target_item,
        user=user,
        position=position if position >= 0 else len(pairs),
    )


def sample_instance(sample: Sample, hyper: HyperParams, vocab: Vocab) -> TrainingInstance:
    return build_instance(sample.user, sample.history, sample.target_item, hyper, vocab)


def iter_instances(
    train: Dict[str, List[Event]], hyper: HyperParams, vocab: Vocab
) -> Iterator[TrainingInstance]:
    for user in sorted(train):
        events = train[user]
        for pos in range(1, len(events)):
            if hyper.train_on_all_behaviors or events[pos].behavior == vocab.target_behavior:
                yield build_instance(user, events[:pos], events[pos].item, hyper, vocab, pos)


def gen_instances(
    train: Dict[str, List[Event]], hyper: HyperParams, vocab: Vocab
) -> List[TrainingInstance]:
    """
    Sliding window: one instance per target event after the first event of
    a sequence, fed the L most recent earlier events.
    """
    instances = list(iter_instances(train, hyper, vocab))
    logger.info(f"Generated {len(instances):,} training instances")
    return instances


# ----------------------------------------------------------------------
# Split directory I/O
# ----------------------------------------------------------------------

def _pack(path: Path, payload: Dict) -> None:
    path.write_bytes(msgpack.packb({"format": SPLIT_FORMAT, **payload}, use_bin_type=True))


def _unpack(path: Path) -> Dict:
    if not path.is_file():
        raise FileNotFoundError(f"split file not found: {path}")
    payload = msgpack.unpackb(path.read_bytes(), raw=False, strict_map_key=False)
    if payload.get("format") != SPLIT_FORMAT:
        raise CorruptDataError(f"{path}: unsupported split format {payload.get('format')}")
    return payload


def _samples_payload(samples: Sequence[Sample]) -> Dict:
    return {
        "samples": [
            [s.user, s.target_item, s.target_behavior, [list(e) for e in s.history]]
            for s in sorted(samples, key=lambda s: s.user)
        ]
    }


def _samples_from(payload: Dict) -> List[Sample]:
    return [
        Sample(str(u), [Event(*e) for e in history], int(item), int(b))
        for u, item, b, history in payload["samples"]
    ]


def write_split_dir(
    out_dir: Union[str, Path],
    data: DatasetSplit,
    vocab: Vocab,
    intent: Optional[Sequence[Sample]] = None,
) -> Dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = {}
    _pack(out / "vocab.bin", {"vocab": vocab.to_dict()})
    written["vocab"] = out / "vocab.bin"
    _pack(
        out / SPLIT_FILES["train"],
        {"users": [[u, [list(e) for e in data.train[u]]] for u in sorted(data.train)]},
    )
    written["train"] = out / SPLIT_FILES["train"]
    for part in ("validation", "test"):
        _pack(out / SPLIT_FILES[part], _samples_payload(getattr(data, part)))
        written[part] = out / SPLIT_FILES[part]
    if intent is not None:
        _pack(out / SPLIT_FILES["intent"], _samples_payload(intent))
        written["intent"] = out / SPLIT_FILES["intent"]
    logger.info(f"Split directory written: {out}")
    return written


def read_split_dir(
    split_dir: Union[str, Path]
) -> Tuple[DatasetSplit, Vocab, Optional[List[Sample]]]:
    root = Path(split_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"split directory not found: {root}")
    vocab = Vocab.from_dict(_unpack(root / "vocab.bin")["vocab"])
    train = {
        str(u): [Event(*e) for e in events]
        for u, events in _unpack(root / SPLIT_FILES["train"])["users"]
    }
    data = DatasetSplit(
        train=train,
        validation=_samples_from(_unpack(root / SPLIT_FILES["validation"])),
        test=_samples_from(_unpack(root / SPLIT_FILES["test"])),
    )
    intent_path = root / SPLIT_FILES["intent"]
    intent = _samples_from(_unpack(intent_path)) if intent_path.is_file() else None
    return data, vocab, intent
