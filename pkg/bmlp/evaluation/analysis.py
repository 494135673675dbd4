"""
Analysis - full-ranking evaluation and the test-set groupings

    evaluate        HR@k / NDCG@k over a list of samples (eval mode)
    group_examined  split test samples by whether the target was seen
    intent_testset  auxiliary-event targets between the last two purchases
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

from joblib import Parallel, delayed
from loguru import logger

from ..core.encoding import Vocab
from ..core.model import HyperParams, ModelParams, forward
from ..core.numerics import Mode
from ..data.split import Event, Sample, purchase_positions, sample_instance
from ..errors import EmptyDatasetError
from .metrics import hr_at_k, ndcg_at_k, rank_of_target

DEFAULT_KS = (10, 20)
GROUPS = ("all", "examined", "unexamined", "intent")


@dataclass
class EvalReport:
    group: str
    n_samples: int
    hr: Dict[int, float]
    ndcg: Dict[int, float]
    wall_time_ms: float = 0.0
    ranks: List[int] = field(default_factory=list, repr=False)

    def to_dict(self, include_time: bool = False) -> Dict:
        out = {
            "group": self.group,
            "n_samples": self.n_samples,
            "hr": {str(k): v for k, v in sorted(self.hr.items())},
            "ndcg": {str(k): v for k, v in sorted(self.ndcg.items())},
        }
        if include_time:
            out["wall_time_ms"] = self.wall_time_ms
        return out

    def summary(self) -> str:
        parts = [f"HR@{k}={self.hr[k]:.4f} NDCG@{k}={self.ndcg[k]:.4f}" for k in sorted(self.hr)]
        return f"[{self.group}] n={self.n_samples} " + " ".join(parts)


def report_from_ranks(group: str, ranks: Sequence[int], ks: Sequence[int]) -> EvalReport:
    return EvalReport(
        group=group,
        n_samples=len(ranks),
        hr={k: hr_at_k(ranks, k) for k in ks},
        ndcg={k: ndcg_at_k(ranks, k) for k in ks},
        ranks=list(ranks),
    )


def _sample_rank(sample: Sample, params: ModelParams, hyper: HyperParams, vocab: Vocab) -> int:
    scores, _ = forward(sample_instance(sample, hyper, vocab), params, hyper, Mode.EVAL)
    return rank_of_target(scores, sample.target_item)


def rank_samples(
    params: ModelParams,
    samples: Sequence[Sample],
    hyper: HyperParams,
    vocab: Vocab,
    threads: int = 1,
) -> List[int]:
    if threads > 1 and len(samples) > 1:
        return list(
            Parallel(n_jobs=threads, prefer="threads")(
                delayed(_sample_rank)(s, params, hyper, vocab) for s in samples
            )
        )
    return [_sample_rank(s, params, hyper, vocab) for s in samples]


def evaluate(
    params: ModelParams,
    samples: Sequence[Sample],
    hyper: HyperParams,
    vocab: Vocab,
    ks: Sequence[int] = DEFAULT_KS,
    group: str = "all",
    threads: int = 1,
) -> EvalReport:
    """Rank every sample's target against all items; dropout is off."""
    started = time.perf_counter()
    report = report_from_ranks(group, rank_samples(params, samples, hyper, vocab, threads), ks)
    report.wall_time_ms = (time.perf_counter() - started) * 1000.0
    logger.info(report.summary())
    return report


# ----------------------------------------------------------------------
# Groupings
# ----------------------------------------------------------------------

@dataclass
class ExaminedGroups:
    examined: List[Sample]
    unexamined: List[Sample]

    @property
    def rate(self) -> float:
        total = len(self.examined) + len(self.unexamined)
        return len(self.examined) / total if total else 0.0


def is_examined(sample: Sample, seq_len: int) -> bool:
    """Target item occurs in the model's input window (last ``seq_len`` events)."""
    return any(e.item == sample.target_item for e in sample.history[-seq_len:])


def group_examined(samples: Sequence[Sample], seq_len: int) -> ExaminedGroups:
    groups = ExaminedGroups(examined=[], unexamined=[])
    for s in samples:
        (groups.examined if is_examined(s, seq_len) else groups.unexamined).append(s)
    logger.info(
        f"Examined: {len(groups.examined)}, unexamined: {len(groups.unexamined)} "
        f"(rate {groups.rate:.4f})"
    )
    return groups


def intent_testset(sequences: Mapping[str, Sequence[Event]], target_behavior: int) -> List[Sample]:
    """
    Per user with >= 2 purchases: target = the latest auxiliary event strictly
    between the last two purchases, history = every event before it.
    """
    samples = []
    for user in sorted(sequences):
        events = list(sequences[user])
        buys = purchase_positions(events, target_behavior)
        if len(buys) < 2:
            continue
        between = [p for p in range(buys[-2] + 1, buys[-1]) if events[p].behavior != target_behavior]
        if not between:
            continue
        q = between[-1]
        samples.append(Sample(user, events[:q], events[q].item, events[q].behavior))
    if not samples:
        raise EmptyDatasetError("no user has an auxiliary event between the last two purchases")
    logger.info(f"Intent test set: {len(samples)} qualifying users")
    return samples


def evaluate_groups(
    params: ModelParams,
    test: Sequence[Sample],
    hyper: HyperParams,
    vocab: Vocab,
    ks: Sequence[int] = DEFAULT_KS,
    examined: bool = True,
    intent: Optional[Sequence[Sample]] = None,
    threads: int = 1,
) -> Tuple[List[EvalReport], Dict[str, float]]:
    """
    Reports for all / examined / unexamined / intent. Examined groups reuse
    the ranks of the full test pass. Empty groups are skipped with a warning.
    """
    reports = [evaluate(params, test, hyper, vocab, ks, "all", threads)]
    extras: Dict[str, float] = {}
    if examined:
        by_user = {s.user: r for s, r in zip(test, reports[0].ranks)}
        groups = group_examined(test, hyper.seq_len)
        extras["examined_rate"] = groups.rate
        for name, members in (("examined", groups.examined), ("unexamined", groups.unexamined)):
            if not members:
                logger.warning(f"Group '{name}' is empty; no report")
                continue
            reports.append(report_from_ranks(name, [by_user[s.user] for s in members], ks))
            logger.info(reports[-1].summary())
    if intent is not None:
        reports.append(evaluate(params, intent, hyper, vocab, ks, "intent", threads))
    return reports, extras


def write_reports(reports: Sequence[EvalReport], path: Union[str, Path]) -> Path:
    """One JSON object per line, sorted keys; wall time is left out."""
    path = Path(path)
    lines = [json.dumps(r.to_dict(), sort_keys=True) for r in reports]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_reports(path: Union[str, Path]) -> List[Dict]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line]
