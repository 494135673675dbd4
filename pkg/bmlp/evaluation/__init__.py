"""Ranking metrics, evaluation groupings and the scaling benchmark."""

from .analysis import EvalReport, evaluate, group_examined, intent_testset
from .benchmark import TimingCurve, bench_scaling
from .metrics import hr_at_k, ndcg_at_k, rank_of_target

__all__ = [
    "EvalReport", "TimingCurve", "bench_scaling", "evaluate", "group_examined",
    "hr_at_k", "intent_testset", "ndcg_at_k", "rank_of_target",
]
