"""
Trainer - epoch loop over sliding-window instances

Shuffles with a per-epoch stream, runs ``train_step`` per mini-batch,
scores validation HR@10 every ``eval_every`` epochs and keeps the best
parameters; stops after ``patience`` evaluations without improvement.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
from loguru import logger

from ..errors import EmptyDatasetError
from .encoding import Vocab
from .model import HyperParams, ModelParams, TrainingInstance, train_step
from .numerics import RngStream

VALIDATION_K = 10


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_hr: Optional[float] = None
    val_ndcg: Optional[float] = None
    elapsed_s: float = 0.0


@dataclass
class TrainResult:
    params: ModelParams
    history: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_hr: float = float("nan")
    stopped_early: bool = False


class Trainer:
    """
    Mini-batch Adam training of one BMLP configuration.

    Usage::

        trainer = Trainer(hyper, vocab, threads=4)
        result = trainer.fit(gen_instances(split.train, hyper, vocab), split.validation)
    """

    def __init__(
        self,
        hyper: HyperParams,
        vocab: Vocab,
        threads: int = 1,
        params: Optional[ModelParams] = None,
    ) -> None:
        self.hyper = hyper
        self.vocab = vocab
        self.threads = max(1, threads)
        self.params = params or ModelParams.allocate(hyper, vocab.n_items, vocab.n_behaviors)
        self.steps = 0

    # ------------------------------------------------------------------
    # Epochs
    # ------------------------------------------------------------------

    def shuffled(self, instances: Sequence[TrainingInstance], epoch: int) -> List[TrainingInstance]:
        order = RngStream(self.hyper.seed, counter=epoch).generator().permutation(len(instances))
        return [instances[i] for i in order]

    def run_epoch(self, instances: Sequence[TrainingInstance], epoch: int) -> float:
        """Mean training loss over the epoch's batches, weighted by batch size."""
        batch_size = self.hyper.batch_size
        ordered = self.shuffled(instances, epoch)
        total = 0.0
        for start in range(0, len(ordered), batch_size):
            batch = ordered[start:start + batch_size]
            self.steps += 1
            rng = RngStream(self.hyper.seed, counter=self.steps)
            total += train_step(batch, self.params, self.hyper, rng, self.threads) * len(batch)
        return total / len(ordered)

    def validate(self, validation) -> tuple[float, float]:
        # evaluation imports core, so this import stays local
        from ..evaluation.analysis import evaluate

        report = evaluate(
            self.params, validation, self.hyper, self.vocab, ks=(VALIDATION_K,), group="validation",
            threads=self.threads,
        )
        return report.hr[VALIDATION_K], report.ndcg[VALIDATION_K]

    def fit(
        self,
        instances: Sequence[TrainingInstance],
        validation: Optional[Sequence] = None,
        epochs: Optional[int] = None,
    ) -> TrainResult:
        if not instances:
            raise EmptyDatasetError("no training instances")
        epochs = epochs or self.hyper.epochs
        result = TrainResult(params=self.params)
        best: Optional[ModelParams] = None
        stale = 0

        logger.info("=" * 70)
        logger.info(
            f"Training {self.hyper.label()}: {len(instances):,} instances, "
            f"{self.params.count():,} params, {epochs} epochs"
        )
        started = time.perf_counter()
        for epoch in range(1, epochs + 1):
            record = EpochRecord(epoch=epoch, loss=self.run_epoch(instances, epoch))
            if validation and epoch % self.hyper.eval_every == 0:
                record.val_hr, record.val_ndcg = self.validate(validation)
                if best is None or record.val_hr > result.best_hr:
                    best = self.params.copy()
                    result.best_epoch, result.best_hr = epoch, record.val_hr
                    stale = 0
                else:
                    stale += 1
            record.elapsed_s = time.perf_counter() - started
            result.history.append(record)
            logger.debug(
                f"epoch {epoch}: loss={record.loss:.6f} val_hr@{VALIDATION_K}={record.val_hr}"
            )
            if stale >= self.hyper.patience:
                result.stopped_early = True
                logger.info(f"Early stop at epoch {epoch} (best epoch {result.best_epoch})")
                break

        if best is not None:
            self.params.load_from(best)
        else:
            result.best_epoch = result.history[-1].epoch
        logger.success(
            f"Training done: {len(result.history)} epochs, best epoch {result.best_epoch}, "
            f"val HR@{VALIDATION_K}={result.best_hr:.4f}"
        )
        logger.info("=" * 70)
        return result


def _fmt(value: Optional[float]) -> str:
    return "" if value is None or np.isnan(value) else f"{value:.10f}"


def write_train_log(history: Sequence[EpochRecord], log_path: Union[str, Path], timing_path=None) -> None:
    """Deterministic rows (epoch, loss, val HR, val NDCG); wall time goes to ``timing_path``."""
    rows = ["epoch\tloss\tval_hr@10\tval_ndcg@10"]
    rows += [f"{r.epoch}\t{r.loss:.12f}\t{_fmt(r.val_hr)}\t{_fmt(r.val_ndcg)}" for r in history]
    Path(log_path).write_text("\n".join(rows) + "\n", encoding="utf-8")
    if timing_path is not None:
        timing = ["epoch\telapsed_s"] + [f"{r.epoch}\t{r.elapsed_s:.3f}" for r in history]
        Path(timing_path).write_text("\n".join(timing) + "\n", encoding="utf-8")
