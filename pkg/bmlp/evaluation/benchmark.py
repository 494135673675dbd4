"""
Benchmark - forward+backward step time as a function of sequence length L

A step factory maps L to a zero-argument callable performing one step.
The default factory runs one BMLP training instance (float32, random data)
with wide blocks, so per-position work dominates the fixed per-step costs.
Two controls bracket it: a constant-time step, and the BMLP step plus an
L×L score matrix with its backward pass.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
from loguru import logger

from ..core.encoding import HeteroSequence, Vocab, extract_aux
from ..core.model import HyperParams, ModelParams, TrainingInstance, instance_gradients
from ..core.numerics import Mode, RngStream
from ..errors import ConfigurationError

Step = Callable[[], object]
StepFactory = Callable[[int], Step]

DEFAULT_LENGTHS = (64, 128, 256, 512)
BENCH_D = 256
BENCH_WIDTH = 512
QUADRATIC_SHARE = 2.0
CALIBRATION_RUNS = 5
BENCH_ITEMS = 100
BENCH_BEHAVIORS = 3


@dataclass
class TimingPoint:
    length: int
    mean_ms: float
    std_ms: float


@dataclass
class TimingCurve:
    points: List[TimingPoint]
    slope: float = 0.0
    intercept: float = 0.0
    r2: float = 0.0
    control: str = "bmlp"

    @property
    def ratios(self) -> List[float]:
        """time(2L) / time(L) for each adjacent pair."""
        return [b.mean_ms / a.mean_ms for a, b in zip(self.points, self.points[1:])]

    def to_dict(self) -> Dict:
        return {
            "control": self.control,
            "points": [[p.length, p.mean_ms, p.std_ms] for p in self.points],
            "slope": self.slope,
            "intercept": self.intercept,
            "r2": self.r2,
            "ratios": self.ratios,
        }


def fit_line(lengths: Sequence[float], times: Sequence[float]) -> tuple[float, float, float]:
    """Least-squares line and its r²."""
    x = np.asarray(lengths, dtype=np.float64)
    y = np.asarray(times, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    residual = y - (slope * x + intercept)
    total = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((residual ** 2).sum()) / total if total > 0 else 1.0
    return float(slope), float(intercept), r2


# ----------------------------------------------------------------------
# Step factories
# ----------------------------------------------------------------------

def _bench_vocab(n_items: int, n_behaviors: int) -> Vocab:
    return Vocab(
        items=[f"i{k}" for k in range(n_items)],
        behaviors=[f"b{k}" for k in range(n_behaviors)],
        target_behavior=n_behaviors,
    )


def bmlp_step_factory(
    template: HyperParams,
    n_items: int = BENCH_ITEMS,
    n_behaviors: int = BENCH_BEHAVIORS,
) -> StepFactory:
    """One forward+backward on a random full-length instance; d, H, N fixed."""
    vocab = _bench_vocab(n_items, n_behaviors)

    def factory(length: int) -> Step:
        hyper = template.model_copy(update={
            "seq_len": length,
            "d_t": template.d_t or BENCH_WIDTH,
            "dtype": "float32",
        })
        params = ModelParams.allocate(hyper, n_items, n_behaviors)
        gen = RngStream(hyper.seed, lane=length).generator()
        items = gen.integers(1, n_items + 1, size=length)
        behaviors = gen.integers(1, n_behaviors + 1, size=length)
        instance = TrainingInstance(
            hetero=HeteroSequence(items=items, behaviors=behaviors, mask=np.ones(length, dtype=bool)),
            aux=extract_aux(zip(items.tolist(), behaviors.tolist()), hyper.aux_len, vocab),
            target_item=int(gen.integers(1, n_items + 1)),
        )
        rng = RngStream(hyper.seed)
        return lambda: instance_gradients(instance, params, hyper, Mode.TRAIN, rng)

    return factory


def constant_step_factory(size: int = 64) -> StepFactory:
    def factory(length: int) -> Step:
        A = np.random.default_rng(0).random((size, size))
        return lambda: A @ A

    return factory


def bench_hyper(template: HyperParams, d: Optional[int] = BENCH_D, width: Optional[int] = BENCH_WIDTH) -> HyperParams:
    """``template`` with the benchmark's embedding size and SCB/FCB widths; None keeps the template's."""
    update = {"dtype": "float32"}
    if d is not None:
        update["d"] = d
    if width is not None:
        update["d_t"] = update["d_c"] = width
    return HyperParams.model_validate({**template.model_dump(), **update})


def score_matrix_step(length: int, features: int, seed: int = 0) -> Step:
    """Forward and backward of a row-softmax L×L dot-product score matrix."""
    gen = np.random.default_rng(seed + length)
    Q, K, V, dO = (gen.standard_normal((length, features), dtype=np.float32) for _ in range(4))
    scale = np.float32(1.0 / np.sqrt(features))

    def run():
        S = (Q @ K.T) * scale
        P = np.exp(S - S.max(axis=1, keepdims=True))
        P /= P.sum(axis=1, keepdims=True)
        out = P @ V
        dV = P.T @ dO
        dP = dO @ V.T
        dS = P * (dP - (dP * P).sum(axis=1, keepdims=True)) * scale
        return out, dV, dS @ K, dS.T @ Q

    return run


def calibrate_repeats(base: Step, unit: Step, share: float, runs: int = CALIBRATION_RUNS) -> int:
    """How many ``unit`` calls cost ``share`` times one ``base`` call (median timings, at least 1)."""
    base_ms = float(np.median(time_step(base, runs, 2)))
    unit_ms = float(np.median(time_step(unit, runs, 2)))
    return max(1, int(np.ceil(share * base_ms / max(unit_ms, 1e-6))))


def quadratic_step_factory(
    template: HyperParams,
    share: float = QUADRATIC_SHARE,
    repeats: Optional[int] = None,
    **kwargs,
) -> StepFactory:
    """
    The BMLP step plus ``repeats`` score-matrix steps.

    Unless given, ``repeats`` is fixed on the first (shortest) length the
    factory sees: the score matrices then cost ``share`` times the BMLP
    step there, and grow as L² from it.
    """
    inner = bmlp_step_factory(template, **kwargs)
    fixed: List[int] = [] if repeats is None else [repeats]

    def factory(length: int) -> Step:
        step = inner(length)
        unit = score_matrix_step(length, template.features, template.seed)
        if not fixed:
            fixed.append(calibrate_repeats(step, unit, share))
            logger.info(f"Quadratic control: {fixed[0]} score matrices per step (sized at L={length})")
        n = fixed[0]

        def run():
            step()
            for _ in range(n):
                unit()

        return run

    return factory


def control_factory(control: str, template: HyperParams) -> StepFactory:
    if control in ("none", "bmlp"):
        return bmlp_step_factory(template)
    if control == "constant":
        return constant_step_factory()
    if control == "quadratic":
        return quadratic_step_factory(template)
    raise ConfigurationError(f"unknown benchmark control '{control}'")


# ----------------------------------------------------------------------
# Measurement
# ----------------------------------------------------------------------

def time_step(step: Step, repetitions: int, warmup: int) -> np.ndarray:
    for _ in range(warmup):
        step()
    samples = np.empty(repetitions)
    for r in range(repetitions):
        t0 = time.perf_counter()
        step()
        samples[r] = (time.perf_counter() - t0) * 1000.0
    return samples


def bench_scaling(
    template: HyperParams,
    lengths: Sequence[int] = DEFAULT_LENGTHS,
    repetitions: int = 100,
    warmup: int = 10,
    step_factory: Optional[StepFactory] = None,
    control: str = "bmlp",
    d: Optional[int] = BENCH_D,
    width: Optional[int] = BENCH_WIDTH,
) -> TimingCurve:
    """
    Mean/std step time per L after ``warmup`` untimed steps, plus a linear fit.

    d, H and N stay fixed across lengths; ``d`` and ``width`` replace the
    template's embedding size and block widths (see ``bench_hyper``).
    """
    if len(lengths) < 4:
        raise ConfigurationError(f"need at least 4 lengths, got {list(lengths)}")
    if repetitions < 1 or warmup < 0:
        raise ConfigurationError("repetitions must be >= 1 and warmup >= 0")
    factory = step_factory or control_factory(control, bench_hyper(template, d, width))
    points = []
    for length in sorted(lengths):
        samples = time_step(factory(length), repetitions, warmup)
        points.append(TimingPoint(length, float(samples.mean()), float(samples.std())))
        logger.info(f"L={length:>5}: {points[-1].mean_ms:8.3f} ms ± {points[-1].std_ms:.3f}")
    slope, intercept, r2 = fit_line([p.length for p in points], [p.mean_ms for p in points])
    curve = TimingCurve(points=points, slope=slope, intercept=intercept, r2=r2, control=control)
    logger.info(f"Fit: slope={slope:.5f} ms/L r²={r2:.4f} ratios={[round(r, 3) for r in curve.ratios]}")
    return curve


def write_timing_files(curve: TimingCurve, out_dir: Union[str, Path]) -> Dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = ["L\tmean_ms\tstd_ms"] + [f"{p.length}\t{p.mean_ms:.6f}\t{p.std_ms:.6f}" for p in curve.points]
    (out / "timing.tsv").write_text("\n".join(table) + "\n", encoding="utf-8")
    plot = [f"{p.length} {p.mean_ms:.6f}" for p in curve.points]
    (out / "timing_plot.dat").write_text("\n".join(plot) + "\n", encoding="utf-8")
    (out / "timing_fit.json").write_text(json.dumps(curve.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    return {name: out / name for name in ("timing.tsv", "timing_plot.dat", "timing_fit.json")}
