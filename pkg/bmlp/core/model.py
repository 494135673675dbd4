"""
BMLP - full model assembly

    e_g = HIP(encode_hetero(seq))            global interest
    e_l = PIP(encode_aux(aux))               recent purchase intent
    g   = sigmoid(e_g·W_g + e_l·W_l + b_g)
    z   = g ⊙ e_g + (1 - g) ⊙ e_l
    r̂   = softmax(z·W_r + b_r)
    loss = BCE of r̂ against the one-hot next purchase, over all items

Scores carry a leading padding column (index 0) fixed at 0 so that item
index k lives at column k.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from ..errors import ConfigurationError, DimensionError, MissingCacheError, NonFiniteError
from .encoding import (
    AuxSubsequences,
    EmbeddingTables,
    HeteroSequence,
    Variant,
    encode_aux,
    encode_aux_backward,
    encode_hetero,
    encode_hetero_backward,
)
from .hip import (
    FcbWeights,
    HipBlockWeights,
    HipCache,
    PoolWeights,
    ScbWeights,
    TensorGroup,
    check_heads,
    hip_backward,
    hip_forward,
)
from .numerics import AdamState, Mode, RngStream, adam_step, sigmoid, softmax, softmax_backward
from .pip import PipBlockWeights, PipCache, pip_backward, pip_forward

PROB_CLAMP = 1e-12


class Ablation(str, Enum):
    NO_SCB = "no_scb"
    NO_FCB = "no_fcb"
    NO_PIP = "no_pip"
    NO_HIP = "no_hip"


class ScoreActivation(str, Enum):
    SOFTMAX = "softmax"
    SIGMOID = "sigmoid"


# ----------------------------------------------------------------------
# Hyperparameters
# ----------------------------------------------------------------------

class HyperParams(BaseModel):
    """
    Architecture and optimization knobs.

    ``d_t``, ``d_c`` and ``d_t_aux`` default to L, 2d and L' when left unset;
    read the resolved widths through ``scb_width`` / ``fcb_width`` /
    ``aux_scb_width``.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    d: int = Field(64, ge=1)
    d_t: Optional[int] = Field(None, ge=1)
    d_c: Optional[int] = Field(None, ge=1)
    d_t_aux: Optional[int] = Field(None, ge=1)
    heads: int = Field(2, ge=1)
    blocks: int = Field(1, ge=1)
    seq_len: int = Field(50, ge=1)
    aux_len: int = Field(5, ge=1)

    lr: float = Field(0.01, ge=0.0)
    batch_size: int = Field(512, ge=1)
    dropout_rate: float = Field(0.2, ge=0.0, lt=1.0)
    weight_decay: float = Field(1e-4, ge=0.0)
    epochs: int = Field(200, ge=1)
    patience: int = Field(10, ge=1)
    eval_every: int = Field(1, ge=1)
    seed: int = 42

    variant: Variant = Variant.BT
    ablation: FrozenSet[Ablation] = frozenset()
    score_activation: ScoreActivation = ScoreActivation.SOFTMAX
    pip_scb_residual: bool = False
    pip_exclude_empty: bool = False
    train_on_all_behaviors: bool = False
    dtype: str = "float64"

    @field_validator("dtype")
    @classmethod
    def _known_dtype(cls, v: str) -> str:
        if v not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, got {v}")
        return v

    @model_validator(mode="after")
    def _consistent(self) -> "HyperParams":
        if (2 * self.d) % self.heads:
            raise ConfigurationError(f"heads={self.heads} must divide 2d={2 * self.d}")
        if self.aux_len > self.seq_len:
            raise ConfigurationError(f"L'={self.aux_len} exceeds L={self.seq_len}")
        if {Ablation.NO_HIP, Ablation.NO_PIP} <= self.ablation:
            raise ConfigurationError("ablating both HIP and PIP leaves no model")
        return self

    # Resolved widths
    @property
    def features(self) -> int:
        return 2 * self.d

    @property
    def scb_width(self) -> int:
        return self.d_t or self.seq_len

    @property
    def fcb_width(self) -> int:
        return self.d_c or 2 * self.d

    @property
    def aux_scb_width(self) -> int:
        return self.d_t_aux or self.aux_len

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)

    # Which parts are allocated
    @property
    def has_hip(self) -> bool:
        return Ablation.NO_HIP not in self.ablation

    @property
    def has_pip(self) -> bool:
        return Ablation.NO_PIP not in self.ablation

    @property
    def has_scb(self) -> bool:
        return Ablation.NO_SCB not in self.ablation

    @property
    def has_fcb(self) -> bool:
        return Ablation.NO_FCB not in self.ablation

    @property
    def uses_behavior_table(self) -> bool:
        return self.has_pip or (self.has_hip and self.variant.uses_behavior)

    @property
    def uses_transition_table(self) -> bool:
        return self.has_hip and self.variant.uses_transition

    def architecture(self) -> Dict:
        """Fields that fix tensor shapes; a checkpoint must match these."""
        return {
            "d": self.d,
            "d_t": self.scb_width,
            "d_c": self.fcb_width,
            "d_t_aux": self.aux_scb_width,
            "heads": self.heads,
            "blocks": self.blocks,
            "seq_len": self.seq_len,
            "aux_len": self.aux_len,
            "variant": self.variant.value,
            "ablation": sorted(a.value for a in self.ablation),
        }

    def label(self) -> str:
        cut = "+".join(sorted(a.value for a in self.ablation)) or "full"
        return f"{cut}/{self.variant.value}"


# ----------------------------------------------------------------------
# Parameters
# ----------------------------------------------------------------------

@dataclass
class GateWeights(TensorGroup):
    W_g: np.ndarray
    W_l: np.ndarray
    b_g: np.ndarray


@dataclass
class OutputWeights(TensorGroup):
    W_r: np.ndarray     # 2d × |I|
    b_r: np.ndarray     # 1 × |I|


@dataclass
class TrainingInstance:
    hetero: HeteroSequence
    aux: AuxSubsequences
    target_item: int
    user: str = ""
    position: int = -1

    @property
    def label(self) -> str:
        return f"{self.user}@{self.position}->{self.target_item}"


@dataclass
class ModelParams:
    """
    Every trainable tensor, with gradient buffers and Adam state keyed by the
    same dotted names (``emb.item``, ``hip.0.scb.W1``, ``out.W_r`` ...).
    """
    tables: EmbeddingTables
    hip_blocks: List[HipBlockWeights]
    pool: Optional[PoolWeights]
    pip_blocks: List[PipBlockWeights]
    gate: Optional[GateWeights]
    out: OutputWeights
    adam: Dict[str, AdamState] = field(default_factory=dict)

    @property
    def n_items(self) -> int:
        return self.out.W_r.shape[1]

    def named(self) -> Iterator[Tuple[str, np.ndarray]]:
        yield "emb.item", self.tables.item
        if self.tables.behavior is not None:
            yield "emb.behavior", self.tables.behavior
        if self.tables.transition is not None:
            yield "emb.transition", self.tables.transition
        for n, block in enumerate(self.hip_blocks):
            yield from block.named(f"hip.{n}")
        if self.pool is not None:
            yield from self.pool.named("hip.pool")
        for n, block in enumerate(self.pip_blocks):
            yield from block.named(f"pip.{n}")
        if self.gate is not None:
            yield from self.gate.named("gate")
        yield from self.out.named("out")

    def tensors(self) -> Dict[str, np.ndarray]:
        return dict(self.named())

    def zeros_like(self) -> "ModelParams":
        return ModelParams(
            tables=self.tables.zeros_like(),
            hip_blocks=[b.zeros_like() for b in self.hip_blocks],
            pool=None if self.pool is None else self.pool.zeros_like(),
            pip_blocks=[b.zeros_like() for b in self.pip_blocks],
            gate=None if self.gate is None else self.gate.zeros_like(),
            out=self.out.zeros_like(),
        )

    def copy(self) -> "ModelParams":
        clone = self.zeros_like()
        for (_, dst), (_, src) in zip(clone.named(), self.named()):
            dst[...] = src
        return clone

    def load_from(self, other: "ModelParams") -> None:
        for (_, dst), (_, src) in zip(self.named(), other.named()):
            dst[...] = src

    def count(self) -> int:
        return sum(t.size for _, t in self.named())

    @classmethod
    def allocate(
        cls, hyper: HyperParams, n_items: int, n_behaviors: int, seed: Optional[int] = None
    ) -> "ModelParams":
        """
        Build and initialize every tensor the configuration reads.

        Embeddings U(±0.1/√d) with zero padding rows, weight matrices Glorot
        uniform, biases 0, LayerNorm gamma 1 / beta 0. Tensors are drawn in
        ``named()`` order from one generator, so a seed fixes everything.
        """
        check_heads(hyper.features, hyper.heads)
        if n_behaviors < 2:
            raise ConfigurationError(f"need a target and at least one auxiliary behavior, got {n_behaviors}")
        dt = hyper.np_dtype
        d, F, H = hyper.d, hyper.features, hyper.heads
        z = lambda *shape: np.zeros(shape, dtype=dt)  # noqa: E731
        ones = lambda *shape: np.ones(shape, dtype=dt)  # noqa: E731

        def scb(length: int, width: int, norm: bool) -> Optional[ScbWeights]:
            if not hyper.has_scb:
                return None
            return ScbWeights(
                W1=z(length, width),
                W2=z(width, length),
                ln_gamma=ones(1, F) if norm else None,
                ln_beta=z(1, F) if norm else None,
            )

        def fcb() -> Optional[FcbWeights]:
            if not hyper.has_fcb:
                return None
            return FcbWeights(
                W1=z(H, F // H, hyper.fcb_width),
                W2=z(H, hyper.fcb_width, F // H),
                W_O=z(F, F),
                ln_gamma=ones(1, F),
                ln_beta=z(1, F),
            )

        m = n_behaviors - 1
        params = cls(
            tables=EmbeddingTables(
                item=z(n_items + 1, d),
                n_behaviors=n_behaviors,
                behavior=z(n_behaviors + 1, d) if hyper.uses_behavior_table else None,
                transition=z((n_behaviors + 1) ** 2, d) if hyper.uses_transition_table else None,
            ),
            hip_blocks=[
                HipBlockWeights(scb=scb(hyper.seq_len, hyper.scb_width, True), fcb=fcb())
                for _ in range(hyper.blocks)
            ] if hyper.has_hip else [],
            pool=PoolWeights(W_alpha=z(F, 1)) if hyper.has_hip else None,
            pip_blocks=[
                PipBlockWeights(scbs=[scb(hyper.aux_len, hyper.aux_scb_width, False) for _ in range(m)], fcb=fcb())
                for _ in range(hyper.blocks)
            ] if hyper.has_pip else [],
            gate=GateWeights(W_g=z(F, F), W_l=z(F, F), b_g=z(1, F)) if hyper.has_hip and hyper.has_pip else None,
            out=OutputWeights(W_r=z(F, n_items), b_r=z(1, n_items)),
        )
        params._initialize(RngStream(hyper.seed if seed is None else seed), d)
        return params

    def _initialize(self, rng: RngStream, d: int) -> None:
        gen = rng.generator()
        for name, t in self.named():
            leaf = name.rsplit(".", 1)[-1]
            if name.startswith("emb."):
                bound = 0.1 / np.sqrt(d)
                t[...] = gen.uniform(-bound, bound, size=t.shape)
                t[list(self.tables.frozen_rows(name[4:]))] = 0.0
            elif leaf in ("ln_gamma", "ln_beta") or leaf.startswith("b_"):
                continue
            else:
                fan_in, fan_out = t.shape[-2], t.shape[-1]
                bound = np.sqrt(6.0 / (fan_in + fan_out))
                t[...] = gen.uniform(-bound, bound, size=t.shape)


def _tensor_sizes(hyper: HyperParams, n_items: int, n_behaviors: int) -> Iterator[int]:
    d, F = hyper.d, hyper.features
    m = n_behaviors - 1
    yield (n_items + 1) * d
    if hyper.uses_behavior_table:
        yield (n_behaviors + 1) * d
    if hyper.uses_transition_table:
        yield (n_behaviors + 1) ** 2 * d
    fcb = 2 * F * hyper.fcb_width + F * F + 2 * F if hyper.has_fcb else 0
    if hyper.has_hip:
        hip_scb = 2 * hyper.seq_len * hyper.scb_width + 2 * F if hyper.has_scb else 0
        yield hyper.blocks * (hip_scb + fcb) + F
    if hyper.has_pip:
        pip_scb = 2 * hyper.aux_len * hyper.aux_scb_width if hyper.has_scb else 0
        yield hyper.blocks * (m * pip_scb + fcb)
    if hyper.has_hip and hyper.has_pip:
        yield 2 * F * F + F
    yield F * n_items + n_items


def param_count(hyper: HyperParams, n_items: int, n_behaviors: int) -> int:
    """Closed-form number of trainable scalars for this configuration."""
    return int(sum(_tensor_sizes(hyper, n_items, n_behaviors)))


# ----------------------------------------------------------------------
# Gate, scores, loss
# ----------------------------------------------------------------------

@dataclass
class GateCache:
    e_g: np.ndarray
    e_l: np.ndarray
    g: np.ndarray


def gate_fuse(e_g: np.ndarray, e_l: np.ndarray, w: GateWeights) -> Tuple[np.ndarray, GateCache]:
    if e_g.shape != e_l.shape:
        raise DimensionError(f"gate: e_g {e_g.shape} vs e_l {e_l.shape}")
    g = sigmoid(e_g @ w.W_g + e_l @ w.W_l + w.b_g)
    return g * e_g + (1.0 - g) * e_l, GateCache(e_g=e_g, e_l=e_l, g=g)


def gate_backward(
    dz: np.ndarray, cache: GateCache, w: GateWeights, grads: GateWeights
) -> Tuple[np.ndarray, np.ndarray]:
    g = cache.g
    dpre = dz * (cache.e_g - cache.e_l) * g * (1.0 - g)
    grads.W_g += cache.e_g.T @ dpre
    grads.W_l += cache.e_l.T @ dpre
    grads.b_g += dpre
    de_g = dz * g + dpre @ w.W_g.T
    de_l = dz * (1.0 - g) + dpre @ w.W_l.T
    return de_g, de_l


def predict_scores(
    z: np.ndarray,
    W_r: np.ndarray,
    b_r: np.ndarray,
    activation: ScoreActivation = ScoreActivation.SOFTMAX,
) -> np.ndarray:
    """1×(|I|+1) scores; column 0 is the padding item and stays 0."""
    logits = (z @ W_r + b_r).reshape(-1)
    probs = softmax(logits) if activation is ScoreActivation.SOFTMAX else sigmoid(logits)
    scores = np.zeros(logits.size + 1, dtype=probs.dtype)
    scores[1:] = probs
    return scores[None, :]


def _target_column(scores: np.ndarray, target_item: int) -> int:
    n_items = scores.shape[-1] - 1
    if not 1 <= target_item <= n_items:
        raise DimensionError(f"target item {target_item} outside [1, {n_items}]")
    return target_item


def loss(scores: np.ndarray, target_item: int) -> float:
    """-[log r̂_y + Σ_{j≠y} log(1 - r̂_j)] over items 1..|I|, probabilities clamped."""
    y = _target_column(scores, target_item)
    p = np.clip(scores.reshape(-1)[1:], PROB_CLAMP, 1.0 - PROB_CLAMP)
    terms = np.log1p(-p)
    terms[y - 1] = np.log(p[y - 1])
    return float(-terms.sum())


def loss_grad(scores: np.ndarray, target_item: int) -> np.ndarray:
    """dloss/dprob for items 1..|I|; zero where the clamp is active."""
    y = _target_column(scores, target_item)
    raw = scores.reshape(-1)[1:]
    p = np.clip(raw, PROB_CLAMP, 1.0 - PROB_CLAMP)
    dp = 1.0 / (1.0 - p)
    dp[y - 1] = -1.0 / p[y - 1]
    dp[p != raw] = 0.0
    return dp


# ----------------------------------------------------------------------
# Forward / backward
# ----------------------------------------------------------------------

@dataclass
class ForwardCache:
    instance: TrainingInstance
    scores: np.ndarray
    z: np.ndarray
    hip: Optional[HipCache] = None
    pip: Optional[PipCache] = None
    gate: Optional[GateCache] = None


def forward(
    instance: TrainingInstance,
    params: ModelParams,
    hyper: HyperParams,
    mode: Mode = Mode.EVAL,
    rng: Optional[RngStream] = None,
) -> Tuple[np.ndarray, ForwardCache]:
    rng = rng or RngStream(hyper.seed)
    e_g = e_l = None
    hip_cache = pip_cache = gate_cache = None
    if hyper.has_hip:
        X0 = encode_hetero(instance.hetero, params.tables, hyper.variant)
        e_g, hip_cache = hip_forward(
            X0, params.hip_blocks, params.pool, instance.hetero.mask, mode, rng, hyper.dropout_rate
        )
    if hyper.has_pip:
        H0 = encode_aux(instance.aux, params.tables)
        e_l, pip_cache = pip_forward(
            H0, params.pip_blocks, instance.aux.mask, hyper.pip_scb_residual, hyper.pip_exclude_empty
        )
    if e_g is not None and e_l is not None:
        z, gate_cache = gate_fuse(e_g, e_l, params.gate)
    else:
        z = e_g if e_g is not None else e_l
    scores = predict_scores(z, params.out.W_r, params.out.b_r, hyper.score_activation)
    return scores, ForwardCache(
        instance=instance, scores=scores, z=z, hip=hip_cache, pip=pip_cache, gate=gate_cache
    )


def backward(
    cache: Optional[ForwardCache], params: ModelParams, hyper: HyperParams
) -> Tuple[float, ModelParams]:
    """Loss and gradients of one instance, in a grads object shaped like ``params``."""
    if cache is None:
        raise MissingCacheError("backward called without a forward cache")
    target = cache.instance.target_item
    value = loss(cache.scores, target)
    grads = params.zeros_like()

    probs = cache.scores.reshape(-1)[1:]
    dp = loss_grad(cache.scores, target)
    if hyper.score_activation is ScoreActivation.SOFTMAX:
        dlogits = softmax_backward(dp, probs)[None, :]
    else:
        dlogits = (dp * probs * (1.0 - probs))[None, :]
    grads.out.W_r += cache.z.T @ dlogits
    grads.out.b_r += dlogits
    dz = dlogits @ params.out.W_r.T

    if cache.gate is not None:
        de_g, de_l = gate_backward(dz, cache.gate, params.gate, grads.gate)
    else:
        de_g, de_l = (dz, None) if hyper.has_hip else (None, dz)

    inst = cache.instance
    if de_g is not None:
        hg = hip_backward(de_g, cache.hip, params.hip_blocks, params.pool)
        grads.hip_blocks, grads.pool = hg.blocks, hg.pool
        encode_hetero_backward(hg.dX0, inst.hetero, params.tables, hyper.variant, grads.tables)
    if de_l is not None:
        pg = pip_backward(de_l, cache.pip, params.pip_blocks)
        grads.pip_blocks = pg.blocks
        encode_aux_backward(pg.dH0, inst.aux, params.tables, grads.tables)
    return value, grads


def instance_gradients(
    instance: TrainingInstance,
    params: ModelParams,
    hyper: HyperParams,
    mode: Mode,
    rng: RngStream,
) -> Tuple[float, ModelParams]:
    _, cache = forward(instance, params, hyper, mode, rng)
    return backward(cache, params, hyper)


def batch_gradients(
    batch: Sequence[TrainingInstance],
    params: ModelParams,
    hyper: HyperParams,
    rng: RngStream,
    mode: Mode = Mode.TRAIN,
    threads: int = 1,
) -> Tuple[float, Dict[str, np.ndarray]]:
    """
    Mean loss and mean gradient over ``batch``.

    Instance i draws dropout from ``rng.child(i)``; per-instance gradients
    are summed in batch order, so the result does not depend on ``threads``.
    """
    if not batch:
        raise ConfigurationError("empty batch")
    jobs = (
        delayed(instance_gradients)(inst, params, hyper, mode, rng.child(i))
        for i, inst in enumerate(batch)
    )
    if threads > 1 and len(batch) > 1:
        results = Parallel(n_jobs=threads, prefer="threads")(jobs)
    else:
        results = [fn(*args, **kwargs) for fn, args, kwargs in jobs]

    total = 0.0
    summed = {name: np.zeros_like(t) for name, t in params.named()}
    for inst, (value, grads) in zip(batch, results):
        if not np.isfinite(value):
            raise NonFiniteError(f"non-finite loss {value} for instance {inst.label}")
        total += value
        for name, g in grads.named():
            summed[name] += g
    scale = 1.0 / len(batch)
    for g in summed.values():
        g *= scale
    return total * scale, summed


def train_step(
    batch: Sequence[TrainingInstance],
    params: ModelParams,
    hyper: HyperParams,
    rng: RngStream,
    threads: int = 1,
) -> float:
    """One Adam step on the batch-mean loss; params change in place."""
    mean_loss, grads = batch_gradients(batch, params, hyper, rng, Mode.TRAIN, threads)
    for name, tensor in params.named():
        state = params.adam.get(name)
        if state is None:
            state = params.adam[name] = AdamState.zeros_like(tensor)
        adam_step(tensor, grads[name], state, hyper.lr, hyper.weight_decay, name)
    logger.debug(f"train_step: batch={len(batch)} loss={mean_loss:.6f}")
    return mean_loss
