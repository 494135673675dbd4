"""
HIP - Heterogeneous Interest Perception

N stacked (SCB, FCB) blocks over X0 followed by masked weighted pooling:

    X' = SCB(X)        mixes the L positions (token mixing via transpose)
    X  = FCB(X')       mixes the 2d feature channels, H heads
    e_g = dropout(Σ_t α_t · x_t),  α = softmax over real positions

The block primitives (SCB core, FCB branch) are shared with PIP.
Every ``*_forward`` returns ``(output, cache)``; the matching
``*_backward`` consumes the cache and accumulates into a grads object of
the same shape as the weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import ConfigurationError, DimensionError, MissingCacheError
from .numerics import (
    LayerNormCache,
    Mode,
    RngStream,
    dropout_mask,
    gelu,
    gelu_grad,
    layer_norm_backward,
    layer_norm_forward,
    sigmoid,
    softmax,
    softmax_backward,
)


# ----------------------------------------------------------------------
# Weight containers
# ----------------------------------------------------------------------

class TensorGroup:
    """Dataclass mixin: iterate allocated tensors by dotted name."""

    def named(self, prefix: str) -> Iterator[Tuple[str, np.ndarray]]:
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, np.ndarray):
                yield f"{prefix}.{f.name}", value

    def zeros_like(self):
        return type(self)(**{
            f.name: np.zeros_like(v) if isinstance(v, np.ndarray) else v
            for f in fields(self)
            for v in [getattr(self, f.name)]
        })


@dataclass
class ScbWeights(TensorGroup):
    """Token-mixing MLP over L positions. PIP's SCB carries no LayerNorm."""
    W1: np.ndarray                      # L × d_t
    W2: np.ndarray                      # d_t × L
    ln_gamma: Optional[np.ndarray] = None
    ln_beta: Optional[np.ndarray] = None

    @property
    def length(self) -> int:
        return self.W1.shape[0]


@dataclass
class FcbWeights(TensorGroup):
    """Channel-mixing MLP, one (W1, W2) pair per head, stacked on axis 0."""
    W1: np.ndarray                      # H × (2d/H) × d_c
    W2: np.ndarray                      # H × d_c × (2d/H)
    W_O: np.ndarray                     # 2d × 2d
    ln_gamma: np.ndarray
    ln_beta: np.ndarray

    @property
    def heads(self) -> int:
        return self.W1.shape[0]


@dataclass
class PoolWeights(TensorGroup):
    W_alpha: np.ndarray                 # 2d × 1


@dataclass
class HipBlockWeights:
    """One (SCB, FCB) block; either side is None when ablated."""
    scb: Optional[ScbWeights]
    fcb: Optional[FcbWeights]

    def named(self, prefix: str) -> Iterator[Tuple[str, np.ndarray]]:
        if self.scb is not None:
            yield from self.scb.named(f"{prefix}.scb")
        if self.fcb is not None:
            yield from self.fcb.named(f"{prefix}.fcb")

    def zeros_like(self) -> "HipBlockWeights":
        return HipBlockWeights(
            scb=None if self.scb is None else self.scb.zeros_like(),
            fcb=None if self.fcb is None else self.fcb.zeros_like(),
        )


def check_heads(features: int, heads: int) -> None:
    if heads < 1 or features % heads:
        raise ConfigurationError(f"{heads} heads do not divide {features} features")


# ----------------------------------------------------------------------
# SCB
# ----------------------------------------------------------------------

@dataclass
class ScbCoreCache:
    A: np.ndarray       # F × L  (transposed input)
    P: np.ndarray       # F × d_t pre-activation
    G: np.ndarray       # F × d_t
    w: ScbWeights


def scb_core_forward(Xn: np.ndarray, w: ScbWeights) -> Tuple[np.ndarray, ScbCoreCache]:
    """transpose(GELU(Xnᵀ·W1)·W2): the residual-free mixing branch."""
    if Xn.shape[0] != w.W1.shape[0]:
        raise DimensionError(f"SCB: input {Xn.shape} has {Xn.shape[0]} positions, W1 {w.W1.shape}")
    A = Xn.T
    P = A @ w.W1
    G = gelu(P)
    return (G @ w.W2).T, ScbCoreCache(A=A, P=P, G=G, w=w)


def scb_core_backward(dB: np.ndarray, cache: ScbCoreCache, grads: ScbWeights) -> np.ndarray:
    dQ = dB.T
    grads.W2 += cache.G.T @ dQ
    dP = (dQ @ cache.w.W2.T) * gelu_grad(cache.P)
    grads.W1 += cache.A.T @ dP
    return (dP @ cache.w.W1.T).T


@dataclass
class ScbCache:
    core: ScbCoreCache
    ln: Optional[LayerNormCache]


def scb_forward(X: np.ndarray, w: ScbWeights) -> Tuple[np.ndarray, ScbCache]:
    """Y = X + transpose(GELU(LN(X)ᵀ·W1)·W2)"""
    ln_cache = None
    Xn = X
    if w.ln_gamma is not None:
        Xn, ln_cache = layer_norm_forward(X, w.ln_gamma, w.ln_beta)
    branch, core = scb_core_forward(Xn, w)
    return X + branch, ScbCache(core=core, ln=ln_cache)


def scb_backward(dY: np.ndarray, cache: ScbCache, grads: ScbWeights) -> np.ndarray:
    dXn = scb_core_backward(dY, cache.core, grads)
    if cache.ln is None:
        return dY + dXn
    dX_ln, dgamma, dbeta = layer_norm_backward(dXn, cache.ln)
    grads.ln_gamma += dgamma
    grads.ln_beta += dbeta
    return dY + dX_ln


# ----------------------------------------------------------------------
# FCB
# ----------------------------------------------------------------------

@dataclass
class FcbCache:
    ln: LayerNormCache
    Xh: np.ndarray      # H × rows × f
    S: np.ndarray       # H × rows × d_c
    C: np.ndarray       # rows × 2d (heads concatenated)
    w: FcbWeights


def fcb_branch_forward(X: np.ndarray, w: FcbWeights) -> Tuple[np.ndarray, FcbCache]:
    """concat_h(sigmoid(LN(X)_h·W1_h)·W2_h)·W_O over the rows of X."""
    rows, features = X.shape
    heads = w.heads
    check_heads(features, heads)
    if w.W_O.shape != (features, features):
        raise DimensionError(f"FCB: W_O {w.W_O.shape} vs {features} features")
    Xn, ln_cache = layer_norm_forward(X, w.ln_gamma, w.ln_beta)
    Xh = Xn.reshape(rows, heads, features // heads).transpose(1, 0, 2)
    S = sigmoid(Xh @ w.W1)
    C = (S @ w.W2).transpose(1, 0, 2).reshape(rows, features)
    return C @ w.W_O, FcbCache(ln=ln_cache, Xh=Xh, S=S, C=C, w=w)


def fcb_branch_backward(dB: np.ndarray, cache: FcbCache, grads: FcbWeights) -> np.ndarray:
    w = cache.w
    rows, features = dB.shape
    heads = w.heads
    grads.W_O += cache.C.T @ dB
    dO = (dB @ w.W_O.T).reshape(rows, heads, features // heads).transpose(1, 0, 2)
    grads.W2 += cache.S.transpose(0, 2, 1) @ dO
    dP = (dO @ w.W2.transpose(0, 2, 1)) * cache.S * (1.0 - cache.S)
    grads.W1 += cache.Xh.transpose(0, 2, 1) @ dP
    dXn = (dP @ w.W1.transpose(0, 2, 1)).transpose(1, 0, 2).reshape(rows, features)
    dX, dgamma, dbeta = layer_norm_backward(dXn, cache.ln)
    grads.ln_gamma += dgamma
    grads.ln_beta += dbeta
    return dX


def fcb_forward(X: np.ndarray, w: FcbWeights) -> Tuple[np.ndarray, FcbCache]:
    branch, cache = fcb_branch_forward(X, w)
    return X + branch, cache


def fcb_backward(dY: np.ndarray, cache: FcbCache, grads: FcbWeights) -> np.ndarray:
    return dY + fcb_branch_backward(dY, cache, grads)


# ----------------------------------------------------------------------
# Pooling
# ----------------------------------------------------------------------

@dataclass
class PoolCache:
    X: np.ndarray
    alpha: np.ndarray
    drop: Optional[np.ndarray]
    w: PoolWeights


def pool(
    X: np.ndarray,
    w: PoolWeights,
    mask: np.ndarray,
    dropout_rate: float = 0.0,
    mode: Mode = Mode.EVAL,
    rng: Optional[RngStream] = None,
) -> Tuple[np.ndarray, PoolCache]:
    """e_g = dropout(αᵀX), α = softmax(X·W_α) over real positions only."""
    alpha = softmax((X @ w.W_alpha).reshape(-1), mask)
    pooled = alpha[None, :] @ X
    drop = dropout_mask(pooled.shape, dropout_rate, mode, rng or RngStream(0), dtype=X.dtype)
    e_g = pooled if drop is None else pooled * drop
    return e_g, PoolCache(X=X, alpha=alpha, drop=drop, w=w)


def pool_backward(de: np.ndarray, cache: PoolCache, grads: PoolWeights) -> np.ndarray:
    dpooled = de if cache.drop is None else de * cache.drop
    dX = cache.alpha[:, None] * dpooled
    ds = softmax_backward((cache.X @ dpooled.T).reshape(-1), cache.alpha)[:, None]
    grads.W_alpha += cache.X.T @ ds
    return dX + ds @ cache.w.W_alpha.T


# ----------------------------------------------------------------------
# Full HIP
# ----------------------------------------------------------------------

@dataclass
class HipCache:
    blocks: List[Tuple[Optional[ScbCache], Optional[FcbCache]]] = field(default_factory=list)
    pool: Optional[PoolCache] = None


@dataclass
class HipGrads:
    blocks: List[HipBlockWeights]
    pool: PoolWeights
    dX0: np.ndarray


def hip_forward(
    X0: np.ndarray,
    blocks: Sequence[HipBlockWeights],
    pool_w: PoolWeights,
    mask: np.ndarray,
    mode: Mode = Mode.EVAL,
    rng: Optional[RngStream] = None,
    dropout_rate: float = 0.0,
) -> Tuple[np.ndarray, HipCache]:
    if not blocks:
        raise ConfigurationError("HIP needs at least one block")
    cache = HipCache()
    X = X0
    for block in blocks:
        scb_cache = fcb_cache = None
        if block.scb is not None:
            X, scb_cache = scb_forward(X, block.scb)
        if block.fcb is not None:
            X, fcb_cache = fcb_forward(X, block.fcb)
        cache.blocks.append((scb_cache, fcb_cache))
    e_g, cache.pool = pool(X, pool_w, mask, dropout_rate, mode, rng)
    return e_g, cache


def hip_backward(
    grad_e_g: np.ndarray,
    cache: Optional[HipCache],
    blocks: Sequence[HipBlockWeights],
    pool_w: PoolWeights,
) -> HipGrads:
    if cache is None or cache.pool is None:
        raise MissingCacheError("hip_backward called without a forward cache")
    grads = HipGrads(
        blocks=[b.zeros_like() for b in blocks],
        pool=pool_w.zeros_like(),
        dX0=np.empty(0),
    )
    dX = pool_backward(grad_e_g, cache.pool, grads.pool)
    for (scb_cache, fcb_cache), g in zip(reversed(cache.blocks), reversed(grads.blocks)):
        if fcb_cache is not None:
            dX = fcb_backward(dX, fcb_cache, g.fcb)
        if scb_cache is not None:
            dX = scb_backward(dX, scb_cache, g.scb)
    grads.dX0 = dX
    return grads
