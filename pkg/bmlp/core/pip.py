"""
PIP - Purchase Intent Perception

Works on the recent auxiliary subsequences H0 ∈ R^{L'×m×2d}. Each block:

    S_j = SCB_j(H[:, j, :])              per auxiliary behavior, no residual
    H   = H + FCB(LN(stack_j S_j))       one FCB shared over all L'·m rows

and the intent vector is the mean of the last-position rows:
e_l = mean_j H^{(N)}[L'-1, j, :].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import ConfigurationError, DimensionError, MissingCacheError
from .hip import (
    FcbCache,
    FcbWeights,
    ScbCoreCache,
    ScbWeights,
    fcb_branch_backward,
    fcb_branch_forward,
    scb_core_backward,
    scb_core_forward,
)


@dataclass
class PipBlockWeights:
    """Per-behavior SCBs (None entries when SCB is ablated) and the shared FCB."""
    scbs: List[Optional[ScbWeights]]
    fcb: Optional[FcbWeights]

    @property
    def n_aux(self) -> int:
        return len(self.scbs)

    def named(self, prefix: str) -> Iterator[Tuple[str, np.ndarray]]:
        for j, scb in enumerate(self.scbs):
            if scb is not None:
                yield from scb.named(f"{prefix}.scb.{j}")
        if self.fcb is not None:
            yield from self.fcb.named(f"{prefix}.fcb")

    def zeros_like(self) -> "PipBlockWeights":
        return PipBlockWeights(
            scbs=[None if s is None else s.zeros_like() for s in self.scbs],
            fcb=None if self.fcb is None else self.fcb.zeros_like(),
        )


@dataclass
class PipBlockCache:
    scbs: List[Optional[ScbCoreCache]]
    fcb: Optional[FcbCache]
    shape: Tuple[int, int, int]


def pip_block(
    H_in: np.ndarray, w: PipBlockWeights, scb_residual: bool = False
) -> Tuple[np.ndarray, PipBlockCache]:
    """
    One PIP block. With FCB ablated the output is H_in + H_s; with SCB
    ablated H_s is H_in itself.
    """
    if H_in.ndim != 3 or H_in.shape[1] != w.n_aux:
        raise DimensionError(f"pip_block: input {H_in.shape} vs {w.n_aux} auxiliary behaviors")
    length, m, features = H_in.shape
    H_s = np.empty_like(H_in)
    scb_caches: List[Optional[ScbCoreCache]] = []
    for j, scb in enumerate(w.scbs):
        X_j = H_in[:, j, :]
        if scb is None:
            H_s[:, j, :] = X_j
            scb_caches.append(None)
            continue
        branch, core = scb_core_forward(X_j, scb)
        H_s[:, j, :] = X_j + branch if scb_residual else branch
        scb_caches.append(core)

    fcb_cache = None
    if w.fcb is None:
        out = H_in + H_s
    else:
        branch, fcb_cache = fcb_branch_forward(H_s.reshape(length * m, features), w.fcb)
        out = H_in + branch.reshape(length, m, features)
    return out, PipBlockCache(scbs=scb_caches, fcb=fcb_cache, shape=(length, m, features))


def pip_block_backward(
    dH: np.ndarray, cache: PipBlockCache, grads: PipBlockWeights, scb_residual: bool = False
) -> np.ndarray:
    length, m, features = cache.shape
    dH_in = dH.copy()
    if cache.fcb is None:
        dH_s = dH
    else:
        dH_s = fcb_branch_backward(dH.reshape(length * m, features), cache.fcb, grads.fcb)
        dH_s = dH_s.reshape(length, m, features)
    for j, core in enumerate(cache.scbs):
        if core is None:
            dH_in[:, j, :] += dH_s[:, j, :]
            continue
        dH_in[:, j, :] += scb_core_backward(dH_s[:, j, :], core, grads.scbs[j])
        if scb_residual:
            dH_in[:, j, :] += dH_s[:, j, :]
    return dH_in


def intent_slices(aux_mask: np.ndarray, exclude_empty: bool) -> np.ndarray:
    """Indices of the slices averaged into e_l."""
    m = aux_mask.shape[0]
    if exclude_empty:
        live = np.flatnonzero(aux_mask.any(axis=1))
        if live.size:
            return live
    return np.arange(m)


def pip_intent(H_N: np.ndarray, aux_mask: np.ndarray, exclude_empty: bool = False) -> np.ndarray:
    """Mean of the final-position row over the auxiliary slices, shape 1×2d."""
    picked = intent_slices(aux_mask, exclude_empty)
    return H_N[-1, picked, :].mean(axis=0, keepdims=True)


@dataclass
class PipCache:
    blocks: List[PipBlockCache] = field(default_factory=list)
    picked: Optional[np.ndarray] = None
    shape: Tuple[int, int, int] = (0, 0, 0)
    scb_residual: bool = False


@dataclass
class PipGrads:
    blocks: List[PipBlockWeights]
    dH0: np.ndarray


def pip_forward(
    H0: np.ndarray,
    blocks: Sequence[PipBlockWeights],
    aux_mask: np.ndarray,
    scb_residual: bool = False,
    exclude_empty: bool = False,
) -> Tuple[np.ndarray, PipCache]:
    if not blocks:
        raise ConfigurationError("PIP needs at least one block")
    cache = PipCache(shape=H0.shape, scb_residual=scb_residual)
    H = H0
    for block in blocks:
        H, block_cache = pip_block(H, block, scb_residual)
        cache.blocks.append(block_cache)
    cache.picked = intent_slices(aux_mask, exclude_empty)
    return H[-1, cache.picked, :].mean(axis=0, keepdims=True), cache


def pip_backward(
    grad_e_l: np.ndarray, cache: Optional[PipCache], blocks: Sequence[PipBlockWeights]
) -> PipGrads:
    if cache is None or cache.picked is None:
        raise MissingCacheError("pip_backward called without a forward cache")
    grads = PipGrads(blocks=[b.zeros_like() for b in blocks], dH0=np.empty(0))
    dH = np.zeros(cache.shape, dtype=grad_e_l.dtype)
    dH[-1, cache.picked, :] = grad_e_l / len(cache.picked)
    for block_cache, g in zip(reversed(cache.blocks), reversed(grads.blocks)):
        dH = pip_block_backward(dH, block_cache, g, cache.scb_residual)
    grads.dH0 = dH
    return grads
