"""
Encoding - vocabularies, embedding tables and model inputs

Builds the two inputs of the model:

    X0 ∈ R^{L×2d}       heterogeneous sequence, row t = concat(M_t, V_{i_t})
    H0 ∈ R^{L'×m×2d}    recent auxiliary subsequences, row = concat(B_b, V_i)

with M_t = B_{b_t} + trans(b_t, b_{t+1}) (variant BT; S/B/T drop terms).

Index 0 is padding in every table. Sequences are left-padded, so the
position after a real event is never padding; the transition table reuses
next-behavior index 0 as the TERMINAL pseudo-behavior closing the last
position. Rows whose current behavior is 0 are padding rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from ..errors import ConfigurationError, CorruptDataError

PAD = 0
TERMINAL = 0


class Variant(str, Enum):
    """How behavior information enters X0"""
    S = "S"      # items only
    B = "B"      # + behavior embedding
    T = "T"      # + behavior transition embedding
    BT = "BT"    # + both

    @property
    def uses_behavior(self) -> bool:
        return self in (Variant.B, Variant.BT)

    @property
    def uses_transition(self) -> bool:
        return self in (Variant.T, Variant.BT)


# ----------------------------------------------------------------------
# Vocabulary
# ----------------------------------------------------------------------

@dataclass
class Vocab:
    """
    Dense index maps for items and behaviors.

    ``items[k]`` is the raw id of item index k+1; likewise for behaviors.
    Index 0 is reserved for padding in both spaces.
    """
    items: List[str]
    behaviors: List[str]
    target_behavior: int
    item_index: Dict[str, int] = field(init=False, repr=False)
    behavior_index: Dict[str, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.item_index = {raw: i + 1 for i, raw in enumerate(self.items)}
        self.behavior_index = {raw: i + 1 for i, raw in enumerate(self.behaviors)}
        if not 1 <= self.target_behavior <= len(self.behaviors):
            raise ConfigurationError(
                f"target behavior index {self.target_behavior} outside [1, {len(self.behaviors)}]"
            )

    @property
    def n_items(self) -> int:
        return len(self.items)

    @property
    def n_behaviors(self) -> int:
        return len(self.behaviors)

    @property
    def aux_behaviors(self) -> List[int]:
        """Auxiliary behavior indices in ascending order (m = |B| - 1 of them)."""
        return [b for b in range(1, self.n_behaviors + 1) if b != self.target_behavior]

    @property
    def target_name(self) -> str:
        return self.behaviors[self.target_behavior - 1]

    def item_id(self, index: int) -> str:
        return self.items[index - 1]

    def to_dict(self) -> Dict:
        return {
            "items": list(self.items),
            "behaviors": list(self.behaviors),
            "target_behavior": self.target_behavior,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "Vocab":
        return cls(
            items=list(data["items"]),
            behaviors=list(data["behaviors"]),
            target_behavior=int(data["target_behavior"]),
        )


def build_vocab(records, target_behavior_name: str) -> Vocab:
    """
    Assign dense indices in first-appearance order.

    ``records`` is a records frame (columns user/item/behavior/timestamp) or
    any sequence of InteractionRecord.
    """
    frame = records if isinstance(records, pd.DataFrame) else pd.DataFrame(list(records))
    if frame.empty:
        raise ConfigurationError("build_vocab: no records")
    items = [str(x) for x in pd.unique(frame["item"])]
    behaviors = [str(x) for x in pd.unique(frame["behavior"])]
    if target_behavior_name not in behaviors:
        raise ConfigurationError(
            f"target behavior '{target_behavior_name}' not among {behaviors}"
        )
    return Vocab(
        items=items,
        behaviors=behaviors,
        target_behavior=behaviors.index(target_behavior_name) + 1,
    )


# ----------------------------------------------------------------------
# Embedding tables
# ----------------------------------------------------------------------

@dataclass
class EmbeddingTables:
    """
    Item (V), behavior (B) and transition tables.

    ``behavior`` / ``transition`` are None when the configuration never
    reads them. Transition row for (b, b') is b·(|B|+1) + b'.
    """
    item: np.ndarray
    n_behaviors: int
    behavior: Optional[np.ndarray] = None
    transition: Optional[np.ndarray] = None

    @property
    def dim(self) -> int:
        return self.item.shape[1]

    def zeros_like(self) -> "EmbeddingTables":
        return EmbeddingTables(
            item=np.zeros_like(self.item),
            n_behaviors=self.n_behaviors,
            behavior=None if self.behavior is None else np.zeros_like(self.behavior),
            transition=None if self.transition is None else np.zeros_like(self.transition),
        )

    def frozen_rows(self, name: str) -> Sequence[int]:
        if name == "transition":
            return range(self.n_behaviors + 1)
        return (PAD,)


def transition_index(current: np.ndarray, following: np.ndarray, n_behaviors: int) -> np.ndarray:
    return current * (n_behaviors + 1) + following


def decode_transition(index: np.ndarray, n_behaviors: int) -> Tuple[np.ndarray, np.ndarray]:
    return np.divmod(index, n_behaviors + 1)


# ----------------------------------------------------------------------
# Model inputs
# ----------------------------------------------------------------------

@dataclass
class HeteroSequence:
    """Length-L left-padded window of (item, behavior) events."""
    items: np.ndarray
    behaviors: np.ndarray
    mask: np.ndarray
    target_item: int = PAD
    user: str = ""

    @property
    def length(self) -> int:
        return int(self.items.shape[0])

    def transitions(self, n_behaviors: int) -> np.ndarray:
        following = np.empty_like(self.behaviors)
        following[:-1] = self.behaviors[1:]
        following[-1] = TERMINAL
        return transition_index(self.behaviors, following, n_behaviors)


@dataclass
class AuxSubsequences:
    """Per auxiliary behavior: the last L' items with that behavior, left-padded."""
    items: np.ndarray        # (m, L')
    behaviors: np.ndarray    # (m, L')
    mask: np.ndarray         # (m, L')
    aux_behaviors: Tuple[int, ...] = ()

    @property
    def n_aux(self) -> int:
        return int(self.items.shape[0])

    @property
    def length(self) -> int:
        return int(self.items.shape[1])

    def empty_slices(self) -> np.ndarray:
        return ~self.mask.any(axis=1)


def _left_pad(values: Sequence[int], length: int) -> np.ndarray:
    out = np.zeros(length, dtype=np.int64)
    tail = list(values)[-length:] if length else []
    if tail:
        out[length - len(tail):] = tail
    return out


def make_hetero(
    history: Sequence[Tuple[int, int]],
    seq_len: int,
    target_item: int = PAD,
    user: str = "",
) -> HeteroSequence:
    """Keep the most recent ``seq_len`` (item, behavior) events, left-padded."""
    window = list(history)[-seq_len:]
    items = _left_pad([i for i, _ in window], seq_len)
    behaviors = _left_pad([b for _, b in window], seq_len)
    return HeteroSequence(
        items=items, behaviors=behaviors, mask=items != PAD, target_item=target_item, user=user
    )


def extract_aux(
    full_history: Iterable[Tuple[int, int]],
    aux_len: int,
    vocab: Vocab,
) -> AuxSubsequences:
    """
    For every non-target behavior, the ``aux_len`` most recent items with
    that behavior from ``full_history`` (events before the prediction point).
    """
    if aux_len < 1:
        raise ConfigurationError(f"aux_len must be >= 1, got {aux_len}")
    history = list(full_history)
    aux = vocab.aux_behaviors
    items = np.zeros((len(aux), aux_len), dtype=np.int64)
    behaviors = np.zeros_like(items)
    for j, b in enumerate(aux):
        tail = [item for item, behavior in history if behavior == b][-aux_len:]
        items[j] = _left_pad(tail, aux_len)
        behaviors[j] = np.where(items[j] != PAD, b, PAD)
    return AuxSubsequences(items=items, behaviors=behaviors, mask=items != PAD, aux_behaviors=tuple(aux))


def _check_bounds(indices: np.ndarray, mask: np.ndarray, rows: int, what: str) -> None:
    bad = mask & ((indices < 1) | (indices >= rows))
    if bad.any():
        pos = tuple(int(p) for p in np.argwhere(bad)[0])
        raise CorruptDataError(
            f"{what} index {int(indices[pos])} at position {list(pos)} outside [1, {rows - 1}]"
        )


def encode_hetero(seq: HeteroSequence, tables: EmbeddingTables, variant: Variant) -> np.ndarray:
    """X0 ∈ R^{L×2d}; padded positions are zero rows."""
    d = tables.dim
    real = seq.mask
    X = np.zeros((seq.length, 2 * d), dtype=tables.item.dtype)
    _check_bounds(seq.items, real, tables.item.shape[0], "item")
    X[real, d:] = tables.item[seq.items[real]]
    if variant.uses_behavior:
        _check_bounds(seq.behaviors, real, tables.behavior.shape[0], "behavior")
        X[real, :d] += tables.behavior[seq.behaviors[real]]
    if variant.uses_transition:
        _check_bounds(seq.behaviors, real, tables.n_behaviors + 1, "behavior")
        X[real, :d] += tables.transition[seq.transitions(tables.n_behaviors)[real]]
    return X


def encode_aux(aux: AuxSubsequences, tables: EmbeddingTables) -> np.ndarray:
    """H0 ∈ R^{L'×m×2d}; slice [:, j, :] holds auxiliary behavior j."""
    d = tables.dim
    H = np.zeros((aux.length, aux.n_aux, 2 * d), dtype=tables.item.dtype)
    _check_bounds(aux.items, aux.mask, tables.item.shape[0], "aux item")
    _check_bounds(aux.behaviors, aux.mask, tables.behavior.shape[0], "aux behavior")
    real = aux.mask.T                       # (L', m)
    H[real, :d] = tables.behavior[aux.behaviors.T[real]]
    H[real, d:] = tables.item[aux.items.T[real]]
    return H


# ----------------------------------------------------------------------
# Backward
# ----------------------------------------------------------------------

def embedding_backward(
    grad_rows: np.ndarray,
    indices: np.ndarray,
    table: np.ndarray,
    out: Optional[np.ndarray] = None,
    frozen_rows: Sequence[int] = (PAD,),
) -> np.ndarray:
    """Scatter-add row gradients into ``out`` (allocated if None); frozen rows stay zero."""
    if out is None:
        out = np.zeros_like(table)
    np.add.at(out, np.asarray(indices).reshape(-1), grad_rows.reshape(-1, table.shape[1]))
    out[list(frozen_rows)] = 0.0
    return out


def encode_hetero_backward(
    dX: np.ndarray,
    seq: HeteroSequence,
    tables: EmbeddingTables,
    variant: Variant,
    grads: EmbeddingTables,
) -> EmbeddingTables:
    """Accumulate dL/dX0 into the table gradients held by ``grads``."""
    d = tables.dim
    real = seq.mask
    embedding_backward(dX[real, d:], seq.items[real], tables.item, out=grads.item)
    if variant.uses_behavior:
        embedding_backward(dX[real, :d], seq.behaviors[real], tables.behavior, out=grads.behavior)
    if variant.uses_transition:
        embedding_backward(
            dX[real, :d],
            seq.transitions(tables.n_behaviors)[real],
            tables.transition,
            out=grads.transition,
            frozen_rows=tables.frozen_rows("transition"),
        )
    return grads


def encode_aux_backward(
    dH: np.ndarray,
    aux: AuxSubsequences,
    tables: EmbeddingTables,
    grads: EmbeddingTables,
) -> EmbeddingTables:
    d = tables.dim
    real = aux.mask.T
    embedding_backward(dH[real, :d], aux.behaviors.T[real], tables.behavior, out=grads.behavior)
    embedding_backward(dH[real, d:], aux.items.T[real], tables.item, out=grads.item)
    return grads
