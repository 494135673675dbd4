"""
Numerics - the dense tensor substrate

Every tensor is a row-major ``np.ndarray``. float64 is the default so that
gradient checks are meaningful; float32 is only used by the scaling
benchmark, which passes the dtype explicitly when it builds parameters.

Each differentiable op comes as a pair:

    y, cache = op_forward(x, ...)
    dx, *dparams = op_backward(dy, cache)

All functions are pure given their inputs and an explicit RngStream.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Iterable, Optional, Tuple

import numpy as np
from loguru import logger
from scipy.special import erf, expit

from ..errors import DimensionError, InvalidMaskError, NonFiniteError

LN_EPS = 1e-5
_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


class Mode(Enum):
    """Forward-pass mode"""
    TRAIN = "train"
    EVAL = "eval"


class Activation(Enum):
    """Elementwise activations used by the blocks"""
    GELU = "gelu"
    SIGMOID = "sigmoid"


# ----------------------------------------------------------------------
# Random streams
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class RngStream:
    """
    Reproducible random stream.

    Identical ``(seed, counter, lane)`` always yields identical draws.
    ``child(lane)`` derives an independent stream, e.g. one per instance of
    a batch, so dropout masks do not depend on worker scheduling.
    """
    seed: int
    counter: int = 0
    lane: int = 0

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.counter, self.lane))
        return np.random.Generator(np.random.PCG64(seq))

    def advance(self, steps: int = 1) -> "RngStream":
        return RngStream(self.seed, self.counter + steps, self.lane)

    def child(self, lane: int) -> "RngStream":
        return RngStream(self.seed, self.counter, lane + 1)


# ----------------------------------------------------------------------
# Dense layer
# ----------------------------------------------------------------------

def dense(X: np.ndarray, W: np.ndarray, b: Optional[np.ndarray] = None) -> np.ndarray:
    """Y = X·W (+ b). Raises DimensionError naming both shapes on mismatch."""
    if X.ndim != 2 or W.ndim != 2 or X.shape[1] != W.shape[0]:
        raise DimensionError(f"dense: cannot multiply {X.shape} by {W.shape}")
    Y = X @ W
    if b is not None:
        if b.shape not in ((1, W.shape[1]), (W.shape[1],)):
            raise DimensionError(f"dense: bias {b.shape} does not match output {Y.shape}")
        Y = Y + b
    return Y


def dense_backward(
    dY: np.ndarray, X: np.ndarray, W: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (dX, dW, db) for Y = X·W + b."""
    return dY @ W.T, X.T @ dY, dY.sum(axis=0, keepdims=True)


# ----------------------------------------------------------------------
# Activations
# ----------------------------------------------------------------------

def gelu(X: np.ndarray) -> np.ndarray:
    """Exact GELU: 0.5·x·(1 + erf(x/√2))."""
    return 0.5 * X * (1.0 + erf(X * _INV_SQRT2))


def gelu_grad(X: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(X * _INV_SQRT2)) + X * np.exp(-0.5 * X * X) * _INV_SQRT2PI


def sigmoid(X: np.ndarray) -> np.ndarray:
    return expit(X)


def activation(kind: Activation, X: np.ndarray) -> np.ndarray:
    if kind is Activation.GELU:
        return gelu(X)
    return sigmoid(X)


def activation_grad(kind: Activation, X: np.ndarray) -> np.ndarray:
    """Derivative of ``activation(kind, ·)`` evaluated at X."""
    if kind is Activation.GELU:
        return gelu_grad(X)
    s = sigmoid(X)
    return s * (1.0 - s)


# ----------------------------------------------------------------------
# Layer normalization (last axis)
# ----------------------------------------------------------------------

@dataclass
class LayerNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray


def layer_norm_forward(
    X: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = LN_EPS
) -> Tuple[np.ndarray, LayerNormCache]:
    if gamma.shape[-1] != X.shape[-1] or beta.shape[-1] != X.shape[-1]:
        raise DimensionError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} vs input {X.shape}")
    mu = X.mean(axis=-1, keepdims=True)
    centered = X - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    return xhat * gamma + beta, LayerNormCache(xhat=xhat, inv_std=inv_std, gamma=gamma)


def layer_norm(
    X: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = LN_EPS
) -> np.ndarray:
    """Standardize each row, then scale by gamma and shift by beta."""
    return layer_norm_forward(X, gamma, beta, eps)[0]


def layer_norm_backward(
    dY: np.ndarray, cache: LayerNormCache
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (dX, dgamma, dbeta); gamma/beta grads are summed over all rows."""
    xhat = cache.xhat
    flat_dy = dY.reshape(-1, dY.shape[-1])
    flat_xhat = xhat.reshape(-1, xhat.shape[-1])
    dgamma = (flat_dy * flat_xhat).sum(axis=0, keepdims=True)
    dbeta = flat_dy.sum(axis=0, keepdims=True)
    dxhat = dY * cache.gamma
    dX = cache.inv_std * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dX, dgamma, dbeta


# ----------------------------------------------------------------------
# Softmax
# ----------------------------------------------------------------------

def softmax(v: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Softmax over the last axis of a vector (or 1×n row).

    Masked-out entries (mask False) are excluded and come out exactly 0.
    Max-subtraction keeps large logits from overflowing.
    """
    flat = np.asarray(v).reshape(-1)
    out = np.zeros_like(flat)
    if mask is None:
        keep = np.ones(flat.shape, dtype=bool)
    else:
        keep = np.asarray(mask, dtype=bool).reshape(-1)
        if keep.shape != flat.shape:
            raise DimensionError(f"softmax: mask {keep.shape} vs logits {flat.shape}")
        if not keep.any():
            raise InvalidMaskError("softmax: every entry is masked")
    live = flat[keep]
    e = np.exp(live - live.max())
    out[keep] = e / e.sum()
    return out.reshape(np.shape(v))


def softmax_backward(dp: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. logits; masked entries (p == 0) receive 0."""
    return p * (dp - np.sum(p * dp))


# ----------------------------------------------------------------------
# Dropout (inverted)
# ----------------------------------------------------------------------

def dropout_mask(
    shape: Tuple[int, ...], rate: float, mode: Mode, rng: RngStream, dtype=np.float64
) -> Optional[np.ndarray]:
    """
    Scale mask for inverted dropout, or None when dropout is the identity.

    Survivors are scaled by 1/(1-rate) so eval mode needs no rescaling.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode is Mode.EVAL or rate == 0.0:
        return None
    keep = rng.generator().random(shape) >= rate
    return keep.astype(dtype) / (1.0 - rate)


def dropout(X: np.ndarray, rate: float, mode: Mode, rng: RngStream) -> np.ndarray:
    mask = dropout_mask(X.shape, rate, mode, rng, dtype=X.dtype)
    return X if mask is None else X * mask


# ----------------------------------------------------------------------
# Adam
# ----------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moments and step counter for one parameter tensor."""
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, param: np.ndarray, **kwargs) -> "AdamState":
        return cls(m=np.zeros_like(param), v=np.zeros_like(param), **kwargs)


def adam_step(
    param: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
    name: str = "param",
) -> Tuple[np.ndarray, AdamState]:
    """
    Bias-corrected Adam update, applied to ``param`` in place.

    Weight decay is plain L2: ``weight_decay * param`` is added to the
    gradient before the moment update.
    """
    if grad.shape != param.shape:
        raise DimensionError(f"adam_step: grad {grad.shape} vs param {param.shape} ({name})")
    if not np.all(np.isfinite(grad)):
        bad = int(np.size(grad) - np.count_nonzero(np.isfinite(grad)))
        raise NonFiniteError(
            f"non-finite gradient for '{name}' at step {state.t + 1} ({bad} entries)"
        )
    g = grad + weight_decay * param if weight_decay else grad
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * (g * g)
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    param -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return param, state


# ----------------------------------------------------------------------
# Gradient checking
# ----------------------------------------------------------------------

@dataclass
class GradCheckResult:
    """Worst relative error found, and where."""
    max_rel_error: float
    worst_tensor: str = ""
    worst_index: Tuple[int, ...] = ()
    per_tensor: Dict[str, float] = field(default_factory=dict)


def grad_check(
    loss_fn: Callable[[], float],
    params: Dict[str, np.ndarray],
    analytic: Dict[str, np.ndarray],
    eps: float = 1e-5,
    samples: int = 20,
    rng: Optional[RngStream] = None,
    floor: float = 1e-8,
    names: Optional[Iterable[str]] = None,
) -> GradCheckResult:
    """
    Compare analytic gradients with central finite differences.

    ``loss_fn`` re-evaluates the loss from the *current* contents of
    ``params``; coordinates are perturbed in place and restored. For each
    tensor, ``samples`` coordinates are drawn at random (all of them when the
    tensor is smaller). Relative error is |a-n| / max(|a|, |n|, floor).
    """
    gen = (rng or RngStream(seed=0)).generator()
    result = GradCheckResult(max_rel_error=0.0)
    for name in names or params.keys():
        tensor = params[name]
        grad = analytic[name]
        if tensor.size <= samples:
            flat_ids = np.arange(tensor.size)
        else:
            flat_ids = gen.choice(tensor.size, size=samples, replace=False)
        worst = 0.0
        for flat in flat_ids:
            idx = np.unravel_index(int(flat), tensor.shape)
            original = tensor[idx]
            tensor[idx] = original + eps
            plus = loss_fn()
            tensor[idx] = original - eps
            minus = loss_fn()
            tensor[idx] = original
            numeric = (plus - minus) / (2.0 * eps)
            a = float(grad[idx])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, rel)
            if rel > result.max_rel_error:
                result.max_rel_error = rel
                result.worst_tensor = name
                result.worst_index = tuple(int(i) for i in idx)
        result.per_tensor[name] = worst
    logger.debug(
        f"grad_check: max rel err {result.max_rel_error:.3e} "
        f"at {result.worst_tensor}{list(result.worst_index)}"
    )
    return result
