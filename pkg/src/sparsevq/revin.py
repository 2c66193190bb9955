"""Reversible instance normalization.

Each input window is standardized per channel with its own mean and
standard deviation, followed by a learnable affine map. The statistics
are cached so the model output can be mapped back to the original scale
with the exact algebraic inverse. Statistics are always computed per
window, never globally; that is what makes the normalization reversible
under distribution shift.

The cached statistics are treated as constants of the forward pass
(they depend only on the input data, not on any parameter), so gradient
flow is limited to the affine gain and bias.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import NumericError, ShapeMismatchError, UsageError


class RevinState:
    """Affine parameters plus the statistics cache of the last normalize.

    One state serves one in-flight batch; normalize overwrites the cache.
    """

    def __init__(self, n_channels: int, eps: float = 1e-5,
                 learnable_affine: bool = True):
        if eps <= 0:
            raise ShapeMismatchError("eps must be positive")
        self.n_channels = n_channels
        self.eps = eps
        self.learnable_affine = learnable_affine
        self.affine_gain = T.Tensor(np.ones(n_channels),
                                    requires_grad=learnable_affine)
        self.affine_bias = T.Tensor(np.zeros(n_channels),
                                    requires_grad=learnable_affine)
        self.cached_mean: np.ndarray | None = None
        self.cached_std: np.ndarray | None = None

    def parameters(self) -> dict:
        if not self.learnable_affine:
            return {}
        return {"revin.gain": self.affine_gain, "revin.bias": self.affine_bias}


def normalize(x: T.Tensor, state: RevinState) -> T.Tensor:
    """Standardize [batch, L, M] per (window, channel), then apply affine.

    Uses biased variance (divide by L). Constant windows are handled by
    eps. Caches mean and std on ``state`` for the inverse.
    """
    if x.data.ndim != 3:
        raise ShapeMismatchError(f"expected [batch, L, M], got {x.shape}")
    batch, L, m = x.data.shape
    if m != state.n_channels:
        raise ShapeMismatchError(
            f"state built for {state.n_channels} channels, input has {m}")
    if L < 2:
        raise ShapeMismatchError("window length must be at least 2")

    mean = x.data.mean(axis=1, keepdims=True)              # [batch, 1, M]
    var = x.data.var(axis=1, keepdims=True)                # biased
    std = np.sqrt(var + state.eps)
    state.cached_mean = mean
    state.cached_std = std

    # Statistics are constants; materialize to full shape so only
    # leading-axis broadcasting is ever needed.
    mean_full = T.Tensor(np.broadcast_to(mean, x.data.shape).copy())
    std_full = T.Tensor(np.broadcast_to(std, x.data.shape).copy())
    z = T.div(T.sub(x, mean_full), std_full)
    return T.add(T.mul(z, state.affine_gain), state.affine_bias)


def denormalize(y: T.Tensor, state: RevinState) -> T.Tensor:
    """Exact inverse of :func:`normalize` using the cached statistics.

    The horizon output reuses the input window's statistics; that is the
    reversibility assumption of the method.
    """
    if state.cached_mean is None or state.cached_std is None:
        raise UsageError("denormalize called before normalize")
    if y.data.ndim != 3:
        raise ShapeMismatchError(f"expected [batch, T, M], got {y.shape}")
    batch, horizon, m = y.data.shape
    if m != state.n_channels:
        raise ShapeMismatchError(
            f"state built for {state.n_channels} channels, output has {m}")
    if state.cached_mean.shape[0] != batch:
        raise UsageError(
            f"cached statistics are for batch {state.cached_mean.shape[0]}, "
            f"got batch {batch}")
    if np.any(np.abs(state.affine_gain.data) < 1e-12):
        raise NumericError("affine gain too close to zero to invert")

    shape = (batch, horizon, m)
    mean_full = T.Tensor(np.broadcast_to(state.cached_mean, shape).copy())
    std_full = T.Tensor(np.broadcast_to(state.cached_std, shape).copy())
    z = T.div(T.sub(y, state.affine_bias), state.affine_gain)
    return T.add(T.mul(z, std_full), mean_full)
