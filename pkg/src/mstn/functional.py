"""Neural-network primitives built on :mod:`mstn.tensor`.

Each op here has a hand-written backward rule (fused) rather than being
composed from elementwise ops, which keeps the tape short for the layers
that run on every sample.

Conventions:
  * ``conv1d_same`` is a cross-correlation (the kernel is not flipped), with
    zero padding of ``(k - 1) // 2`` on both sides so the time axis keeps its
    length. Only odd kernels are accepted.
  * ``batch_norm1d`` normalizes over batch and time per channel using the
    population variance; running variance is updated with the unbiased
    estimate, momentum 0.1, eps 1e-5.
  * ``layer_norm`` uses eps 1e-5 over the last axis.
  * ``dropout`` is inverted dropout: survivors are scaled by ``1 / (1 - p)``
    during training and evaluation is the identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DegenerateError, DimensionError
from .rng import Rng
from .tensor import Tensor, _result, broadcast_to, reshape, tmean

LN_EPS = 1e-5
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; ``weight`` is ``[out, in]``."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input width {x.shape[-1]} != weight in-features {weight.shape[1]} "
                             f"(x {x.shape}, weight {weight.shape})")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    xd, wd = x.data, weight.data
    flat = xd.reshape(-1, xd.shape[-1])
    out = flat @ wd.T
    if bias is not None:
        out += bias.data

    def backward(g):
        g2 = g.reshape(-1, wd.shape[0])
        grads = ((g2 @ wd).reshape(xd.shape), g2.T @ flat)
        return grads + (g2.sum(axis=0),) if bias is not None else grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out.reshape(*xd.shape[:-1], wd.shape[0]), parents, backward, "linear")


def _rowmax(a: np.ndarray) -> np.ndarray:
    """Max over the last axis by pairwise folding; numpy's reduction is slow for short rows."""
    while a.shape[-1] > 1 and a.shape[-1] % 2 == 0:
        h = a.shape[-1] // 2
        a = np.maximum(a[..., :h], a[..., h:])
    out = a[..., :1].copy()
    for j in range(1, a.shape[-1]):
        np.maximum(out, a[..., j:j + 1], out=out)
    return out


def _rowsum(a: np.ndarray) -> np.ndarray:
    # a matmul against ones beats np.sum on short last axes
    return (a @ np.ones(a.shape[-1], dtype=a.dtype))[..., None]


def softmax_lastdim(x: Tensor) -> Tensor:
    out = x.data - _rowmax(x.data)
    np.exp(out, out=out)
    out *= 1.0 / _rowsum(out)

    def backward(g):
        return (out * (g - _rowsum(g * out)),)

    return _result(out, (x,), backward, "softmax")


def log_softmax_lastdim(x: Tensor) -> Tensor:
    z = x.data - _rowmax(x.data)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _result(out, (x,), backward, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match width {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dg = (g * xhat).sum(axis=lead)
        db = g.sum(axis=lead)
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dg, db

    return _result(out, (x, gamma, beta), backward, "layer_norm")


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer (mutable, not trainable)."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_norm1d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                 train: bool, eps: float = BN_EPS) -> Tensor:
    """Batch normalization of ``x`` with layout ``[B, C, T]``."""
    if x.ndim != 3:
        raise DimensionError(f"batch_norm1d expects [B, C, T], got {x.shape}")
    B, C, T = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"batch_norm1d: affine shapes {gamma.shape}/{beta.shape} vs {C} channels")
    xd = x.data
    gd = gamma.data[:, None]
    if train:
        n = B * T
        if n < 2:
            raise DegenerateError(f"batch_norm1d in train mode needs B*T >= 2, got B={B}, T={T}")
        mu = xd.mean(axis=(0, 2), keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=(0, 2), keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        m = state.momentum
        state.running_mean[:] = (1 - m) * state.running_mean + m * mu.reshape(C)
        state.running_var[:] = (1 - m) * state.running_var + m * var.reshape(C) * (n / (n - 1))

        def backward(g):
            dg = (g * xhat).sum(axis=(0, 2))
            db = g.sum(axis=(0, 2))
            dxhat = g * gd
            dx = inv * (dxhat - dxhat.mean(axis=(0, 2), keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=(0, 2), keepdims=True))
            return dx, dg, db
    else:
        inv = (1.0 / np.sqrt(state.running_var + eps)).astype(xd.dtype)[:, None]
        xhat = (xd - state.running_mean.astype(xd.dtype)[:, None]) * inv

        def backward(g):
            return g * gd * inv, (g * xhat).sum(axis=(0, 2)), g.sum(axis=(0, 2))

    out = xhat * gd + beta.data[:, None]
    return _result(out, (x, gamma, beta), backward, "batch_norm1d")


def conv1d_same(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Length-preserving 1-D cross-correlation.

    x: ``[B, C_in, T]``, weight: ``[C_out, C_in, k]`` with odd ``k``,
    bias: ``[C_out]``. Returns ``[B, C_out, T]``.
    """
    if x.ndim != 3 or weight.ndim != 3:
        raise DimensionError(f"conv1d_same expects x [B,C,T] and w [Co,Ci,k], got {x.shape}, {weight.shape}")
    B, C, T = x.shape
    Co, Ci, k = weight.shape
    if k % 2 == 0:
        raise ConfigError(f"conv1d_same needs an odd kernel, got k={k}")
    if Ci != C:
        raise DimensionError(f"conv1d_same: input has {C} channels, kernel expects {Ci} "
                             f"(x {x.shape}, w {weight.shape})")
    if bias is not None and bias.shape != (Co,):
        raise DimensionError(f"conv1d_same: bias shape {bias.shape} != ({Co},)")
    pad = (k - 1) // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad)))
    cols = sliding_window_view(xp, k, axis=2).transpose(0, 2, 1, 3).reshape(B * T, C * k)
    wf = weight.data.reshape(Co, C * k)
    flat = cols @ wf.T
    if bias is not None:
        flat += bias.data
    out = np.ascontiguousarray(flat.reshape(B, T, Co).transpose(0, 2, 1))

    def backward(g):
        gf = g.transpose(0, 2, 1).reshape(B * T, Co)
        gw = (gf.T @ cols).reshape(Co, C, k)
        gcols = (gf @ wf).reshape(B, T, C, k).transpose(0, 2, 1, 3)
        gxp = np.zeros((B, C, T + 2 * pad), dtype=g.dtype)
        for j in range(k):
            gxp[:, :, j:j + T] += gcols[..., j]
        gx = gxp[:, :, pad:pad + T]
        gb = gf.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward, "conv1d_same")


def mean_over_time(x: Tensor) -> Tensor:
    """``[B, T, d] -> [B, d]`` arithmetic mean over the time axis."""
    if x.ndim != 3:
        raise DimensionError(f"mean_over_time expects [B, T, d], got {x.shape}")
    if x.shape[1] == 0:
        raise DimensionError("mean_over_time over an empty time axis")
    return tmean(x, axis=1)


def broadcast_to_sequence(z: Tensor, T: int) -> Tensor:
    """``[B, d] -> [B, T, d]`` with every step an identical copy of ``z``."""
    if T < 1:
        raise DimensionError(f"broadcast_to_sequence needs T >= 1, got {T}")
    B, d = z.shape
    return broadcast_to(reshape(z, (B, 1, d)), (B, T, d))


def dropout(x: Tensor, p: float, train: bool, rng: Rng | None) -> Tensor:
    if not 0 <= p < 1:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0:
        return x
    if rng is None:
        raise ConfigError("dropout in train mode needs an Rng")
    # 16-bit draws are much cheaper than floats; p is quantised to 1/65536
    threshold = int(round(p * 65536))
    keep = (rng.uint16(x.shape) >= threshold).astype(x.data.dtype)
    keep *= x.data.dtype.type(1.0 / (1.0 - p))
    return _result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")
