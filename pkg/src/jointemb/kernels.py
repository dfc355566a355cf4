"""Dense numeric kernels with hand-written backward passes.

Every layer takes batched arrays with the batch on axis 0 and channels (or
features) on axis 1. ``conv2d`` and ``maxpool2`` also accept a single
``(C, H, W)`` sample for convenience. Everything runs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent."""


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up in a gradient."""


def _as_batch(x, ndim):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == ndim - 1:
        return x[None], True
    if x.ndim != ndim:
        raise ShapeError(f"expected {ndim - 1}-D or {ndim}-D input, got shape {x.shape}")
    return x, False


# -- convolution ---------------------------------------------------------------

def _im2col(x, kh, kw):
    """(N, C, H, W) -> (N*H'*W', C*kh*kw) patch matrix."""
    n, c, h, w = x.shape
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # N, C, H', W', kh, kw
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * (h - kh + 1) * (w - kw + 1), c * kh * kw)


def conv2d(x, w, b, return_cols=False):
    """Valid (no padding), stride-1 2-D cross-correlation.

    x: (N, C_in, H, W) or (C_in, H, W)
    w: (C_out, C_in, kh, kw)
    b: (C_out,)
    Returns (N, C_out, H-kh+1, W-kw+1), squeezed back if x was unbatched.
    With ``return_cols`` the patch matrix is returned too so the backward
    pass can reuse it.
    """
    x, squeeze = _as_batch(x, 4)
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if w.ndim != 4:
        raise ShapeError(f"conv weights must be 4-D, got shape {w.shape}")
    c_out, c_in, kh, kw = w.shape
    if x.shape[1] != c_in:
        raise ShapeError(f"input has {x.shape[1]} channels but weights expect {c_in} "
                         f"(input {x.shape}, weights {w.shape})")
    if kh > x.shape[2] or kw > x.shape[3]:
        raise ShapeError(f"kernel {kh}x{kw} larger than input {x.shape[2]}x{x.shape[3]}")
    if b.shape != (c_out,):
        raise ShapeError(f"bias shape {b.shape} does not match {c_out} output channels")
    n, _, h, wd = x.shape
    ho, wo = h - kh + 1, wd - kw + 1
    cols = _im2col(x, kh, kw)
    out = cols @ w.reshape(c_out, -1).T + b
    out = np.ascontiguousarray(out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2))
    if squeeze:
        out = out[0]
    return (out, cols) if return_cols else out


def conv2d_backward(dout, x, w, need_dx=True, cols=None):
    """Gradients of ``conv2d`` w.r.t. input, weights and bias.

    Returns ``(dx, dw, db)``; ``dx`` is None when ``need_dx`` is False.
    ``cols`` is the patch matrix from the forward pass, rebuilt if omitted.
    """
    x, squeeze = _as_batch(x, 4)
    dout, _ = _as_batch(dout, 4)
    w = np.asarray(w, dtype=np.float64)
    c_out, c_in, kh, kw = w.shape
    n, _, ho, wo = dout.shape
    if cols is None:
        cols = _im2col(x, kh, kw)
    dmat = dout.transpose(0, 2, 3, 1).reshape(-1, c_out)
    db = dmat.sum(axis=0)
    dw = (dmat.T @ cols).reshape(w.shape)
    dx = None
    if need_dx:
        # (C_in, kh, kw, N, H', W') so each shifted add below is contiguous
        dcols = (w.reshape(c_out, -1).T @ dmat.T).reshape(c_in, kh, kw, n, ho, wo)
        dx = np.zeros((c_in, n, ho + kh - 1, wo + kw - 1))
        for p in range(kh):
            for q in range(kw):
                dx[:, :, p:p + ho, q:q + wo] += dcols[:, p, q]
        dx = np.ascontiguousarray(dx.transpose(1, 0, 2, 3))
        if squeeze:
            dx = dx[0]
    return dx, dw, db


# -- pooling -------------------------------------------------------------------

def maxpool2(x):
    """2x2 max pooling with stride 2.

    Returns ``(out, idx)`` where ``idx`` holds the row-major position (0..3)
    of the winner inside each window. Ties go to the first position.
    """
    x, squeeze = _as_batch(x, 4)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    if squeeze:
        return out[0], idx[0]
    return out, idx


def maxpool2_backward(dout, idx):
    """Route ``dout`` back to the argmax position of each window."""
    dout, squeeze = _as_batch(dout, 4)
    idx = idx[None] if squeeze else idx
    n, c, h2, w2 = dout.shape
    g = np.zeros((n, c, h2, w2, 4))
    np.put_along_axis(g, idx[..., None], dout[..., None], axis=-1)
    g = g.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
    return g[0] if squeeze else g


# -- activations and dense layers ------------------------------------------------

def _channel_view(a, ndim):
    return a.reshape((1, -1) + (1,) * (ndim - 2))


def prelu(x, a):
    """PReLU with one slope per channel (axis 1)."""
    x = np.asarray(x, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if x.ndim < 2 or a.shape != (x.shape[1],):
        raise ShapeError(f"slopes {a.shape} do not match channel axis of input {x.shape}")
    return np.where(x >= 0, x, _channel_view(a, x.ndim) * x)


def prelu_backward(dout, x, a):
    """Returns ``(dx, da)``."""
    x = np.asarray(x, dtype=np.float64)
    neg = x < 0
    av = _channel_view(np.asarray(a, dtype=np.float64), x.ndim)
    dx = np.where(neg, av * dout, dout)
    axes = (0,) + tuple(range(2, x.ndim))
    da = np.where(neg, dout * x, 0.0).sum(axis=axes)
    return dx, da


def linear(x, w, b):
    """``x @ w.T + b`` for x of shape (N, n) or (n,), w of shape (m, n)."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if w.ndim != 2 or x.shape[-1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(f"linear: input {x.shape}, weights {w.shape}, bias {b.shape}")
    return x @ w.T + b


def linear_backward(dout, x, w):
    """Returns ``(dx, dw, db)`` for a batched input."""
    dout = np.atleast_2d(dout)
    x = np.atleast_2d(x)
    return dout @ w, dout.T @ x, dout.sum(axis=0)


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits, target):
    """Cross-entropy of softmax(logits) against integer targets.

    With a single logit vector returns ``(loss, grad)``. With a (N, C) batch
    the loss is the batch mean and ``grad`` is the gradient of that mean.
    """
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    z2 = np.atleast_2d(z)
    t = np.atleast_1d(np.asarray(target))
    n, c = z2.shape
    if c < 2:
        raise ShapeError("softmax_xent needs at least two classes")
    if t.shape != (n,):
        raise ShapeError(f"{t.shape[0]} targets for {n} logit rows")
    if np.any(t < 0) or np.any(t >= c):
        raise ValueError(f"target index out of range for {c} classes: {t}")
    shifted = z2 - z2.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    losses = logsumexp - shifted[rows, t]
    grad = softmax(z2)
    grad[rows, t] -= 1.0
    if single:
        return float(losses[0]), grad[0]
    return float(losses.mean()), grad / n


# -- optimisation ----------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update, applied in place to ``params``.

    ``params`` and ``grads`` are dicts of arrays keyed identically. Raises
    ``NonFiniteError`` before touching anything if a gradient is not finite.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    step = lr / (1.0 - state.beta1 ** state.t)
    c2 = np.sqrt(1.0 - state.beta2 ** state.t)
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        _adam_update(p.reshape(-1), np.ascontiguousarray(g, dtype=np.float64).reshape(-1),
                     state.m[name].reshape(-1), state.v[name].reshape(-1),
                     state.beta1, state.beta2, step, c2, state.eps)


@numba.njit(cache=True)
def _adam_update(p, g, m, v, b1, b2, step, c2, eps):
    # single fused pass; the dense layer dominates and numpy temporaries are slow
    for i in range(p.size):
        gi = g[i]
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= step * mi / (np.sqrt(vi) / c2 + eps)


@dataclass(frozen=True)
class LrSchedule:
    """Step decay: ``base_lr * gamma ** (epoch // step_epochs)``."""

    base_lr: float = 1e-4
    gamma: float = 0.1
    step_epochs: int = 8

    def __post_init__(self):
        if self.step_epochs < 1:
            raise ValueError("step_epochs must be a positive integer")

    def lr(self, epoch):
        return self.base_lr * self.gamma ** (epoch // self.step_epochs)


def rel_error(a, b):
    """Elementwise relative error used by the gradient checks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))


def numeric_grad(f, x, h=1e-5, index=None):
    """Central finite difference of scalar ``f()`` w.r.t. array ``x`` in place.

    If ``index`` is given only that flat position is probed.
    """
    flat = x.reshape(-1)
    positions = range(flat.size) if index is None else [index]
    out = np.zeros(flat.size) if index is None else None
    for i in positions:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        d = (fp - fm) / (2 * h)
        if index is not None:
            return d
        out[i] = d
    return out.reshape(x.shape)

