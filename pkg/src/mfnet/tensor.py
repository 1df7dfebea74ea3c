"""Minimal reverse-mode autodiff engine on top of numpy.

Tensors wrap contiguous numpy arrays (float32 for training, float64 for
gradient checking) and record a backward closure per op, micrograd-style.
Layout for activations is fixed as (batch, channel, height, width).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ConfigurationError(ValueError):
    """Raised when tensor shapes or layer configuration are inconsistent."""


_DEBUG_CHECK_FINITE = False


def set_debug_checks(enabled):
    """Toggle NaN/Inf verification on every op output (slow, debug only)."""
    global _DEBUG_CHECK_FINITE
    _DEBUG_CHECK_FINITE = bool(enabled)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward")

    def __init__(self, data, requires_grad=False, _prev=(), _backward=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._prev = _prev
        self._backward = _backward
        if _DEBUG_CHECK_FINITE and not np.all(np.isfinite(arr)):
            raise FloatingPointError("non-finite values in tensor")

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _acc(t, g):
    """Accumulate gradient g into tensor t (sum over multiple consumers)."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _from_op(data, parents, backward_fn):
    rg = any(p.requires_grad for p in parents)
    if rg:
        return Tensor(data, requires_grad=True, _prev=tuple(parents), _backward=backward_fn)
    return Tensor(data)


def backward(loss):
    """Populate .grad on every requires_grad tensor reachable from `loss`.

    Repeated calls accumulate gradients on leaves; interior node grads are
    reset per call.
    """
    if loss.data.size != 1:
        raise RuntimeError("backward requires a scalar loss")
    # iterative post-order topo sort over requires_grad subgraph
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._prev:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    # reset interior grads so a fresh pass does not double count
    for node in topo:
        if node._prev:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise / shape ops
# ---------------------------------------------------------------------------

def relu(x):
    y = np.maximum(x.data, 0)

    def bwd(g):
        _acc(x, g * (x.data > 0))

    return _from_op(y, (x,), bwd)


def add(a, b):
    if a.data.shape != b.data.shape:
        raise ConfigurationError(f"add shape mismatch {a.shape} vs {b.shape}")

    def bwd(g):
        _acc(a, g)
        _acc(b, g)

    return _from_op(a.data + b.data, (a, b), bwd)


def sub(a, b):
    if a.data.shape != b.data.shape:
        raise ConfigurationError(f"sub shape mismatch {a.shape} vs {b.shape}")

    def bwd(g):
        _acc(a, g)
        _acc(b, -g)

    return _from_op(a.data - b.data, (a, b), bwd)


def mul(a, b):
    if a.data.shape != b.data.shape:
        raise ConfigurationError(f"mul shape mismatch {a.shape} vs {b.shape}")

    def bwd(g):
        _acc(a, g * b.data)
        _acc(b, g * a.data)

    return _from_op(a.data * b.data, (a, b), bwd)


def scale(x, s):
    s = float(s)

    def bwd(g):
        _acc(x, g * s)

    return _from_op(x.data * s, (x,), bwd)


def mul_const(x, arr):
    """Multiply by a constant, broadcastable array (no gradient to `arr`)."""
    arr = np.asarray(arr, dtype=x.data.dtype)

    def bwd(g):
        _acc(x, g * arr)

    return _from_op(x.data * arr, (x,), bwd)


def reshape(x, shape):
    shape = tuple(shape)

    def bwd(g):
        _acc(x, g.reshape(x.data.shape))

    return _from_op(x.data.reshape(shape), (x,), bwd)


def mean_axis(x, axis):
    n = x.data.shape[axis]

    def bwd(g):
        _acc(x, np.expand_dims(g, axis).repeat(n, axis=axis) / n)

    return _from_op(x.data.mean(axis=axis), (x,), bwd)


def concat_channels(tensors):
    tensors = list(tensors)
    ref = tensors[0].data.shape
    for t in tensors[1:]:
        if t.data.shape[0] != ref[0] or t.data.shape[2:] != ref[2:]:
            raise ConfigurationError("concat_channels requires identical non-channel extents")
    widths = [t.data.shape[1] for t in tensors]
    offsets = np.cumsum([0] + widths)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            _acc(t, g[:, lo:hi])

    return _from_op(np.concatenate([t.data for t in tensors], axis=1), tuple(tensors), bwd)


# ---------------------------------------------------------------------------
# dense layers
# ---------------------------------------------------------------------------

def conv2d(x, w, b=None, stride=1, padding=0):
    """2D cross-correlation over (B, Cin, H, W) with floor output semantics."""
    B, cin, H, W = x.data.shape
    cout, cw, kh, kw = w.data.shape
    if cin != cw:
        raise ConfigurationError(f"conv2d channel mismatch: input {cin}, weight {cw}")
    s, p = int(stride), int(padding)
    if H + 2 * p < kh or W + 2 * p < kw:
        raise ConfigurationError("conv2d: kernel does not fit padded input")
    if kh == 1 and kw == 1 and s == 1 and p == 0:
        return _conv1x1(x, w, b, B, cin, cout, H, W)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    hout = (H + 2 * p - kh) // s + 1
    wout = (W + 2 * p - kw) // s + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    win = win[:, :, :hout, :wout]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        B * hout * wout, cin * kh * kw
    )
    wmat = w.data.reshape(cout, -1)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    y = np.ascontiguousarray(out.reshape(B, hout, wout, cout).transpose(0, 3, 1, 2))

    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * hout * wout, cout)
        if w.requires_grad:
            _acc(w, (gm.T @ cols).reshape(w.data.shape))
        if b is not None and b.requires_grad:
            _acc(b, gm.sum(axis=0))
        if x.requires_grad:
            dcols = gm @ wmat
            dwin = dcols.reshape(B, hout, wout, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + s * hout : s, j : j + s * wout : s] += dwin[..., i, j]
            _acc(x, dxp[:, :, p : p + H, p : p + W] if p else dxp)

    return _from_op(y, parents, bwd)


def _conv1x1(x, w, b, B, cin, cout, H, W):
    """Pointwise conv as a batched matmul; skips the im2col copies."""
    w2 = w.data.reshape(cout, cin)
    xr = x.data.reshape(B, cin, H * W)
    y = np.matmul(w2[None], xr)
    if b is not None:
        y += b.data[None, :, None]
    y = y.reshape(B, cout, H, W)
    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        gr = g.reshape(B, cout, H * W)
        if w.requires_grad:
            dw = np.matmul(gr, xr.transpose(0, 2, 1)).sum(axis=0)
            _acc(w, dw.reshape(w.data.shape))
        if b is not None and b.requires_grad:
            _acc(b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            _acc(x, np.matmul(w2.T[None], gr).reshape(x.data.shape))

    return _from_op(y, parents, bwd)


def batchnorm2d(x, gamma, beta, running_mean, running_var, training,
                momentum=0.1, eps=1e-5):
    """Per-channel batch normalization over (B, H, W).

    `running_mean` / `running_var` are plain ndarrays updated in place in
    train mode with an exponential moving average.
    """
    B, C, H, W = x.data.shape
    if training:
        m = B * H * W
        if m < 2:
            raise ConfigurationError("batchnorm2d train mode needs B*H*W >= 2")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu = running_mean
        var = running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    y = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bwd(g):
        if gamma.requires_grad:
            _acc(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            _acc(beta, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gi = (gamma.data * inv)[None, :, None, None]
            if training:
                gmean = g.mean(axis=(0, 2, 3), keepdims=True)
                gxmean = (g * xhat).mean(axis=(0, 2, 3), keepdims=True)
                _acc(x, gi * (g - gmean - xhat * gxmean))
            else:
                _acc(x, gi * g)

    return _from_op(y.astype(x.data.dtype, copy=False), (x, gamma, beta), bwd)


def maxpool2d(x, kernel, stride, padding=0):
    B, C, H, W = x.data.shape
    k, s, p = int(kernel), int(stride), int(padding)
    neg = np.finfo(x.data.dtype).min
    xp = (
        np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=neg)
        if p
        else x.data
    )
    hout = (H + 2 * p - k) // s + 1
    wout = (W + 2 * p - k) // s + 1
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    win = win[:, :, :hout, :wout].reshape(B, C, hout, wout, k * k)
    idx = win.argmax(axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        if not x.requires_grad:
            return
        dxp = np.zeros_like(xp)
        bb, cc, oy, ox = np.indices(idx.shape, sparse=False)
        ry = oy * s + idx // k
        rx = ox * s + idx % k
        np.add.at(dxp, (bb, cc, ry, rx), g)
        _acc(x, dxp[:, :, p : p + H, p : p + W] if p else dxp)

    return _from_op(y, (x,), bwd)


def global_avg_pool(x):
    B, C, H, W = x.data.shape

    def bwd(g):
        _acc(x, np.broadcast_to(g[:, :, None, None] / (H * W), x.data.shape))

    return _from_op(x.data.mean(axis=(2, 3)), (x,), bwd)


def linear(x, w, b=None):
    if x.data.shape[1] != w.data.shape[1]:
        raise ConfigurationError(
            f"linear feature mismatch: input {x.data.shape[1]}, weight {w.data.shape[1]}"
        )
    y = x.data @ w.data.T
    if b is not None:
        y += b.data
    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        if w.requires_grad:
            _acc(w, g.T @ x.data)
        if b is not None and b.requires_grad:
            _acc(b, g.sum(axis=0))
        if x.requires_grad:
            _acc(x, g @ w.data)

    return _from_op(y, parents, bwd)


def dropout(x, keep_prob, rng, training):
    """Inverted dropout: eval mode and keep_prob 1.0 are the identity."""
    if not training or keep_prob >= 1.0:
        return x
    if not 0.0 < keep_prob <= 1.0:
        raise ConfigurationError(f"keep_prob must be in (0, 1], got {keep_prob}")
    mask = (rng.random(x.data.shape) < keep_prob).astype(x.data.dtype) / keep_prob

    def bwd(g):
        _acc(x, g * mask)

    return _from_op(x.data * mask, (x,), bwd)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood over the batch, max-stabilized."""
    labels = np.asarray(labels, dtype=np.int64)
    B, ncls = logits.data.shape
    if labels.min() < 0 or labels.max() >= ncls:
        raise ValueError(f"labels out of range [0, {ncls})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    nll = -(z[np.arange(B), labels] - np.log(ez.sum(axis=1)))
    loss = np.asarray(nll.mean(), dtype=logits.data.dtype)

    def bwd(g):
        d = probs.copy()
        d[np.arange(B), labels] -= 1.0
        _acc(logits, (float(g) * d / B).astype(logits.data.dtype))

    return _from_op(loss, (logits,), bwd)


def next_snippet(x, batch, k):
    """Along a folded (batch*k, ...) axis, return each sample's successor.

    Entry (b, j) of the output is x[b, j+1]; the last snippet of every clip
    gets zeros. Backward scatters gradients to the predecessor slots.
    """
    if x.data.shape[0] != batch * k:
        raise ConfigurationError("folded batch size does not match batch*k")
    xv = x.data.reshape(batch, k, *x.data.shape[1:])
    y = np.zeros_like(xv)
    y[:, : k - 1] = xv[:, 1:]

    def bwd(g):
        gv = g.reshape(batch, k, *x.data.shape[1:])
        dx = np.zeros_like(xv)
        dx[:, 1:] = gv[:, : k - 1]
        _acc(x, dx.reshape(x.data.shape))

    return _from_op(y.reshape(x.data.shape), (x,), bwd)


def softmax(logits_np):
    """Plain numpy softmax along the last axis (inference helper)."""
    z = logits_np - logits_np.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# parameters and SGD
# ---------------------------------------------------------------------------

class ParamRegistry:
    """Insertion-ordered map of unique parameter names to trainable tensors."""

    def __init__(self):
        self._entries = {}
        self._decay = {}

    def add(self, name, tensor, weight_decay=True):
        if name in self._entries:
            raise ConfigurationError(f"duplicate parameter name: {name}")
        tensor.requires_grad = True
        self._entries[name] = tensor
        self._decay[name] = bool(weight_decay)
        return tensor

    def items(self):
        for name, t in self._entries.items():
            yield name, t, self._decay[name]

    def names(self):
        return list(self._entries)

    def __getitem__(self, name):
        return self._entries[name]

    def __contains__(self, name):
        return name in self._entries

    def __len__(self):
        return len(self._entries)

    def param_count(self):
        return sum(t.data.size for t in self._entries.values())

    def zero_grads(self):
        for t in self._entries.values():
            t.grad = None


@dataclass
class SgdState:
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 0.0005
    velocity: dict = field(default_factory=dict)


def sgd_step(registry, state):
    """v <- momentum*v + grad + wd*param; param <- param - lr*v; grads zeroed.

    Weight decay is skipped for entries registered with weight_decay=False
    (batch-norm affine terms and biases).
    """
    for name, p, decay in registry.items():
        if p.grad is None:
            raise RuntimeError(f"sgd_step: missing gradient for parameter '{name}'")
        g = p.grad.astype(p.data.dtype, copy=False)
        if decay and state.weight_decay:
            g = g + state.weight_decay * p.data
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = state.momentum * v + g
        state.velocity[name] = v
        p.data -= state.learning_rate * v
        p.grad = None
