"""Fixed directional shift filters, residual motion features, motion blocks.

The shift convention is: output(y, x) = input(y + dy, x + dx), zero padded
at the borders, applied only to the later frame of a consecutive pair. The
residual for displacement d is current - shift(next, d); residuals for all
directions are concatenated along channels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ConfigurationError, Tensor


@dataclass(frozen=True)
class Displacement:
    dx: int
    dy: int

    def __post_init__(self):
        if self.dx not in (-1, 0, 1) or self.dy not in (-1, 0, 1):
            raise ConfigurationError("displacement components must be in {-1, 0, 1}")
        if abs(self.dx) + abs(self.dy) > 1:
            raise ConfigurationError("|dx| + |dy| must be <= 1")

    def inverse(self):
        return Displacement(-self.dx, -self.dy)


@dataclass(frozen=True)
class DirectionSet:
    """Ordered, duplicate-free displacement list; order fixes channel layout."""

    dirs: tuple

    def __post_init__(self):
        if not self.dirs:
            raise ConfigurationError("direction set must be non-empty")
        if len(set(self.dirs)) != len(self.dirs):
            raise ConfigurationError("direction set contains duplicates")

    def __len__(self):
        return len(self.dirs)

    def __iter__(self):
        return iter(self.dirs)

    def serialize(self):
        return [(d.dx, d.dy) for d in self.dirs]

    @staticmethod
    def deserialize(pairs):
        return DirectionSet(tuple(Displacement(int(dx), int(dy)) for dx, dy in pairs))


def default_directions():
    """All five displacements admitted by |dx|+|dy| <= 1, zero motion first."""
    return DirectionSet(
        (
            Displacement(0, 0),
            Displacement(1, 0),
            Displacement(-1, 0),
            Displacement(0, 1),
            Displacement(0, -1),
        )
    )


@dataclass(frozen=True)
class MotionBlockSpec:
    variant: str  # "sum" | "concat"
    in_channels: int
    reduction_factor: int = 16
    directions: DirectionSet = None

    def __post_init__(self):
        if self.variant not in ("sum", "concat"):
            raise ConfigurationError(f"unknown motion block variant: {self.variant}")
        if self.reduction_factor < 1:
            raise ConfigurationError("reduction factor must be positive")
        if self.directions is None:
            object.__setattr__(self, "directions", default_directions())

    @property
    def reduced_channels(self):
        return max(1, self.in_channels // self.reduction_factor)

    @property
    def motion_channels(self):
        return len(self.directions) * self.reduced_channels

    @property
    def compress_in_channels(self):
        if self.variant == "sum":
            return self.motion_channels
        return self.in_channels + self.motion_channels


def _shift_array(a, dx, dy):
    """out[..., y, x] = a[..., y+dy, x+dx], zero outside bounds."""
    H, W = a.shape[-2], a.shape[-1]
    out = np.zeros_like(a)
    ys = slice(max(0, -dy), H - max(0, dy))  # destination rows
    xs = slice(max(0, -dx), W - max(0, dx))
    ysrc = slice(max(0, dy), H - max(0, -dy))
    xsrc = slice(max(0, dx), W - max(0, -dx))
    out[..., ys, xs] = a[..., ysrc, xsrc]
    return out


def shift(x, delta):
    """Spatial one-pixel shift of every channel; gradient scatters inversely."""
    dx, dy = delta.dx, delta.dy
    y = _shift_array(x.data, dx, dy)

    def bwd(g):
        T._acc(x, _shift_array(g, -dx, -dy))

    return T._from_op(y, (x,), bwd)


def motion_filter(f_t, f_next, dirs):
    """Residual motion features: concat over d of f_t - shift(f_next, d)."""
    if f_t.data.shape != f_next.data.shape:
        raise ConfigurationError(
            f"motion_filter shape mismatch: {f_t.shape} vs {f_next.shape}"
        )
    return T.concat_channels([T.sub(f_t, shift(f_next, d)) for d in dirs])


class MotionBlock:
    """Fuses motion-filter features back into the appearance stream.

    The 1x1 reduction conv + batch-norm is shared across the two time steps
    (both frames come from the same appearance network). Compression convs
    carry no bias since a batch-norm immediately follows.
    """

    def __init__(self, registry, buffers, name, spec, rng, dtype=np.float32):
        self.spec = spec
        c, cr = spec.in_channels, spec.reduced_channels
        self.reduce = Conv1x1(registry, f"{name}.reduce", c, cr, rng, dtype)
        self.reduce_bn = BatchNorm(registry, buffers, f"{name}.reduce_bn", cr, dtype)
        self.compress = Conv1x1(
            registry, f"{name}.compress", spec.compress_in_channels, c, rng, dtype
        )
        self.compress_bn = BatchNorm(registry, buffers, f"{name}.compress_bn", c, dtype)

    def reduce_features(self, f, training):
        return self.reduce_bn(self.reduce(f), training)

    def fuse(self, f, m, training):
        if self.spec.variant == "sum":
            mhat = self.compress_bn(self.compress(m), training)
            return T.add(f, mhat)
        cat = T.concat_channels([f, m])
        return self.compress_bn(self.compress(cat), training)

    def forward_pair(self, f_t, f_next, training=False):
        """Single consecutive pair: returns the fused features for time t."""
        r_t = self.reduce_features(f_t, training)
        r_next = self.reduce_features(f_next, training)
        m = motion_filter(r_t, r_next, self.spec.directions)
        return self.fuse(f_t, m, training)

    def forward_folded(self, f, batch, k, training):
        """Folded (batch*k, C, H, W) input: snippet j pairs with j+1.

        The last snippet of each clip has no successor and receives a zero
        motion tensor.
        """
        r = self.reduce_features(f, training)
        nxt = T.next_snippet(r, batch, k)
        m = motion_filter(r, nxt, self.spec.directions)
        mask = np.ones((batch * k, 1, 1, 1), dtype=f.data.dtype)
        mask.reshape(batch, k, 1, 1, 1)[:, k - 1] = 0.0
        m = T.mul_const(m, mask)
        return self.fuse(f, m, training)


# Small layer helpers shared with the backbone. Kept here to avoid a
# circular import; the backbone re-exports richer variants.

class Conv1x1:
    def __init__(self, registry, name, cin, cout, rng, dtype=np.float32):
        bound = np.sqrt(6.0 / cin)
        w = rng.uniform(-bound, bound, size=(cout, cin, 1, 1)).astype(dtype)
        self.weight = registry.add(f"{name}.weight", Tensor(w))

    def __call__(self, x):
        return T.conv2d(x, self.weight, None, stride=1, padding=0)


class BatchNorm:
    def __init__(self, registry, buffers, name, channels, dtype=np.float32,
                 momentum=0.1, eps=1e-5):
        self.gamma = registry.add(
            f"{name}.gamma", Tensor(np.ones(channels, dtype=dtype)), weight_decay=False
        )
        self.beta = registry.add(
            f"{name}.beta", Tensor(np.zeros(channels, dtype=dtype)), weight_decay=False
        )
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        buffers[f"{name}.running_mean"] = self.running_mean
        buffers[f"{name}.running_var"] = self.running_var
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x, training):
        return T.batchnorm2d(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training, self.momentum, self.eps,
        )
