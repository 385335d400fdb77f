"""Layer blocks with explicit forward/backward passes.

Every block exposes ``forward(x, train, rng) -> (y, cache)`` and
``backward(cache, grad_y) -> grad_x``; the backward call accumulates parameter
gradients into ``block.grads``. Arithmetic follows the dtype of the parameters
(float32 by default), so a block cast with :meth:`Block.astype` to float64 can
be checked against finite differences.
"""

from __future__ import annotations

import copy
import enum
import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeMismatch

DTYPE = np.float32
BN_MOMENTUM = 0.9
BN_EPS = 1e-5
DROPOUT_P = 0.2


class OpType(str, enum.Enum):
    CONV = "CONV"
    FC = "FC"


@dataclass(frozen=True)
class Provenance:
    """Where a block came from: a client's layer, a stitch adapter, an average."""

    kind: str = "fresh"  # client | stitch | averaged | fresh
    client_id: int = -1
    layer_index: int = -1

    @classmethod
    def client(cls, client_id: int, layer_index: int) -> "Provenance":
        return cls("client", client_id, layer_index)

    def __str__(self) -> str:
        if self.kind == "client":
            return f"client{self.client_id}:L{self.layer_index}"
        if self.kind == "averaged":
            return f"avg{self.client_id}:L{self.layer_index}"
        return self.kind.upper()


STITCH = Provenance("stitch")


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=shape).astype(DTYPE)


def _he(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape).astype(DTYPE)


def flat_size(spec: tuple[int, ...]) -> int:
    return int(np.prod(spec)) if spec else 0


class Block:
    """Common parameter bookkeeping."""

    kind = "block"

    def __init__(self, in_spec: tuple[int, ...], out_spec: tuple[int, ...], provenance=None):
        self.in_spec = tuple(int(d) for d in in_spec)
        self.out_spec = tuple(int(d) for d in out_spec)
        self.provenance = provenance or Provenance()
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def zero_grad(self) -> None:
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def num_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def astype(self, dtype) -> "Block":
        out = copy.deepcopy(self)
        out.params = {k: v.astype(dtype) for k, v in out.params.items()}
        out.buffers = {k: v.astype(dtype) for k, v in out.buffers.items()}
        out.zero_grad()
        return out

    def _accumulate(self, name: str, g: np.ndarray) -> None:
        if name in self.grads:
            self.grads[name] += g
        else:
            self.grads[name] = g.astype(self.params[name].dtype, copy=True)

    def _check_input(self, x: np.ndarray) -> None:
        if tuple(x.shape[1:]) != self.in_spec and not (
            len(self.in_spec) == 1 and flat_size(x.shape[1:]) == self.in_spec[0]
        ):
            raise ShapeMismatch(
                f"{type(self).__name__} expects input {self.in_spec}, got {tuple(x.shape[1:])}"
            )

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, cache, grad):
        raise NotImplementedError

    def discrete_state(self, cache) -> list[np.ndarray]:
        """Boolean/int arrays describing the piecewise branch taken (ReLU masks etc.)."""
        return []

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.in_spec}->{self.out_spec}, {self.provenance})"


# -- primitive ops ---------------------------------------------------------------


def conv3x3_forward(x, w, b):
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # n,c,h,w,3,3
    y = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # n,h,w,o
    y = y.transpose(0, 3, 1, 2) + b[None, :, None, None]
    return np.ascontiguousarray(y), win


def conv3x3_backward(win, w, g):
    gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # o,c,3,3
    gb = g.sum(axis=(0, 2, 3))
    gp = np.pad(g, ((0, 0), (0, 0), (1, 1), (1, 1)))
    gwin = sliding_window_view(gp, (3, 3), axis=(2, 3))  # n,o,h,w,3,3
    gx = np.tensordot(gwin, w[:, :, ::-1, ::-1], axes=([1, 4, 5], [0, 2, 3]))  # n,h,w,c
    return np.ascontiguousarray(gx.transpose(0, 3, 1, 2)), gw, gb


def maxpool2_forward(x):
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    r = x[:, :, : 2 * h2, : 2 * w2].reshape(n, c, h2, 2, w2, 2)
    r = r.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = r.argmax(axis=-1)
    y = np.take_along_axis(r, idx[..., None], axis=-1)[..., 0]
    return y, (x.shape, idx)


def maxpool2_backward(cache, g):
    (n, c, h, w), idx = cache
    h2, w2 = g.shape[2], g.shape[3]
    gr = np.zeros((n, c, h2, w2, 4), dtype=g.dtype)
    np.put_along_axis(gr, idx[..., None], g[..., None], axis=-1)
    gr = gr.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
    gx = np.zeros((n, c, h, w), dtype=g.dtype)
    gx[:, :, : 2 * h2, : 2 * w2] = gr
    return gx


def adaptive_pool_matrix(size_in: int, size_out: int, dtype=DTYPE) -> np.ndarray:
    """Row i averages input cells floor(i*in/out) .. ceil((i+1)*in/out)-1."""
    m = np.zeros((size_out, size_in), dtype=dtype)
    for i in range(size_out):
        lo = (i * size_in) // size_out
        hi = -((-(i + 1) * size_in) // size_out)
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def dense_relu_forward(x, w, b):
    z = x @ w + b
    mask = z > 0
    return z * mask, mask


# -- blocks ---------------------------------------------------------------------


class ConvUnit(Block):
    """conv3x3 (SAME) -> maxpool 2x2 -> batch-norm -> ReLU."""

    kind = "conv"
    op_type = OpType.CONV

    def __init__(self, in_spec, out_channels: int, rng=None, provenance=None):
        c, h, w = in_spec
        super().__init__(in_spec, (out_channels, h // 2, w // 2), provenance)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = {
            "weight": _he(rng, c * 9, (out_channels, c, 3, 3)),
            "bias": np.zeros(out_channels, DTYPE),
            "gamma": np.ones(out_channels, DTYPE),
            "beta": np.zeros(out_channels, DTYPE),
        }
        self.buffers = {
            "running_mean": np.zeros(out_channels, DTYPE),
            "running_var": np.ones(out_channels, DTYPE),
        }
        self.zero_grad()

    def forward(self, x, train=False, rng=None):
        self._check_input(x)
        p = self.params
        conv, win = conv3x3_forward(x, p["weight"], p["bias"])
        pooled, pool_cache = maxpool2_forward(conv)
        if train:
            mean = pooled.mean(axis=(0, 2, 3))
            var = pooled.var(axis=(0, 2, 3))
            m = BN_MOMENTUM
            self.buffers["running_mean"] = (m * self.buffers["running_mean"] + (1 - m) * mean).astype(
                self.buffers["running_mean"].dtype
            )
            self.buffers["running_var"] = (m * self.buffers["running_var"] + (1 - m) * var).astype(
                self.buffers["running_var"].dtype
            )
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv_std = (1.0 / np.sqrt(var + BN_EPS)).astype(pooled.dtype)
        xhat = (pooled - mean[None, :, None, None]) * inv_std[None, :, None, None]
        z = p["gamma"][None, :, None, None] * xhat + p["beta"][None, :, None, None]
        mask = z > 0
        y = z * mask
        return y, (win, pool_cache, xhat, inv_std, mask)

    def backward(self, cache, g):
        win, pool_cache, xhat, inv_std, mask = cache
        p = self.params
        gz = g * mask
        self._accumulate("gamma", (gz * xhat).sum(axis=(0, 2, 3)))
        self._accumulate("beta", gz.sum(axis=(0, 2, 3)))
        gxhat = gz * p["gamma"][None, :, None, None]
        m = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
        gpool = (
            inv_std[None, :, None, None]
            / m
            * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        )
        gconv = maxpool2_backward(pool_cache, gpool)
        gx, gw, gb = conv3x3_backward(win, p["weight"], gconv)
        self._accumulate("weight", gw)
        self._accumulate("bias", gb)
        return gx

    def discrete_state(self, cache):
        return [cache[1][1], cache[4]]


class FCUnit(Block):
    """affine map -> ReLU -> dropout (training only)."""

    kind = "fc"
    op_type = OpType.FC

    def __init__(self, in_features: int, out_features: int, rng=None, provenance=None, dropout=DROPOUT_P):
        super().__init__((in_features,), (out_features,), provenance)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dropout = float(dropout)
        self.params = {
            "weight": _he(rng, in_features, (in_features, out_features)),
            "bias": np.zeros(out_features, DTYPE),
        }
        self.zero_grad()

    def forward(self, x, train=False, rng=None):
        self._check_input(x)
        x2 = x.reshape(x.shape[0], -1)
        y, mask = dense_relu_forward(x2, self.params["weight"], self.params["bias"])
        drop = None
        if train and self.dropout > 0:
            rng = rng if rng is not None else np.random.default_rng(0)
            keep = rng.random(y.shape) >= self.dropout
            drop = keep.astype(y.dtype) / y.dtype.type(1.0 - self.dropout)
            y = y * drop
        return y, (x.shape, x2, mask, drop)

    def backward(self, cache, g):
        shape, x2, mask, drop = cache
        if drop is not None:
            g = g * drop
        gz = g * mask
        self._accumulate("weight", x2.T @ gz)
        self._accumulate("bias", gz.sum(axis=0))
        return (gz @ self.params["weight"].T).reshape(shape)

    def discrete_state(self, cache):
        return [cache[2]]


class Linear(Block):
    """Plain affine classifier head (flattens its input)."""

    kind = "head"

    def __init__(self, in_features: int, out_features: int, rng=None, provenance=None):
        super().__init__((in_features,), (out_features,), provenance)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = {
            "weight": _glorot(rng, in_features, out_features, (in_features, out_features)),
            "bias": np.zeros(out_features, DTYPE),
        }
        self.zero_grad()

    def forward(self, x, train=False, rng=None):
        self._check_input(x)
        x2 = x.reshape(x.shape[0], -1)
        return x2 @ self.params["weight"] + self.params["bias"], (x.shape, x2)

    def backward(self, cache, g):
        shape, x2 = cache
        self._accumulate("weight", x2.T @ g)
        self._accumulate("bias", g.sum(axis=0))
        return (g @ self.params["weight"].T).reshape(shape)


class DenseAdapter(Block):
    """Stitch between flat features: ``depth`` stacked ReLU(W^T x + b) maps.

    The first map is d_in x d_out; extra maps (depth > 1) are d_out x d_out.
    """

    kind = "dense"

    def __init__(self, in_spec, out_features: int, depth: int = 1, rng=None):
        super().__init__(in_spec, (out_features,), STITCH)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.depth = int(depth)
        d_in = flat_size(self.in_spec)
        for i in range(self.depth):
            fan_in = d_in if i == 0 else out_features
            self.params[f"weight{i}"] = _glorot(rng, fan_in, out_features, (fan_in, out_features))
            self.params[f"bias{i}"] = np.zeros(out_features, DTYPE)
        self.zero_grad()

    def _check_input(self, x):
        if flat_size(x.shape[1:]) != flat_size(self.in_spec):
            raise ShapeMismatch(f"adapter expects {self.in_spec}, got {tuple(x.shape[1:])}")

    def forward(self, x, train=False, rng=None):
        self._check_input(x)
        h = x.reshape(x.shape[0], -1)
        caches = []
        for i in range(self.depth):
            y, mask = dense_relu_forward(h, self.params[f"weight{i}"], self.params[f"bias{i}"])
            caches.append((h, mask))
            h = y
        return h, (x.shape, caches)

    def backward(self, cache, g):
        shape, caches = cache
        for i in reversed(range(self.depth)):
            h, mask = caches[i]
            gz = g * mask
            self._accumulate(f"weight{i}", h.T @ gz)
            self._accumulate(f"bias{i}", gz.sum(axis=0))
            g = gz @ self.params[f"weight{i}"].T
        return g.reshape(shape)

    def discrete_state(self, cache):
        return [m for _, m in cache[1]]


class ChannelProjectAdapter(Block):
    """Stitch between feature maps: adaptive average pool to the target grid,
    then ``depth`` stacked 1x1 channel projections, each followed by ReLU."""

    kind = "channel"

    def __init__(self, in_spec, out_spec, depth: int = 1, rng=None):
        super().__init__(in_spec, out_spec, STITCH)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.depth = int(depth)
        c_in, h_in, w_in = self.in_spec
        c_out, h_out, w_out = self.out_spec
        for i in range(self.depth):
            fan_in = c_in if i == 0 else c_out
            self.params[f"weight{i}"] = _glorot(rng, fan_in, c_out, (fan_in, c_out))
            self.params[f"bias{i}"] = np.zeros(c_out, DTYPE)
        self.pool_h = adaptive_pool_matrix(h_in, h_out)
        self.pool_w = adaptive_pool_matrix(w_in, w_out)
        self.zero_grad()

    def astype(self, dtype):
        out = super().astype(dtype)
        out.pool_h = out.pool_h.astype(dtype)
        out.pool_w = out.pool_w.astype(dtype)
        return out

    def forward(self, x, train=False, rng=None):
        self._check_input(x)
        h = np.einsum("ih,nchw,jw->ncij", self.pool_h, x, self.pool_w, optimize=True)
        caches = []
        for i in range(self.depth):
            z = np.einsum("ncij,cd->ndij", h, self.params[f"weight{i}"], optimize=True)
            z = z + self.params[f"bias{i}"][None, :, None, None]
            mask = z > 0
            caches.append((h, mask))
            h = z * mask
        return h, caches

    def backward(self, caches, g):
        for i in reversed(range(self.depth)):
            h, mask = caches[i]
            gz = g * mask
            self._accumulate(f"weight{i}", np.einsum("ncij,ndij->cd", h, gz, optimize=True))
            self._accumulate(f"bias{i}", gz.sum(axis=(0, 2, 3)))
            g = np.einsum("ndij,cd->ncij", gz, self.params[f"weight{i}"], optimize=True)
        return np.einsum("ih,ncij,jw->nchw", self.pool_h, g, self.pool_w, optimize=True)

    def discrete_state(self, cache):
        return [m for _, m in cache]


LAYER_UNITS = (ConvUnit, FCUnit)
ADAPTERS = (DenseAdapter, ChannelProjectAdapter)
