"""Small numpy layer library with hand-written backward passes.

Tensors are ``(batch, channels, height, width)`` arrays.  Layers are
stateless descriptions; their parameters live in a :class:`ParamStore`
under ``"<layer-index>.<name>"`` keys so that a whole network can be
checkpointed and optimized as a flat dictionary.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    pass


class InvalidStateError(RuntimeError):
    pass


class NumericError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# helpers


def _he_uniform(rng, shape, fan_in):
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def _im2col(x, kh, kw, stride, pad):
    """``(N, C, H, W)`` -> ``(N, C*kh*kw, Ho*Wo)`` patch matrix."""
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    return cols, ho, wo


def _col2im(dcols, x_shape, kh, kw, stride, pad, ho, wo):
    n, c, h, w = x_shape
    dcols = dcols.reshape(n, c, kh, kw, ho, wo)
    dx = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
    if pad:
        dx = dx[:, :, pad:-pad, pad:-pad]
    return dx


# ---------------------------------------------------------------------------
# layers


class Layer:
    kind = "layer"

    def param_shapes(self):
        return {}

    def init_params(self, rng):
        return {}

    def output_shape(self, shape):
        return shape

    def forward(self, params, x):
        raise NotImplementedError

    def backward(self, params, cache, dy):
        raise NotImplementedError

    def __repr__(self):
        args = ", ".join(f"{k}={v}" for k, v in vars(self).items())
        return f"{type(self).__name__}({args})"


class Conv2d(Layer):
    kind = "conv"

    def __init__(self, in_ch, out_ch, kernel=3, stride=1, padding=None):
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.kernel = kernel
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding

    def param_shapes(self):
        return {"w": (self.out_ch, self.in_ch, self.kernel, self.kernel), "b": (self.out_ch,)}

    def init_params(self, rng):
        fan_in = self.in_ch * self.kernel * self.kernel
        return {
            "w": _he_uniform(rng, self.param_shapes()["w"], fan_in),
            "b": np.zeros(self.out_ch, dtype=np.float32),
        }

    def output_shape(self, shape):
        n, c, h, w = shape
        if c != self.in_ch:
            raise ShapeError(f"expected {self.in_ch} channels, got {c}")
        k, s, p = self.kernel, self.stride, self.padding
        ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"input {h}x{w} too small for kernel {k}")
        return (n, self.out_ch, ho, wo)

    def forward(self, params, x):
        n = x.shape[0]
        self.output_shape(x.shape)
        cols, ho, wo = _im2col(x, self.kernel, self.kernel, self.stride, self.padding)
        wmat = params["w"].reshape(self.out_ch, -1)
        y = np.matmul(wmat, cols) + params["b"][:, None]
        return y.reshape(n, self.out_ch, ho, wo), (x.shape, cols, ho, wo)

    def backward(self, params, cache, dy):
        x_shape, cols, ho, wo = cache
        d = dy.reshape(dy.shape[0], self.out_ch, ho * wo)
        wmat = params["w"].reshape(self.out_ch, -1)
        grads = {
            "w": np.tensordot(d, cols, axes=([0, 2], [0, 2])).reshape(params["w"].shape),
            "b": d.sum(axis=(0, 2)),
        }
        dx = _col2im(np.matmul(wmat.T, d), x_shape, self.kernel, self.kernel, self.stride,
                     self.padding, ho, wo)
        return dx, grads


class ReLU(Layer):
    kind = "relu"

    def forward(self, params, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, params, cache, dy):
        return dy * cache, {}


class MaxPool2d(Layer):
    kind = "pool-max"

    def __init__(self, size=2):
        self.size = size

    def output_shape(self, shape):
        n, c, h, w = shape
        if h % self.size or w % self.size:
            raise ShapeError(f"{h}x{w} not divisible by pool size {self.size}")
        return (n, c, h // self.size, w // self.size)

    def forward(self, params, x):
        n, c, ho, wo = self.output_shape(x.shape)
        s = self.size
        blocks = x.reshape(n, c, ho, s, wo, s).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, s * s)
        idx = blocks.argmax(axis=-1)
        y = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
        return y, (x.shape, idx)

    def backward(self, params, cache, dy):
        x_shape, idx = cache
        n, c, ho, wo = dy.shape
        s = self.size
        dblocks = np.zeros((n, c, ho, wo, s * s), dtype=dy.dtype)
        np.put_along_axis(dblocks, idx[..., None], dy[..., None], axis=-1)
        dx = dblocks.reshape(n, c, ho, wo, s, s).transpose(0, 1, 2, 4, 3, 5).reshape(x_shape)
        return dx, {}


class AvgPool2d(Layer):
    """Average pooling; ``size=None`` pools the whole feature map."""

    kind = "pool-avg"

    def __init__(self, size=None):
        self.size = size

    def _size(self, shape):
        return (shape[2], shape[3]) if self.size is None else (self.size, self.size)

    def output_shape(self, shape):
        n, c, h, w = shape
        sh, sw = self._size(shape)
        if h % sh or w % sw:
            raise ShapeError(f"{h}x{w} not divisible by pool size {sh}x{sw}")
        return (n, c, h // sh, w // sw)

    def forward(self, params, x):
        n, c, ho, wo = self.output_shape(x.shape)
        sh, sw = self._size(x.shape)
        y = x.reshape(n, c, ho, sh, wo, sw).mean(axis=(3, 5))
        return y, (x.shape, sh, sw)

    def backward(self, params, cache, dy):
        x_shape, sh, sw = cache
        dx = np.repeat(np.repeat(dy, sh, axis=2), sw, axis=3) / (sh * sw)
        return dx.reshape(x_shape), {}


class Upsample(Layer):
    kind = "upsample-nearest"

    def __init__(self, scale=2):
        self.scale = scale

    def output_shape(self, shape):
        n, c, h, w = shape
        return (n, c, h * self.scale, w * self.scale)

    def forward(self, params, x):
        s = self.scale
        return np.repeat(np.repeat(x, s, axis=2), s, axis=3), None

    def backward(self, params, cache, dy):
        n, c, h, w = dy.shape
        s = self.scale
        return dy.reshape(n, c, h // s, s, w // s, s).sum(axis=(3, 5)), {}


class Linear(Layer):
    """Dense layer over the flattened non-batch dims; output is ``(N, out, 1, 1)``."""

    kind = "linear"

    def __init__(self, fan_in, fan_out):
        self.fan_in = fan_in
        self.fan_out = fan_out

    def param_shapes(self):
        return {"w": (self.fan_out, self.fan_in), "b": (self.fan_out,)}

    def init_params(self, rng):
        return {
            "w": _he_uniform(rng, (self.fan_out, self.fan_in), self.fan_in),
            "b": np.zeros(self.fan_out, dtype=np.float32),
        }

    def output_shape(self, shape):
        if int(np.prod(shape[1:])) != self.fan_in:
            raise ShapeError(f"expected {self.fan_in} input features, got {shape[1:]}")
        return (shape[0], self.fan_out, 1, 1)

    def forward(self, params, x):
        self.output_shape(x.shape)
        flat = x.reshape(x.shape[0], -1)
        y = flat @ params["w"].T + params["b"]
        return y.reshape(x.shape[0], self.fan_out, 1, 1), (x.shape, flat)

    def backward(self, params, cache, dy):
        x_shape, flat = cache
        d = dy.reshape(dy.shape[0], self.fan_out)
        grads = {"w": d.T @ flat, "b": d.sum(axis=0)}
        return (d @ params["w"]).reshape(x_shape), grads


class ResidualBlock(Layer):
    """conv-relu-conv plus shortcut, then relu.  No normalization layers.

    The shortcut is the identity unless the block changes channel count or
    stride, in which case it is a 1x1 strided convolution.
    """

    kind = "residual-block"

    def __init__(self, in_ch, out_ch, stride=1):
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.stride = stride
        self.conv1 = Conv2d(in_ch, out_ch, 3, stride, 1)
        self.conv2 = Conv2d(out_ch, out_ch, 3, 1, 1)
        self.proj = Conv2d(in_ch, out_ch, 1, stride, 0) if (stride != 1 or in_ch != out_ch) else None

    def _parts(self):
        parts = {"conv1": self.conv1, "conv2": self.conv2}
        if self.proj is not None:
            parts["proj"] = self.proj
        return parts

    def param_shapes(self):
        return {f"{p}.{k}": s for p, layer in self._parts().items()
                for k, s in layer.param_shapes().items()}

    def init_params(self, rng):
        return {f"{p}.{k}": v for p, layer in self._parts().items()
                for k, v in layer.init_params(rng).items()}

    @staticmethod
    def _sub(params, prefix):
        n = len(prefix) + 1
        return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}

    def output_shape(self, shape):
        return self.conv2.output_shape(self.conv1.output_shape(shape))

    def forward(self, params, x):
        h1, c1 = self.conv1.forward(self._sub(params, "conv1"), x)
        mask1 = h1 > 0
        h2, c2 = self.conv2.forward(self._sub(params, "conv2"), h1 * mask1)
        if self.proj is not None:
            sc, cp = self.proj.forward(self._sub(params, "proj"), x)
        else:
            sc, cp = x, None
        out = h2 + sc
        mask2 = out > 0
        return out * mask2, (c1, mask1, c2, cp, mask2)

    def backward(self, params, cache, dy):
        c1, mask1, c2, cp, mask2 = cache
        d = dy * mask2
        grads = {}
        dh1, g2 = self.conv2.backward(self._sub(params, "conv2"), c2, d)
        dx, g1 = self.conv1.backward(self._sub(params, "conv1"), c1, dh1 * mask1)
        grads.update({f"conv2.{k}": v for k, v in g2.items()})
        grads.update({f"conv1.{k}": v for k, v in g1.items()})
        if self.proj is not None:
            dsc, gp = self.proj.backward(self._sub(params, "proj"), cp, d)
            grads.update({f"proj.{k}": v for k, v in gp.items()})
            dx = dx + dsc
        else:
            dx = dx + d
        return dx, grads


# ---------------------------------------------------------------------------
# parameter store + whole-network passes


@dataclass
class ParamStore:
    params: dict = field(default_factory=dict)
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    version: int = 0

    def __post_init__(self):
        for k, p in self.params.items():
            self.m.setdefault(k, np.zeros_like(p))
            self.v.setdefault(k, np.zeros_like(p))

    def __getitem__(self, key):
        return self.params[key]

    def names(self):
        return sorted(self.params)

    def copy(self):
        return ParamStore(
            {k: p.copy() for k, p in self.params.items()},
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
            self.step,
            self.version,
        )

    def astype(self, dtype):
        out = self.copy()
        out.params = {k: p.astype(dtype) for k, p in out.params.items()}
        return out

    def merge(self, other):
        return ParamStore({**self.params, **other.params}, {**self.m, **other.m},
                          {**self.v, **other.v}, max(self.step, other.step))


def init_params(net, rng, prefix=""):
    """Fresh He-uniform parameters for every layer of ``net``."""
    params = {}
    for i, layer in enumerate(net):
        for name, value in layer.init_params(rng).items():
            params[f"{prefix}{i}.{name}"] = value
    return ParamStore(params)


def _layer_params(store, prefix, i):
    key = f"{prefix}{i}."
    n = len(key)
    return {k[n:]: v for k, v in store.params.items() if k.startswith(key)}


def output_shape(net, shape):
    for i, layer in enumerate(net):
        try:
            shape = layer.output_shape(shape)
        except ShapeError as exc:
            raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
    return shape


@dataclass
class Cache:
    net_id: int
    version: int
    caches: list


def forward(net, store, x, prefix=""):
    """Run ``x`` through ``net``; returns ``(y, cache)``."""
    if x.ndim != 4:
        raise ShapeError(f"expected a 4-d tensor, got shape {x.shape}")
    caches = []
    for i, layer in enumerate(net):
        try:
            x, c = layer.forward(_layer_params(store, prefix, i), x)
        except ShapeError as exc:
            raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
        caches.append(c)
    return x, Cache(id(net), store.version, caches)


def backward(net, store, cache, grad_out, prefix=""):
    """Backpropagate ``grad_out``; returns ``(param_grads, grad_input)``."""
    if cache.net_id != id(net) or cache.version != store.version or len(cache.caches) != len(net):
        raise InvalidStateError("cache does not belong to this network/parameter state")
    grads = {}
    d = grad_out
    for i in range(len(net) - 1, -1, -1):
        d, g = net[i].backward(_layer_params(store, prefix, i), cache.caches[i], d)
        for name, value in g.items():
            grads[f"{prefix}{i}.{name}"] = value
    return grads, d


def adam_step(store, grads, lr, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update in place (L2 weight decay folded into the gradient)."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {k}")
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for k in sorted(grads):
        p = store.params[k]
        g = grads[k].astype(p.dtype, copy=False)
        if weight_decay:
            g = g + weight_decay * p
        m = store.m[k] = beta1 * store.m[k] + (1.0 - beta1) * g
        v = store.v[k] = beta2 * store.v[k] + (1.0 - beta2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        store.params[k] = (p - step).astype(p.dtype, copy=False)
    store.version += 1
    return store


def lr_schedule(epoch, base_lr, decay=0.1, period=50):
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return base_lr * decay ** (epoch // period)


def mse(a, b):
    """Mean over the batch of per-sample squared L2 distances (float64)."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    diff = a.astype(np.float64) - b.astype(np.float64)
    return float((diff.reshape(len(diff), -1) ** 2).sum(axis=1).mean())
