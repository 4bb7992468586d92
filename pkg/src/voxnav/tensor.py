"""Minimal reverse-mode compute core on numpy arrays.

Layers cache what their backward rule needs during ``forward`` and return
the input gradient from ``backward`` while accumulating parameter
gradients.  Everything is dtype preserving; networks run in float32.

Summation order is fixed: convolutions and linear layers reduce through a
single matrix product over a fixed column layout (input channel major,
then kernel offset in (d, h, w) order), so results do not depend on the
batch partitioning done by callers.
"""

from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict

import numpy as np

from . import kernels
from .voxgrid import ShapeError

CHECKPOINT_VERSION = 1
_MAGIC = b"VXNCKPT\x00"
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class CheckpointError(ValueError):
    pass


class GeometryError(CheckpointError):
    pass


class MissingGradientError(RuntimeError):
    pass


class Tensor:
    """Named array with an optional same-shape gradient."""

    __slots__ = ("values", "grad")

    def __init__(self, values, grad=None):
        if not isinstance(values, np.ndarray):
            values = np.asarray(values, dtype=np.float32)
        self.values = values
        self.grad = grad

    @property
    def shape(self):
        return self.values.shape

    def accumulate(self, g):
        if g.shape != self.values.shape:
            raise ShapeError(f"gradient {g.shape} vs value {self.values.shape}")
        self.grad = g if self.grad is None else self.grad + g

    def zero_grad(self):
        self.grad = None


# --- convolution primitives ---

def conv_out_size(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def _im2col(xp, k, s, out_dims):
    return kernels.im2col(np.ascontiguousarray(xp), k, s, *out_dims)


def _col2im(cols, padded_shape, k, s, out_dims):
    return kernels.col2im(np.ascontiguousarray(cols), *padded_shape, k, s, *out_dims)


def _unpad(xp, p):
    if p == 0:
        return xp
    return xp[:, :, p:-p, p:-p, p:-p]


def conv3d(x, weight, bias, stride=1, padding=0):
    """Cross-correlation of x (N, C_in, D, H, W) with weight (C_out, C_in, k, k, k).

    Returns ``(out, cache)`` for :func:`conv3d_backward`.
    """
    if x.ndim != 5:
        raise ShapeError(f"conv3d expects (N, C, D, H, W), got {x.shape}")
    c_out, c_in, k = weight.shape[0], weight.shape[1], weight.shape[2]
    if x.shape[1] != c_in:
        raise ShapeError(f"input has {x.shape[1]} channels, weight expects {c_in}")
    out_dims = tuple(conv_out_size(n, k, stride, padding) for n in x.shape[2:])
    if min(out_dims) < 1:
        raise ShapeError(f"conv k={k} s={stride} p={padding} invalid for input {x.shape[2:]}")
    n = x.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0)) + ((padding, padding),) * 3) if padding else x
    cols = _im2col(xp, k, stride, out_dims)
    out = weight.reshape(c_out, -1) @ cols
    out = out.reshape(c_out, n, *out_dims).transpose(1, 0, 2, 3, 4)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1, 1)
    return np.ascontiguousarray(out), (cols, xp.shape, weight, stride, padding, out_dims)


def conv3d_backward(grad, cache):
    """Gradients (dx, dweight, dbias) of :func:`conv3d`."""
    cols, padded_shape, weight, stride, padding, out_dims = cache
    c_out, k = weight.shape[0], weight.shape[2]
    g2 = grad.transpose(1, 0, 2, 3, 4).reshape(c_out, -1)
    dw = (g2 @ cols.T).reshape(weight.shape)
    db = g2.sum(axis=1)
    dcols = weight.reshape(c_out, -1).T @ g2
    dx = _unpad(_col2im(dcols, padded_shape, k, stride, out_dims), padding)
    return np.ascontiguousarray(dx), dw, db


def conv_transpose3d(x, weight, bias, stride=1, padding=0):
    """Transposed convolution; weight is (C_in, C_out, k, k, k).

    Output size per axis is (n - 1) * stride - 2 * padding + k.
    """
    c_in, c_out, k = weight.shape[0], weight.shape[1], weight.shape[2]
    if x.ndim != 5 or x.shape[1] != c_in:
        raise ShapeError(f"conv_transpose3d got {x.shape} for weight {weight.shape}")
    n = x.shape[0]
    in_dims = x.shape[2:]
    out_dims = tuple((d - 1) * stride - 2 * padding + k for d in in_dims)
    if min(out_dims) < 1:
        raise ShapeError(f"transposed conv output {out_dims} is empty")
    x2 = x.transpose(1, 0, 2, 3, 4).reshape(c_in, -1)
    cols = weight.reshape(c_in, -1).T @ x2
    padded = (n, c_out) + tuple(d + 2 * padding for d in out_dims)
    out = _unpad(_col2im(cols, padded, k, stride, in_dims), padding)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1, 1)
    return np.ascontiguousarray(out), (x2, weight, stride, padding, in_dims, n)


def conv_transpose3d_backward(grad, cache):
    x2, weight, stride, padding, in_dims, n = cache
    c_in, k = weight.shape[0], weight.shape[2]
    gp = np.pad(grad, ((0, 0), (0, 0)) + ((padding, padding),) * 3) if padding else grad
    gcols = _im2col(gp, k, stride, in_dims)
    dx = (weight.reshape(c_in, -1) @ gcols).reshape(c_in, n, *in_dims).transpose(1, 0, 2, 3, 4)
    dw = (x2 @ gcols.T).reshape(weight.shape)
    db = grad.sum(axis=(0, 2, 3, 4))
    return np.ascontiguousarray(dx), dw, db


def linear(x, weight, bias):
    """y = x W^T + b with weight (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear input {x.shape} vs weight {weight.shape}")
    y = x @ weight.T
    if bias is not None:
        y = y + bias
    return y, x


def linear_backward(grad, x, weight):
    return grad @ weight, grad.T @ x, grad.sum(axis=0)


def batchnorm(x, gamma, beta, running_mean, running_var, train: bool):
    """Per-feature normalisation of x (N, F).

    Train mode uses batch statistics and updates the running buffers in place.
    """
    if train:
        if x.shape[0] < 2:
            raise ShapeError("batchnorm in train mode needs at least 2 samples")
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        n = x.shape[0]
        running_mean *= 1 - BN_MOMENTUM
        running_mean += BN_MOMENTUM * mean
        running_var *= 1 - BN_MOMENTUM
        running_var += BN_MOMENTUM * var * (n / (n - 1))
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean) * inv_std
    return gamma * xhat + beta, (xhat, inv_std, gamma, train)


def batchnorm_backward(grad, cache):
    xhat, inv_std, gamma, train = cache
    dgamma = (grad * xhat).sum(axis=0)
    dbeta = grad.sum(axis=0)
    dxhat = grad * gamma
    if not train:
        return dxhat * inv_std, dgamma, dbeta
    n = grad.shape[0]
    dx = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    return dx, dgamma, dbeta


def relu(x):
    return np.maximum(x, 0)


def relu_backward(grad, x):
    return grad * (x > 0)


def sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)


def sigmoid_backward(grad, y):
    return grad * y * (1 - y)


def elementwise(x, f: str):
    if f == "relu":
        return relu(x)
    if f == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown elementwise function {f!r}")


def mse_loss(pred, target):
    """Mean of squared errors over all components; returns (loss, d loss / d pred)."""
    pred = np.asarray(pred)
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff.astype(np.float64) ** 2)), (2.0 / diff.size) * diff


# --- layers ---

def _uniform(rng, shape, fan_in, dtype=np.float32):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    def params(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict()

    def buffers(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict()

    def geometry(self) -> dict:
        return {"type": type(self).__name__}

    def cost(self, shape):
        """(macs, params, output shape) for a single input of ``shape`` (no batch axis)."""
        return 0, 0, shape

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


class Conv3d(Layer):
    def __init__(self, c_in, c_out, k, stride=1, padding=0, rng=None):
        rng = rng or np.random.default_rng(0)
        fan_in = c_in * k ** 3
        self.weight = Tensor(_uniform(rng, (c_out, c_in, k, k, k), fan_in))
        self.bias = Tensor(_uniform(rng, (c_out,), fan_in))
        self.c_in, self.c_out, self.k, self.stride, self.padding = c_in, c_out, k, stride, padding

    def params(self):
        return OrderedDict(weight=self.weight, bias=self.bias)

    def geometry(self):
        return {"type": "Conv3d", "c_in": self.c_in, "c_out": self.c_out, "k": self.k,
                "stride": self.stride, "padding": self.padding}

    def cost(self, shape):
        c, *dims = shape
        if c != self.c_in:
            raise ShapeError(f"Conv3d expects {self.c_in} channels, got {c}")
        out = [conv_out_size(d, self.k, self.stride, self.padding) for d in dims]
        if min(out) < 1:
            raise ShapeError(f"Conv3d geometry invalid for {shape}")
        macs = self.c_in * self.c_out * self.k ** 3 * math.prod(out)
        params = self.c_in * self.c_out * self.k ** 3 + self.c_out
        return macs, params, (self.c_out, *out)

    def forward(self, x, train=False):
        y, self._cache = conv3d(x, self.weight.values, self.bias.values, self.stride, self.padding)
        return y

    def backward(self, grad):
        dx, dw, db = conv3d_backward(grad, self._cache)
        self.weight.accumulate(dw)
        self.bias.accumulate(db)
        return dx


class ConvTranspose3d(Layer):
    def __init__(self, c_in, c_out, k, stride=1, padding=0, rng=None):
        rng = rng or np.random.default_rng(0)
        fan_in = c_out * k ** 3
        self.weight = Tensor(_uniform(rng, (c_in, c_out, k, k, k), fan_in))
        self.bias = Tensor(_uniform(rng, (c_out,), fan_in))
        self.c_in, self.c_out, self.k, self.stride, self.padding = c_in, c_out, k, stride, padding

    def params(self):
        return OrderedDict(weight=self.weight, bias=self.bias)

    def geometry(self):
        return {"type": "ConvTranspose3d", "c_in": self.c_in, "c_out": self.c_out, "k": self.k,
                "stride": self.stride, "padding": self.padding}

    def cost(self, shape):
        c, *dims = shape
        if c != self.c_in:
            raise ShapeError(f"ConvTranspose3d expects {self.c_in} channels, got {c}")
        out = [(d - 1) * self.stride - 2 * self.padding + self.k for d in dims]
        macs = self.c_in * self.c_out * self.k ** 3 * math.prod(dims)
        params = self.c_in * self.c_out * self.k ** 3 + self.c_out
        return macs, params, (self.c_out, *out)

    def forward(self, x, train=False):
        y, self._cache = conv_transpose3d(x, self.weight.values, self.bias.values,
                                          self.stride, self.padding)
        return y

    def backward(self, grad):
        dx, dw, db = conv_transpose3d_backward(grad, self._cache)
        self.weight.accumulate(dw)
        self.bias.accumulate(db)
        return dx


class Linear(Layer):
    def __init__(self, n_in, n_out, rng=None):
        rng = rng or np.random.default_rng(0)
        self.weight = Tensor(_uniform(rng, (n_out, n_in), n_in))
        self.bias = Tensor(_uniform(rng, (n_out,), n_in))
        self.n_in, self.n_out = n_in, n_out

    def params(self):
        return OrderedDict(weight=self.weight, bias=self.bias)

    def geometry(self):
        return {"type": "Linear", "n_in": self.n_in, "n_out": self.n_out}

    def cost(self, shape):
        if shape != (self.n_in,):
            raise ShapeError(f"Linear expects ({self.n_in},), got {shape}")
        return self.n_in * self.n_out, self.n_in * self.n_out + self.n_out, (self.n_out,)

    def forward(self, x, train=False):
        y, self._x = linear(x, self.weight.values, self.bias.values)
        return y

    def backward(self, grad):
        dx, dw, db = linear_backward(grad, self._x, self.weight.values)
        self.weight.accumulate(dw)
        self.bias.accumulate(db)
        return dx


class BatchNorm1d(Layer):
    def __init__(self, features):
        self.features = features
        self.gamma = Tensor(np.ones(features, dtype=np.float32))
        self.beta = Tensor(np.zeros(features, dtype=np.float32))
        self.running_mean = np.zeros(features, dtype=np.float32)
        self.running_var = np.ones(features, dtype=np.float32)

    def params(self):
        return OrderedDict(gamma=self.gamma, beta=self.beta)

    def buffers(self):
        return OrderedDict(running_mean=self.running_mean, running_var=self.running_var)

    def geometry(self):
        return {"type": "BatchNorm1d", "features": self.features}

    def cost(self, shape):
        return 0, 2 * self.features, shape

    def forward(self, x, train=False):
        y, self._cache = batchnorm(x, self.gamma.values, self.beta.values,
                                   self.running_mean, self.running_var, train)
        return y

    def backward(self, grad):
        dx, dg, db = batchnorm_backward(grad, self._cache)
        self.gamma.accumulate(dg)
        self.beta.accumulate(db)
        return dx


class ReLU(Layer):
    def forward(self, x, train=False):
        self._x = x
        return relu(x)

    def backward(self, grad):
        return relu_backward(grad, self._x)


class Sigmoid(Layer):
    def forward(self, x, train=False):
        self._y = sigmoid(x)
        return self._y

    def backward(self, grad):
        return sigmoid_backward(grad, self._y)


class Flatten(Layer):
    def cost(self, shape):
        return 0, 0, (math.prod(shape),)

    def forward(self, x, train=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


class Sequential(Layer):
    def __init__(self, *layers):
        self.layers = list(layers)

    def params(self):
        out = OrderedDict()
        for i, layer in enumerate(self.layers):
            for name, p in layer.params().items():
                out[f"{i}.{name}"] = p
        return out

    def buffers(self):
        out = OrderedDict()
        for i, layer in enumerate(self.layers):
            for name, b in layer.buffers().items():
                out[f"{i}.{name}"] = b
        return out

    def geometry(self):
        return {"type": "Sequential", "layers": [layer.geometry() for layer in self.layers]}

    def cost(self, shape):
        macs = params = 0
        for layer in self.layers:
            m, p, shape = layer.cost(shape)
            macs += m
            params += p
        return macs, params, shape

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad


def count_cost(description, input_shape=None) -> dict:
    """Analytic multiply-accumulates and parameter count.

    ``description`` is a layer, a list of layers, or any object exposing
    ``cost(shape)``; ``input_shape`` excludes the batch axis.
    """
    if isinstance(description, (list, tuple)):
        description = Sequential(*description)
    if input_shape is None:
        input_shape = getattr(description, "input_shape", ())
    macs, params, _ = description.cost(tuple(input_shape))
    return {"macs": int(macs), "params": int(params)}


# --- parameters and optimisation ---

class ParamSet:
    """Named trainable tensors with per-parameter Adam state."""

    def __init__(self, params, buffers=None):
        self.params = OrderedDict(params)
        self.buffers = OrderedDict(buffers or {})
        self.m = OrderedDict((k, np.zeros_like(p.values)) for k, p in self.params.items())
        self.v = OrderedDict((k, np.zeros_like(p.values)) for k, p in self.params.items())
        self.steps = OrderedDict((k, 0) for k in self.params)

    @classmethod
    def of(cls, module: Layer, prefix: str = "") -> "ParamSet":
        return cls(((prefix + k, p) for k, p in module.params().items()),
                   ((prefix + k, b) for k, b in module.buffers().items()))

    def merged(self, other: "ParamSet") -> "ParamSet":
        out = ParamSet(list(self.params.items()) + list(other.params.items()),
                       list(self.buffers.items()) + list(other.buffers.items()))
        for src in (self, other):
            for k in src.params:
                out.m[k], out.v[k], out.steps[k] = src.m[k], src.v[k], src.steps[k]
        return out

    def __len__(self):
        return len(self.params)

    @property
    def step_count(self) -> int:
        return max(self.steps.values(), default=0)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def adam_step(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        for name, p in self.params.items():
            if p.grad is None:
                raise MissingGradientError(f"parameter {name!r} has no gradient")
        for name, p in self.params.items():
            g = p.grad.astype(p.values.dtype, copy=False)
            t = self.steps[name] + 1
            self.steps[name] = t
            m, v = self.m[name], self.v[name]
            m *= beta1
            m += (1 - beta1) * g
            v *= beta2
            v += (1 - beta2) * g * g
            mhat = m / (1 - beta1 ** t)
            vhat = v / (1 - beta2 ** t)
            p.values -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.values.dtype, copy=False)
            p.grad = np.zeros_like(p.values)

    def state_arrays(self):
        """Arrays in declaration order: each parameter's value, m, v, then buffers."""
        for name, p in self.params.items():
            yield name, "value", p.values
            yield name, "m", self.m[name]
            yield name, "v", self.v[name]
        for name, b in self.buffers.items():
            yield name, "buffer", b


def save_checkpoint(path, network: str, geometry: dict, paramset: ParamSet,
                    config: dict | None = None) -> None:
    """Magic, u32 header length, JSON header, then little-endian float32 blob."""
    header = {
        "version": CHECKPOINT_VERSION,
        "network": network,
        "geometry": geometry,
        "step_count": paramset.step_count,
        "steps": list(paramset.steps.values()),
        "params": [{"name": k, "shape": list(p.shape)} for k, p in paramset.params.items()],
        "buffers": [{"name": k, "shape": list(b.shape)} for k, b in paramset.buffers.items()],
        "config": config or {},
    }
    head = json.dumps(header, sort_keys=True).encode()
    blob = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes()
                    for _, _, a in paramset.state_arrays())
    with open(path, "wb") as f:
        f.write(_MAGIC + struct.pack("<I", len(head)) + head + blob)


def read_checkpoint(path):
    """Parse a checkpoint into (header, {(name, kind): array})."""
    data = open(path, "rb").read()
    if len(data) < len(_MAGIC) + 4 or not data.startswith(_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack_from("<I", data, len(_MAGIC))
    start = len(_MAGIC) + 4
    if start + n > len(data):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[start:start + n])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {header.get('version')} "
                              f"!= {CHECKPOINT_VERSION}")
    pos = start + n
    arrays = {}
    specs = [(p["name"], kind, p["shape"]) for p in header["params"] for kind in ("value", "m", "v")]
    specs += [(b["name"], "buffer", b["shape"]) for b in header["buffers"]]
    for name, kind, shape in specs:
        count = math.prod(shape)
        if pos + 4 * count > len(data):
            raise CheckpointError(f"{path}: truncated parameter blob at {name}")
        arrays[(name, kind)] = np.frombuffer(data, "<f4", count, pos).reshape(shape).astype(np.float32)
        pos += 4 * count
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return header, arrays


def load_checkpoint(path, paramset: ParamSet, geometry: dict | None = None) -> dict:
    """Restore values, moments and buffers into ``paramset`` in place; returns the header."""
    header, arrays = read_checkpoint(path)
    if geometry is not None and header["geometry"] != geometry:
        raise GeometryError(f"{path}: geometry {header['geometry']} does not match {geometry}")
    names = [p["name"] for p in header["params"]]
    if names != list(paramset.params) or \
            [b["name"] for b in header["buffers"]] != list(paramset.buffers):
        raise GeometryError(f"{path}: parameter layout does not match the network")
    for (name, p), t in zip(paramset.params.items(), header["steps"]):
        if tuple(p.shape) != arrays[(name, "value")].shape:
            raise GeometryError(f"{path}: {name} shape {arrays[(name, 'value')].shape} "
                                f"!= {p.shape}")
        p.values[...] = arrays[(name, "value")]
        paramset.m[name][...] = arrays[(name, "m")]
        paramset.v[name][...] = arrays[(name, "v")]
        paramset.steps[name] = int(t)
    for name, b in paramset.buffers.items():
        b[...] = arrays[(name, "buffer")]
    return header
