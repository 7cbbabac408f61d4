"""A small NumPy neural-network engine with explicit reverse-mode gradients.

Tensors are plain ``numpy.ndarray`` objects in NCHW (images) or NF (vectors)
layout.  Layers cache what their backward pass needs during ``forward``;
calling ``backward`` without a preceding ``forward`` raises.  Training runs in
float32, gradient verification in float64.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
CHECKPOINT_MAGIC = b"NNET"


class ForwardNotRunError(RuntimeError):
    """``backward`` was called before ``forward``."""


class ShapeMismatchError(ValueError):
    pass


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    """Base class: ``params``/``grads`` share keys; ``buffers`` hold non-learned state."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _cached(self):
        if self._cache is None:
            raise ForwardNotRunError(f"{type(self).__name__}.backward called before forward")
        return self._cache

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for k, v in self.params.items():
            yield prefix + k, v
        for k, v in self.buffers.items():
            yield prefix + k, v

    def astype(self, dtype) -> "Layer":
        for store in (self.params, self.buffers):
            for k in store:
                store[k] = store[k].astype(dtype)
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        return self


class Conv3x3(Layer):
    """3x3 cross-correlation, stride 1, zero same-padding."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.params["w"] = glorot_uniform(rng, (c_out, c_in, 3, 3), 9 * c_in, 9 * c_out, dtype)
        self.params["b"] = np.zeros(c_out, dtype=dtype)
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def forward(self, x, train=True):
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ShapeMismatchError(f"conv expects (B, {self.c_in}, H, W), got {x.shape}")
        b, c, h, w = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        cols = sliding_window_view(xp, (3, 3), axis=(2, 3))  # (B, C, H, W, 3, 3)
        cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, c * 9)
        wmat = self.params["w"].reshape(self.c_out, c * 9)
        out = cols @ wmat.T + self.params["b"]
        self._cache = (cols, x.shape)
        return out.reshape(b, h, w, self.c_out).transpose(0, 3, 1, 2)

    def backward(self, grad):
        cols, (b, c, h, w) = self._cached()
        g2 = grad.transpose(0, 2, 3, 1).reshape(b * h * w, self.c_out)
        wmat = self.params["w"].reshape(self.c_out, c * 9)
        self.grads["w"] = (g2.T @ cols).reshape(self.params["w"].shape)
        self.grads["b"] = g2.sum(axis=0)
        dcols = (g2 @ wmat).reshape(b, h, w, c, 3, 3)
        dxp = np.zeros((b, c, h + 2, w + 2), dtype=grad.dtype)
        for di in range(3):
            for dj in range(3):
                dxp[:, :, di : di + h, dj : dj + w] += dcols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
        return dxp[:, :, 1:-1, 1:-1]


class MaxPool2(Layer):
    """2x2 max pooling, stride 2; ties go to the first element in row-major order."""

    def forward(self, x, train=True):
        b, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeMismatchError(f"max pooling needs even spatial dims, got {h}x{w}")
        blocks = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        blocks = blocks.reshape(b, c, h // 2, w // 2, 4)
        idx = np.argmax(blocks, axis=-1)
        self._cache = (idx, x.shape)
        return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    @property
    def argmax(self) -> np.ndarray:
        return self._cached()[0]

    def backward(self, grad):
        idx, (b, c, h, w) = self._cached()
        gb = np.zeros((b, c, h // 2, w // 2, 4), dtype=grad.dtype)
        np.put_along_axis(gb, idx[..., None], grad[..., None], axis=-1)
        return gb.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)


class ReLU(Layer):
    def forward(self, x, train=True):
        mask = x > 0
        self._cache = mask
        return np.where(mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, grad):
        return np.where(self._cached(), grad, 0).astype(grad.dtype, copy=False)


class Sigmoid(Layer):
    def forward(self, x, train=True):
        y = 0.5 * (1.0 + np.tanh(0.5 * x))  # overflow-free logistic
        self._cache = y
        return y

    def backward(self, grad):
        y = self._cached()
        return grad * y * (1 - y)


class Dense(Layer):
    """``y = W x + b`` applied row-wise to a (batch, features) array."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.params["w"] = glorot_uniform(rng, (n_out, n_in), n_in, n_out, dtype)
        self.params["b"] = np.zeros(n_out, dtype=dtype)
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def forward(self, x, train=True):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeMismatchError(f"dense expects (B, {self.n_in}), got {x.shape}")
        self._cache = x
        return x @ self.params["w"].T + self.params["b"]

    def backward(self, grad):
        x = self._cached()
        self.grads["w"] = grad.T @ x
        self.grads["b"] = grad.sum(axis=0)
        return grad @ self.params["w"]


class BatchNorm(Layer):
    """Batch normalisation over the batch axis of a (batch, features) array.

    Running statistics follow ``running = momentum * running + (1 - momentum) * batch``
    (the running variance uses the unbiased batch variance).
    """

    def __init__(self, features: int, dtype=np.float32, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        super().__init__()
        self.features, self.momentum, self.eps = features, momentum, eps
        self.params["gamma"] = np.ones(features, dtype=dtype)
        self.params["beta"] = np.zeros(features, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(features, dtype=dtype)
        self.buffers["running_var"] = np.ones(features, dtype=dtype)
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def forward(self, x, train=True):
        if x.ndim != 2 or x.shape[1] != self.features:
            raise ShapeMismatchError(f"batchnorm expects (B, {self.features}), got {x.shape}")
        if train:
            n = x.shape[0]
            if n < 2:
                raise ShapeMismatchError("batch normalisation in train mode needs batch >= 2")
            mu = x.mean(axis=0)
            var = x.var(axis=0)
            m = self.momentum
            self.buffers["running_mean"] = (m * self.buffers["running_mean"] + (1 - m) * mu).astype(x.dtype)
            self.buffers["running_var"] = (
                m * self.buffers["running_var"] + (1 - m) * var * (n / (n - 1))
            ).astype(x.dtype)
        else:
            mu, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv_std
        self._cache = (xhat, inv_std, train)
        return self.params["gamma"] * xhat + self.params["beta"]

    def backward(self, grad):
        xhat, inv_std, train = self._cached()
        self.grads["gamma"] = np.sum(grad * xhat, axis=0)
        self.grads["beta"] = grad.sum(axis=0)
        dxhat = grad * self.params["gamma"]
        if not train:
            return dxhat * inv_std
        n = grad.shape[0]
        return (inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0))


class FullConv(Layer):
    """Valid convolution whose kernel covers the whole C x H x W map -> C_out vector."""

    def __init__(self, c_in: int, h: int, w: int, c_out: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.in_shape = (c_in, h, w)
        self.c_out = c_out
        fan = c_in * h * w
        self.params["w"] = glorot_uniform(rng, (c_out, c_in, h, w), fan, c_out, dtype)
        self.params["b"] = np.zeros(c_out, dtype=dtype)
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def forward(self, x, train=True):
        if x.shape[1:] != self.in_shape:
            raise ShapeMismatchError(f"full conv kernel {self.in_shape} != input {x.shape[1:]}")
        flat = x.reshape(x.shape[0], -1)
        self._cache = (flat, x.shape)
        return flat @ self.params["w"].reshape(self.c_out, -1).T + self.params["b"]

    def backward(self, grad):
        flat, shape = self._cached()
        self.grads["w"] = (grad.T @ flat).reshape(self.params["w"].shape)
        self.grads["b"] = grad.sum(axis=0)
        return (grad @ self.params["w"].reshape(self.c_out, -1)).reshape(shape)


class Sequential(Layer):
    def __init__(self, layers: Sequence[Layer]):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x, train=True):
        for layer in self.layers:
            x = layer.forward(x, train)
        self._cache = True
        return x

    def backward(self, grad):
        self._cached()
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def named_tensors(self, prefix=""):
        for i, layer in enumerate(self.layers):
            yield from layer.named_tensors(f"{prefix}{i}.")

    def named_params(self, prefix="") -> Iterator[tuple[str, Layer, str]]:
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Sequential):
                yield from layer.named_params(f"{prefix}{i}.")
            else:
                for k in layer.params:
                    yield f"{prefix}{i}.{k}", layer, k

    def astype(self, dtype):
        for layer in self.layers:
            layer.astype(dtype)
        return self


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    decay1: float = 0.9
    decay2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.decay1**t
    bc2 = 1.0 - state.decay2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatchError(f"gradient {name} shape {g.shape} != parameter {p.shape}")
        m = state.first_moment.setdefault(name, np.zeros_like(p))
        v = state.second_moment.setdefault(name, np.zeros_like(p))
        m *= state.decay1
        m += (1.0 - state.decay1) * g
        v *= state.decay2
        v += (1.0 - state.decay2) * (g * g)
        p -= (state.learning_rate / bc1) * m / (np.sqrt(v / bc2) + state.epsilon)


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------


def relative_error(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / denom)


def central_difference(
    f: Callable[[], float], array: np.ndarray, indices: Iterable[int], h: float = 1e-5
) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. selected flat entries of ``array``.

    ``array`` is perturbed in place and restored.
    """
    flat = array.reshape(-1)
    out = []
    for i in indices:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out.append((fp - fm) / (2 * h))
    return np.array(out)


def sample_indices(size: int, count: int, rng: np.random.Generator) -> np.ndarray:
    if size <= count:
        return np.arange(size)
    return np.sort(rng.choice(size, count, replace=False))


# ---------------------------------------------------------------------------
# NNET checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], metadata: Mapping | None = None) -> None:
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        parts.append(a.tobytes())
    meta = json.dumps(dict(metadata or {}), sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(meta)) + meta)
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an NNET checkpoint")
    (count,) = struct.unpack_from("<I", data, 4)
    off = 8
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off : off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(data, "<f4", size, off).reshape(dims).copy()
        off += 4 * size
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    metadata = json.loads(data[off : off + n].decode("utf-8")) if n else {}
    return tensors, metadata
