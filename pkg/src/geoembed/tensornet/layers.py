"""Layer objects with forward passes and reverse-mode gradients.

Every layer exposes param_shapes() (computable before allocation, so
parameter audits never materialize arrays), init_params(rng, weight_std),
forward(x, training) and backward(dy). Parameter gradients accumulate in
.grads under the same keys as .params.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .ops import ShapeMismatch


class BatchTooSmall(ValueError):
    """Batch normalization cannot estimate statistics from < 2 samples."""


class Layer:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def param_shapes(self) -> dict[str, tuple]:
        return {}

    def init_params(self, rng: np.random.Generator, weight_std: float) -> None:
        for name, shape in self.param_shapes().items():
            if name in ("bias", "shift"):
                self.params[name] = np.zeros(shape)
            elif name == "scale":
                self.params[name] = np.ones(shape)
            else:
                self.params[name] = rng.normal(0.0, weight_std, size=shape)
        self.zero_grads()

    def zero_grads(self) -> None:
        self.grads = {name: np.zeros_like(p) for name, p in self.params.items()}

    @property
    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes().values())

    def spec(self) -> dict:
        return {"type": type(self).__name__}

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Conv2d(Layer):
    """Flipped-kernel convolution with per-output-channel bias."""

    def __init__(self, c_in: int, c_out: int, kernel: int = 3, stride: int = 1, pad: int = 0):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.kernel, self.stride, self.pad = kernel, stride, pad

    def param_shapes(self):
        return {
            "weight": (self.kernel, self.kernel, self.c_in, self.c_out),
            "bias": (self.c_out,),
        }

    def spec(self):
        return {"type": "Conv2d", "c_in": self.c_in, "c_out": self.c_out,
                "kernel": self.kernel, "stride": self.stride, "pad": self.pad}

    def forward(self, x, training=False):
        self._x_shape = x.shape
        out, self._cols = ops.conv2d_batch(
            x, self.params["weight"], self.params["bias"], self.stride, self.pad
        )
        return out

    def backward(self, dy, need_input_grad=True):
        dx, dw, db = ops.conv2d_backward(
            dy, self._cols, self.params["weight"], self._x_shape, self.stride,
            self.pad, need_input_grad=need_input_grad,
        )
        self.grads["weight"] += dw
        self.grads["bias"] += db
        return dx


class TransposeConv2d(Layer):
    """Exact adjoint of Conv2d(c_out, c_in, kernel, stride, pad), plus bias.

    The kernel is stored in the mirrored convolution's orientation
    (kernel, kernel, c_out, c_in), so a decoder layer "mirrors" its encoder
    twin parameter-for-parameter.
    """

    def __init__(self, c_in: int, c_out: int, kernel: int = 3, stride: int = 1,
                 pad: int = 0, output_size: int | None = None):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.kernel, self.stride, self.pad = kernel, stride, pad
        self.output_size = output_size

    def param_shapes(self):
        return {
            "weight": (self.kernel, self.kernel, self.c_out, self.c_in),
            "bias": (self.c_out,),
        }

    def spec(self):
        return {"type": "TransposeConv2d", "c_in": self.c_in, "c_out": self.c_out,
                "kernel": self.kernel, "stride": self.stride, "pad": self.pad}

    def forward(self, z, training=False):
        self._z = z
        return ops.transpose_conv2d_batch(
            z, self.params["weight"], self.params["bias"], self.stride, self.pad,
            self.output_size,
        )

    def backward(self, dout):
        dz, dw, db = ops.transpose_conv2d_backward(
            dout, self._z.shape, self.params["weight"], self._z, self.stride, self.pad
        )
        self.grads["weight"] += dw
        self.grads["bias"] += db
        return dz


class MaxPool2d(Layer):
    """Max pooling that remembers argmax indices for a paired unpool."""

    def __init__(self, kernel: int = 2, stride: int = 2):
        super().__init__()
        self.kernel, self.stride = kernel, stride
        self.last_indices: np.ndarray | None = None
        self.last_input_shape: tuple | None = None

    def spec(self):
        return {"type": "MaxPool2d", "kernel": self.kernel, "stride": self.stride}

    def forward(self, x, training=False):
        out, idx = ops.max_pool_batch(x, self.kernel, self.stride)
        self.last_indices = idx
        self.last_input_shape = x.shape
        return out

    def backward(self, dy):
        return ops.max_pool_backward(
            dy, self.last_indices, self.last_input_shape, self.kernel, self.stride
        )


class MaxUnpool2d(Layer):
    """Scatters values to the argmax positions saved by its paired pool."""

    def __init__(self, paired_pool: MaxPool2d):
        super().__init__()
        self.paired_pool = paired_pool

    def spec(self):
        return {"type": "MaxUnpool2d"}

    def forward(self, y, training=False):
        pool = self.paired_pool
        if pool.last_indices is None:
            raise ShapeMismatch("paired pool has not run; no indices to unpool")
        if y.shape != pool.last_indices.shape:
            raise ShapeMismatch(
                f"unpool input {y.shape} does not match pooled shape "
                f"{pool.last_indices.shape}"
            )
        return ops.max_unpool_batch(
            y, pool.last_indices, pool.last_input_shape, pool.kernel, pool.stride
        )

    def backward(self, dout):
        pool = self.paired_pool
        return ops.max_unpool_backward(dout, pool.last_indices, pool.kernel, pool.stride)


class Dense(Layer):
    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.in_dim, self.out_dim = in_dim, out_dim

    def param_shapes(self):
        return {"weight": (self.in_dim, self.out_dim), "bias": (self.out_dim,)}

    def spec(self):
        return {"type": "Dense", "in_dim": self.in_dim, "out_dim": self.out_dim}

    def forward(self, x, training=False):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeMismatch(f"dense expects (n, {self.in_dim}), got {x.shape}")
        self._x = x
        return x @ self.params["weight"] + self.params["bias"]

    def backward(self, dy):
        self.grads["weight"] += self._x.T @ dy
        self.grads["bias"] += dy.sum(axis=0)
        return dy @ self.params["weight"].T


class BatchNorm(Layer):
    """Per-channel normalization over the batch (and spatial dims for 4-D).

    Training normalizes with batch statistics and updates running stats;
    inference normalizes with the running statistics. Channels are the last
    axis. Variance is the biased (ddof=0) estimator throughout.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def param_shapes(self):
        return {"scale": (self.channels,), "shift": (self.channels,)}

    def spec(self):
        return {"type": "BatchNorm", "channels": self.channels,
                "momentum": self.momentum, "eps": self.eps}

    def forward(self, x, training=False):
        if x.shape[-1] != self.channels:
            raise ShapeMismatch(f"batch norm over {self.channels} channels, got {x.shape}")
        axes = tuple(range(x.ndim - 1))
        if training:
            if x.shape[0] < 2:
                raise BatchTooSmall(f"batch of {x.shape[0]} is too small to normalize")
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mean
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * var
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        self._training = training
        self._axes = axes
        self._xhat, self._inv_std = xhat, inv_std
        self._n = int(np.prod([x.shape[a] for a in axes]))
        return xhat * self.params["scale"] + self.params["shift"]

    def backward(self, dy):
        axes = self._axes
        self.grads["scale"] += (dy * self._xhat).sum(axis=axes)
        self.grads["shift"] += dy.sum(axis=axes)
        dxhat = dy * self.params["scale"]
        if not self._training:
            return dxhat * self._inv_std
        n = self._n
        return (self._inv_std / n) * (
            n * dxhat
            - dxhat.sum(axis=axes)
            - self._xhat * (dxhat * self._xhat).sum(axis=axes)
        )


class Activation(Layer):
    KINDS = ("tanh", "relu", "sigmoid")

    def __init__(self, kind: str):
        super().__init__()
        if kind not in self.KINDS:
            raise ValueError(f"unknown activation {kind!r}")
        self.kind = kind

    def spec(self):
        return {"type": "Activation", "kind": self.kind}

    def forward(self, x, training=False):
        if self.kind == "tanh":
            self._y = np.tanh(x)
        elif self.kind == "sigmoid":
            self._y = 1.0 / (1.0 + np.exp(-x))
        else:
            self._y = np.maximum(x, 0.0)
        return self._y

    def backward(self, dy):
        y = self._y
        if self.kind == "tanh":
            return dy * (1.0 - y * y)
        if self.kind == "sigmoid":
            return dy * y * (1.0 - y)
        return dy * (y > 0.0)


class Unroll(Layer):
    """(n, h, w, c) -> (n, c*h*w), channel-major.

    All spatial cells of channel 0 in row-major order, then channel 1, and
    so on (left to right, top to bottom, front to back).
    """

    def spec(self):
        return {"type": "Unroll"}

    def forward(self, x, training=False):
        self._shape = x.shape
        n, h, w, c = x.shape
        return np.ascontiguousarray(x.transpose(0, 3, 1, 2)).reshape(n, c * h * w)

    def backward(self, dy):
        n, h, w, c = self._shape
        return dy.reshape(n, c, h, w).transpose(0, 2, 3, 1)


class Roll(Layer):
    """Inverse of Unroll for a fixed (h, w, c) target shape."""

    def __init__(self, h: int, w: int, c: int):
        super().__init__()
        self.h, self.w, self.c = h, w, c

    def spec(self):
        return {"type": "Roll", "h": self.h, "w": self.w, "c": self.c}

    def forward(self, x, training=False):
        n = x.shape[0]
        if x.shape[1] != self.h * self.w * self.c:
            raise ShapeMismatch(
                f"cannot roll {x.shape} into ({self.h}, {self.w}, {self.c})"
            )
        return x.reshape(n, self.c, self.h, self.w).transpose(0, 2, 3, 1)

    def backward(self, dy):
        n = dy.shape[0]
        return np.ascontiguousarray(dy.transpose(0, 3, 1, 2)).reshape(n, -1)
