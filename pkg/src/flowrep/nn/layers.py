"""Minimal layer zoo with reverse-mode gradients.

Conventions: convolutional tensors are (batch, channels, length), dense
tensors are (batch, features). Each layer caches what its backward pass
needs during a train-mode forward; backward() fills self.grads and
returns the gradient w.r.t. the layer input. All layers accept a dtype so
gradient checks can run in float64.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    pass


class MissingCacheError(RuntimeError):
    pass


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    """Base layer: parameter dicts plus forward/backward."""

    def __init__(self, name: str):
        self.name = name
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _need_cache(self):
        if self._cache is None:
            raise MissingCacheError(f"{self.name}: backward called without a train-mode forward")
        return self._cache

    def zero_grads(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}


class Conv1D(Layer):
    """Same-length 1-D convolution, stride 1."""

    def __init__(self, in_ch, out_ch, kernel=3, rng=None, dtype=np.float32, name="conv1d"):
        super().__init__(name)
        rng = rng or np.random.default_rng(0)
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.pad_left = (kernel - 1) // 2
        self.pad_right = kernel // 2
        self.params["weight"] = _kaiming_uniform(rng, (out_ch, in_ch, kernel), in_ch * kernel, dtype)
        self.params["bias"] = np.zeros(out_ch, dtype=dtype)

    def forward(self, x, train=False):
        if x.ndim != 3 or x.shape[1] != self.in_ch:
            raise ShapeError(f"{self.name} (Conv1D): expected (B,{self.in_ch},L), got {x.shape}")
        w = self.params["weight"]
        L = x.shape[2]
        xp = np.pad(x, ((0, 0), (0, 0), (self.pad_left, self.pad_right)))
        out = np.zeros((x.shape[0], self.out_ch, L), dtype=x.dtype)
        for k in range(self.kernel):
            out += np.einsum("oc,bcl->bol", w[:, :, k], xp[:, :, k : k + L], optimize=True)
        out += self.params["bias"][None, :, None]
        if train:
            self._cache = (xp, L)
        return out

    def backward(self, grad_out):
        xp, L = self._need_cache()
        w = self.params["weight"]
        dw = np.zeros_like(w)
        dxp = np.zeros_like(xp)
        for k in range(self.kernel):
            dw[:, :, k] = np.einsum("bol,bcl->oc", grad_out, xp[:, :, k : k + L], optimize=True)
            dxp[:, :, k : k + L] += np.einsum("oc,bol->bcl", w[:, :, k], grad_out, optimize=True)
        self.grads["weight"] = dw
        self.grads["bias"] = grad_out.sum(axis=(0, 2))
        return dxp[:, :, self.pad_left : self.pad_left + L]


class ConvTranspose1D(Layer):
    """Adjoint of Conv1D: same-length transposed convolution, stride 1."""

    def __init__(self, in_ch, out_ch, kernel=3, rng=None, dtype=np.float32, name="convT1d"):
        super().__init__(name)
        rng = rng or np.random.default_rng(0)
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.pad_left = (kernel - 1) // 2
        self.params["weight"] = _kaiming_uniform(rng, (in_ch, out_ch, kernel), in_ch * kernel, dtype)
        self.params["bias"] = np.zeros(out_ch, dtype=dtype)

    def forward(self, x, train=False):
        if x.ndim != 3 or x.shape[1] != self.in_ch:
            raise ShapeError(f"{self.name} (ConvTranspose1D): expected (B,{self.in_ch},L), got {x.shape}")
        w = self.params["weight"]
        B, _, L = x.shape
        full = np.zeros((B, self.out_ch, L + self.kernel - 1), dtype=x.dtype)
        for k in range(self.kernel):
            full[:, :, k : k + L] += np.einsum("io,bil->bol", w[:, :, k], x, optimize=True)
        out = full[:, :, self.pad_left : self.pad_left + L] + self.params["bias"][None, :, None]
        if train:
            self._cache = (x, L)
        return out

    def backward(self, grad_out):
        x, L = self._need_cache()
        w = self.params["weight"]
        gfull = np.zeros((x.shape[0], self.out_ch, L + self.kernel - 1), dtype=grad_out.dtype)
        gfull[:, :, self.pad_left : self.pad_left + L] = grad_out
        dw = np.zeros_like(w)
        dx = np.zeros_like(x)
        for k in range(self.kernel):
            dw[:, :, k] = np.einsum("bil,bol->io", x, gfull[:, :, k : k + L], optimize=True)
            dx += np.einsum("io,bol->bil", w[:, :, k], gfull[:, :, k : k + L], optimize=True)
        self.grads["weight"] = dw
        self.grads["bias"] = grad_out.sum(axis=(0, 2))
        return dx


class BatchNorm(Layer):
    """Batch normalization over (B,F) or (B,C,L) inputs.

    Train mode uses batch statistics and updates the running estimates;
    inference uses the running estimates only.
    """

    def __init__(self, num_features, eps=1e-5, momentum=0.9, dtype=np.float32, name="batchnorm"):
        super().__init__(name)
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.params["gamma"] = np.ones(num_features, dtype=dtype)
        self.params["beta"] = np.zeros(num_features, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(num_features, dtype=dtype)
        self.buffers["running_var"] = np.ones(num_features, dtype=dtype)

    def _axes_and_shape(self, x):
        if x.ndim == 2:
            if x.shape[1] != self.num_features:
                raise ShapeError(f"{self.name} (BatchNorm): expected (B,{self.num_features}), got {x.shape}")
            return (0,), (1, self.num_features)
        if x.ndim == 3:
            if x.shape[1] != self.num_features:
                raise ShapeError(f"{self.name} (BatchNorm): expected (B,{self.num_features},L), got {x.shape}")
            return (0, 2), (1, self.num_features, 1)
        raise ShapeError(f"{self.name} (BatchNorm): rank {x.ndim} input unsupported")

    def forward(self, x, train=False):
        axes, pshape = self._axes_and_shape(x)
        gamma = self.params["gamma"].reshape(pshape)
        beta = self.params["beta"].reshape(pshape)
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            self.buffers["running_mean"] = (m * self.buffers["running_mean"] + (1 - m) * mean).astype(x.dtype)
            self.buffers["running_var"] = (m * self.buffers["running_var"] + (1 - m) * var).astype(x.dtype)
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var.reshape(pshape) + self.eps)
        xhat = (x - mean.reshape(pshape)) * inv_std
        if train:
            n = x.size // self.num_features
            self._cache = (xhat, inv_std, axes, pshape, n)
        return gamma * xhat + beta

    def backward(self, grad_out):
        xhat, inv_std, axes, pshape, n = self._need_cache()
        gamma = self.params["gamma"].reshape(pshape)
        self.grads["gamma"] = (grad_out * xhat).sum(axis=axes)
        self.grads["beta"] = grad_out.sum(axis=axes)
        dxhat = grad_out * gamma
        sum_dxhat = dxhat.sum(axis=axes, keepdims=True)
        sum_dxhat_xhat = (dxhat * xhat).sum(axis=axes, keepdims=True)
        return (inv_std / n) * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)

    @property
    def last_normalized(self):
        """Pre-affine normalized activations from the last train forward."""
        return self._need_cache()[0]


class LeakyReLU(Layer):
    def __init__(self, slope=0.01, name="leaky_relu"):
        super().__init__(name)
        self.slope = slope

    def forward(self, x, train=False):
        out = np.where(x > 0, x, self.slope * x)
        if train:
            self._cache = x > 0
        return out

    def backward(self, grad_out):
        positive = self._need_cache()
        return np.where(positive, grad_out, self.slope * grad_out)


class ReLU(Layer):
    def __init__(self, name="relu"):
        super().__init__(name)

    def forward(self, x, train=False):
        if train:
            self._cache = x > 0
        return np.maximum(x, 0)

    def backward(self, grad_out):
        return grad_out * self._need_cache()


class Dense(Layer):
    def __init__(self, in_features, out_features, rng=None, dtype=np.float32, name="dense"):
        super().__init__(name)
        rng = rng or np.random.default_rng(0)
        self.in_features, self.out_features = in_features, out_features
        self.params["weight"] = _kaiming_uniform(rng, (in_features, out_features), in_features, dtype)
        self.params["bias"] = np.zeros(out_features, dtype=dtype)

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"{self.name} (Dense): expected (B,{self.in_features}), got {x.shape}")
        if train:
            self._cache = x
        return x @ self.params["weight"] + self.params["bias"]

    def backward(self, grad_out):
        x = self._need_cache()
        self.grads["weight"] = x.T @ grad_out
        self.grads["bias"] = grad_out.sum(axis=0)
        return grad_out @ self.params["weight"].T


class Dropout(Layer):
    """Inverted dropout; masks are drawn from the model's seeded generator."""

    def __init__(self, rate, rng, name="dropout"):
        super().__init__(name)
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0,1), got {rate}")
        self.rate = rate
        self.rng = rng

    def forward(self, x, train=False):
        if not train or self.rate == 0.0:
            self._cache = None if not train else np.ones_like(x)
            return x
        mask = (self.rng.random(x.shape) >= self.rate).astype(x.dtype) / (1.0 - self.rate)
        self._cache = mask
        return x * mask

    def backward(self, grad_out):
        mask = self._need_cache()
        return grad_out * mask


class Embedding(Layer):
    """Category index -> learned dense vector."""

    def __init__(self, cardinality, dim=None, rng=None, dtype=np.float32, name="embedding"):
        super().__init__(name)
        rng = rng or np.random.default_rng(0)
        self.cardinality = cardinality
        self.dim = dim if dim is not None else auto_embedding_dim(cardinality)
        self.params["weight"] = (0.05 * rng.standard_normal((cardinality, self.dim))).astype(dtype)

    def forward(self, idx, train=False):
        idx = np.asarray(idx)
        if idx.ndim != 1:
            raise ShapeError(f"{self.name} (Embedding): expected (B,) indices, got {idx.shape}")
        if idx.min(initial=0) < 0 or idx.max(initial=0) >= self.cardinality:
            raise IndexError(f"{self.name} (Embedding): index outside [0,{self.cardinality})")
        if train:
            self._cache = idx
        return self.params["weight"][idx]

    def backward(self, grad_out):
        idx = self._need_cache()
        dw = np.zeros_like(self.params["weight"])
        np.add.at(dw, idx, grad_out)
        self.grads["weight"] = dw
        return None  # integer inputs carry no gradient


def auto_embedding_dim(cardinality: int) -> int:
    """Fourth-root-of-cardinality sizing heuristic."""
    return int(round(cardinality ** 0.25))


class Softmax(Layer):
    def __init__(self, name="softmax"):
        super().__init__(name)

    def forward(self, x, train=False):
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        out = e / e.sum(axis=-1, keepdims=True)
        if train:
            self._cache = out
        return out

    def backward(self, grad_out):
        y = self._need_cache()
        dot = (grad_out * y).sum(axis=-1, keepdims=True)
        return y * (grad_out - dot)


class Flatten(Layer):
    def __init__(self, name="flatten"):
        super().__init__(name)

    def forward(self, x, train=False):
        if train:
            self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out):
        return grad_out.reshape(self._need_cache())


class Reshape(Layer):
    def __init__(self, channels, length, name="reshape"):
        super().__init__(name)
        self.channels, self.length = channels, length

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.channels * self.length:
            raise ShapeError(f"{self.name} (Reshape): expected (B,{self.channels * self.length}), got {x.shape}")
        return x.reshape(x.shape[0], self.channels, self.length)

    def backward(self, grad_out):
        return grad_out.reshape(grad_out.shape[0], -1)


class Sequential:
    """Ordered layer stack with namespaced parameter access."""

    def __init__(self, layers: list[Layer], name: str = "seq"):
        self.name = name
        self.layers = layers

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train=train)
        return x

    def backward(self, grad_out):
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out

    def named_params(self):
        for i, layer in enumerate(self.layers):
            for key, val in layer.params.items():
                yield f"{self.name}.{i}.{layer.name}.{key}", layer, key, val

    def named_buffers(self):
        for i, layer in enumerate(self.layers):
            for key, val in layer.buffers.items():
                yield f"{self.name}.{i}.{layer.name}.{key}", layer, key, val
