"""Differentiable layer primitives with exact backward passes.

Data layout is ``(batch, feature_maps, *spatial)`` for the convolutional
trunk and ``(batch, features)`` after flattening.  Each layer caches what
its most recent forward pass needs and ``backward`` consumes that cache,
returning the gradient with respect to the layer input; parameter
gradients are kept on the layer and collected through ``grads``.

Convolution is cross-correlation with zero "same" padding: output spatial
shape equals input spatial shape for every kernel extent, and kernels of
even extent are anchored with the extra tap toward larger index.  Max
pooling is non-overlapping with first-occurrence tie-breaking.  All of it
is deterministic given the inputs and the dropout stream.
"""

from __future__ import annotations

import numpy as np

from .tensor import DEFAULT_DTYPE, RngStream, Tensor, glorot_uniform

TRAIN = "train"
INFER = "infer"

MAX_KERNEL_EXTENT = 5


def _as_tuple(value) -> tuple[int, ...]:
    return tuple(int(v) for v in np.atleast_1d(value))


class Layer:
    """Base class: a named primitive with parameters and a forward cache."""

    #: parameter keys subject to L1/L2 weight decay
    regularized: tuple[str, ...] = ()

    def __init__(self, name: str):
        self.name = name

    def forward(self, x: Tensor, mode: str = TRAIN, rng: RngStream | None = None) -> Tensor:
        raise NotImplementedError

    def backward(self, upstream: Tensor) -> Tensor:
        raise NotImplementedError

    def params(self) -> dict[str, Tensor]:
        return {}

    def grads(self) -> dict[str, Tensor]:
        return {}

    def state(self) -> dict[str, Tensor]:
        """Every persistent array, learnable or not."""
        return dict(self.params())

    def set_state(self, arrays: dict[str, Tensor]) -> None:
        state = self.state()
        for key, value in arrays.items():
            if key not in state:
                raise KeyError(f"{self.name}: unknown state key {key!r}")
            if state[key].shape != value.shape:
                raise ValueError(
                    f"{self.name}.{key}: shape {value.shape} does not match {state[key].shape}"
                )
            state[key][...] = value

    def _check_upstream(self, upstream: Tensor, expected_shape) -> None:
        if expected_shape is None:
            raise RuntimeError(f"{self.name}: backward called without a recorded forward")
        if tuple(upstream.shape) != tuple(expected_shape):
            raise ValueError(
                f"{self.name}: upstream shape {upstream.shape} does not match "
                f"forward output {tuple(expected_shape)}"
            )


class Conv(Layer):
    """N-dimensional "same" convolution over (batch, maps, *spatial) input.

    out[b, f, x] = bias[f] + sum_g sum_d kernel[f, g, d] * input[b, g, x + d - offset]
    with zero padding; offset = (extent - 1) // 2 per axis.
    """

    regularized = ("kernel",)

    def __init__(self, maps_in: int, maps_out: int, extents, rng: RngStream,
                 name: str = "conv", dtype=DEFAULT_DTYPE):
        super().__init__(name)
        extents = _as_tuple(extents)
        if any(e < 1 or e > MAX_KERNEL_EXTENT for e in extents):
            raise ValueError(f"kernel extents must be in 1..{MAX_KERNEL_EXTENT}, got {extents}")
        self.maps_in = int(maps_in)
        self.maps_out = int(maps_out)
        self.extents = extents
        taps = int(np.prod(extents))
        self.kernel = glorot_uniform((maps_out, maps_in) + extents,
                                     maps_in * taps, maps_out * taps, rng, dtype)
        self.bias = np.zeros(maps_out, dtype=dtype)
        self._pads = tuple(((e - 1) // 2, e // 2) for e in extents)
        self._padded: Tensor | None = None
        self._out_shape = None
        self.g_kernel = np.zeros_like(self.kernel)
        self.g_bias = np.zeros_like(self.bias)

    def params(self) -> dict[str, Tensor]:
        return {"kernel": self.kernel, "bias": self.bias}

    def grads(self) -> dict[str, Tensor]:
        return {"kernel": self.g_kernel, "bias": self.g_bias}

    def forward(self, x: Tensor, mode: str = TRAIN, rng: RngStream | None = None) -> Tensor:
        rank = len(self.extents)
        if x.ndim != 2 + rank:
            raise ValueError(f"{self.name}: expected rank-{2 + rank} input, got shape {x.shape}")
        if x.shape[1] != self.maps_in:
            raise ValueError(f"{self.name}: expected {self.maps_in} input maps, got {x.shape[1]}")
        spatial = x.shape[2:]
        padded = np.pad(x, ((0, 0), (0, 0)) + self._pads)
        # Accumulate in (batch, *spatial, maps_out) so each tap is one BLAS call.
        acc = np.zeros(x.shape[:1] + spatial + (self.maps_out,), dtype=x.dtype)
        for offs in np.ndindex(*self.extents):
            window = tuple(slice(o, o + s) for o, s in zip(offs, spatial))
            tap = self.kernel[(slice(None), slice(None)) + offs]
            acc += np.tensordot(padded[(slice(None), slice(None)) + window], tap,
                                axes=([1], [1]))
        acc += self.bias
        out = np.ascontiguousarray(np.moveaxis(acc, -1, 1))
        self._padded = padded
        self._out_shape = out.shape
        return out

    def backward(self, upstream: Tensor) -> Tensor:
        self._check_upstream(upstream, self._out_shape)
        padded = self._padded
        spatial = self._out_shape[2:]
        up = np.moveaxis(upstream, 1, -1)  # (batch, *spatial, maps_out)
        sum_axes = tuple(range(up.ndim - 1))
        self.g_bias = np.ascontiguousarray(up.sum(axis=sum_axes))
        d_padded = np.zeros_like(padded)
        up_axes = (0,) + tuple(range(1, 1 + len(spatial)))
        in_axes = (0,) + tuple(range(2, 2 + len(spatial)))
        for offs in np.ndindex(*self.extents):
            window = tuple(slice(o, o + s) for o, s in zip(offs, spatial))
            x_slice = padded[(slice(None), slice(None)) + window]
            self.g_kernel[(slice(None), slice(None)) + offs] = np.tensordot(
                up, x_slice, axes=(up_axes, in_axes))
            tap = self.kernel[(slice(None), slice(None)) + offs]
            contrib = np.tensordot(up, tap, axes=([up.ndim - 1], [0]))
            d_padded[(slice(None), slice(None)) + window] += np.moveaxis(contrib, -1, 1)
        crop = (slice(None), slice(None)) + tuple(
            slice(lo, d_padded.shape[2 + i] - hi) for i, (lo, hi) in enumerate(self._pads))
        return np.ascontiguousarray(d_padded[crop])


class MaxPool(Layer):
    """Non-overlapping max pooling; ties go to the lowest window index."""

    def __init__(self, window, name: str = "pool"):
        super().__init__(name)
        self.window = _as_tuple(window)
        if any(w < 1 for w in self.window):
            raise ValueError(f"pool window extents must be positive, got {self.window}")
        self._argmax = None
        self._in_shape = None
        self._out_shape = None

    def forward(self, x: Tensor, mode: str = TRAIN, rng: RngStream | None = None) -> Tensor:
        rank = len(self.window)
        if x.ndim != 2 + rank:
            raise ValueError(f"{self.name}: expected rank-{2 + rank} input, got shape {x.shape}")
        spatial = x.shape[2:]
        for s, w in zip(spatial, self.window):
            if s % w != 0:
                raise ValueError(f"{self.name}: spatial extent {s} not divisible by window {w}")
        outs = tuple(s // w for s, w in zip(spatial, self.window))
        inter: list[int] = []
        for o, w in zip(outs, self.window):
            inter += [o, w]
        perm = (0, 1) + tuple(2 + 2 * i for i in range(rank)) + tuple(3 + 2 * i for i in range(rank))
        tiles = x.reshape(x.shape[:2] + tuple(inter)).transpose(perm)
        tiles = tiles.reshape(x.shape[:2] + outs + (-1,))
        self._argmax = tiles.argmax(axis=-1)
        out = np.take_along_axis(tiles, self._argmax[..., None], axis=-1)[..., 0]
        self._in_shape = x.shape
        self._out_shape = out.shape
        self._perm = perm
        return out

    def backward(self, upstream: Tensor) -> Tensor:
        self._check_upstream(upstream, self._out_shape)
        outs = self._out_shape[2:]
        flat = np.zeros(self._out_shape + (int(np.prod(self.window)),), dtype=upstream.dtype)
        np.put_along_axis(flat, self._argmax[..., None], upstream[..., None], axis=-1)
        tiles = flat.reshape(self._out_shape + self.window)
        return tiles.transpose(np.argsort(self._perm)).reshape(self._in_shape)


class BatchNorm(Layer):
    """Per-feature-map batch normalization with running statistics.

    Train mode normalizes with batch statistics (batch size >= 2) and
    updates running stats as running <- (1 - momentum)*running + momentum*batch.
    Inference normalizes with running statistics only, so batch-size-1
    inference is valid.
    """

    def __init__(self, maps: int, momentum: float = 0.1, epsilon: float = 1e-5,
                 name: str = "bn", dtype=DEFAULT_DTYPE):
        super().__init__(name)
        self.maps = int(maps)
        self.momentum = float(momentum)
        self.epsilon = float(epsilon)
        self.gamma = np.ones(maps, dtype=dtype)
        self.beta = np.zeros(maps, dtype=dtype)
        self.running_mean = np.zeros(maps, dtype=dtype)
        self.running_var = np.ones(maps, dtype=dtype)
        self.g_gamma = np.zeros_like(self.gamma)
        self.g_beta = np.zeros_like(self.beta)
        self._cache = None

    def params(self) -> dict[str, Tensor]:
        return {"gamma": self.gamma, "beta": self.beta}

    def grads(self) -> dict[str, Tensor]:
        return {"gamma": self.g_gamma, "beta": self.g_beta}

    def state(self) -> dict[str, Tensor]:
        return {"gamma": self.gamma, "beta": self.beta,
                "running_mean": self.running_mean, "running_var": self.running_var}

    def _broadcast(self, v: Tensor, ndim: int) -> Tensor:
        return v.reshape((1, self.maps) + (1,) * (ndim - 2))

    def forward(self, x: Tensor, mode: str = TRAIN, rng: RngStream | None = None) -> Tensor:
        if x.ndim < 2 or x.shape[1] != self.maps:
            raise ValueError(f"{self.name}: expected {self.maps} feature maps, got shape {x.shape}")
        axes = (0,) + tuple(range(2, x.ndim))
        if mode == TRAIN:
            if x.shape[0] < 2:
                raise ValueError(f"{self.name}: train mode needs batch size >= 2")
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            self.running_mean[...] = (1.0 - self.momentum) * self.running_mean + self.momentum * mean
            self.running_var[...] = (1.0 - self.momentum) * self.running_var + self.momentum * var
        else:
            mean = self.running_mean
            var = self.running_var
        inv_std = 1.0 / np.sqrt(var + np.asarray(self.epsilon, dtype=x.dtype))
        xhat = (x - self._broadcast(mean.astype(x.dtype), x.ndim)) * \
            self._broadcast(inv_std.astype(x.dtype), x.ndim)
        out = self._broadcast(self.gamma, x.ndim) * xhat + self._broadcast(self.beta, x.ndim)
        if mode == TRAIN:
            count = x.size // self.maps
            self._cache = (xhat, inv_std.astype(x.dtype), count)
        else:
            self._cache = None
        return out

    def backward(self, upstream: Tensor) -> Tensor:
        if self._cache is None:
            raise RuntimeError(f"{self.name}: backward requires a recorded train-mode forward")
        xhat, inv_std, count = self._cache
        self._check_upstream(upstream, xhat.shape)
        axes = (0,) + tuple(range(2, xhat.ndim))
        self.g_gamma = (upstream * xhat).sum(axis=axes)
        self.g_beta = upstream.sum(axis=axes)
        d_xhat = upstream * self._broadcast(self.gamma, xhat.ndim)
        sum_d = d_xhat.sum(axis=axes, keepdims=True)
        sum_dx = (d_xhat * xhat).sum(axis=axes, keepdims=True)
        return self._broadcast(inv_std, xhat.ndim) / count * (
            count * d_xhat - sum_d - xhat * sum_dx)


class Dropout(Layer):
    """Inverted dropout: zero with probability ``rate`` and rescale survivors."""

    def __init__(self, rate: float, name: str = "dropout"):
        super().__init__(name)
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = float(rate)
        self._mask = None
        self._out_shape = None

    def forward(self, x: Tensor, mode: str = TRAIN, rng: RngStream | None = None) -> Tensor:
        self._out_shape = x.shape
        if mode != TRAIN or self.rate == 0.0:
            self._mask = None
            return x
        if rng is None:
            raise ValueError(f"{self.name}: train mode needs an RNG stream")
        self._mask = rng.uniform(size=x.shape) >= self.rate
        scale = x.dtype.type(1.0 / (1.0 - self.rate))
        return np.where(self._mask, x, x.dtype.type(0)) * scale

    def backward(self, upstream: Tensor) -> Tensor:
        self._check_upstream(upstream, self._out_shape)
        if self._mask is None:
            return upstream
        scale = upstream.dtype.type(1.0 / (1.0 - self.rate))
        return np.where(self._mask, upstream, upstream.dtype.type(0)) * scale


class Flatten(Layer):
    """Collapse (batch, maps, *spatial) to (batch, features); pure reshape."""

    def __init__(self, name: str = "flatten"):
        super().__init__(name)
        self._in_shape = None

    def forward(self, x: Tensor, mode: str = TRAIN, rng: RngStream | None = None) -> Tensor:
        self._in_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, upstream: Tensor) -> Tensor:
        if self._in_shape is None:
            raise RuntimeError(f"{self.name}: backward called without a recorded forward")
        return upstream.reshape(self._in_shape)


class Dense(Layer):
    """Fully connected layer: out = x W^T + b with W of shape (n_out, n_in)."""

    regularized = ("weights",)

    def __init__(self, n_in: int, n_out: int, rng: RngStream,
                 name: str = "dense", dtype=DEFAULT_DTYPE):
        super().__init__(name)
        self.n_in = int(n_in)
        self.n_out = int(n_out)
        self.weights = glorot_uniform((n_out, n_in), n_in, n_out, rng, dtype)
        self.bias = np.zeros(n_out, dtype=dtype)
        self.g_weights = np.zeros_like(self.weights)
        self.g_bias = np.zeros_like(self.bias)
        self._input = None

    def params(self) -> dict[str, Tensor]:
        return {"weights": self.weights, "bias": self.bias}

    def grads(self) -> dict[str, Tensor]:
        return {"weights": self.g_weights, "bias": self.g_bias}

    def forward(self, x: Tensor, mode: str = TRAIN, rng: RngStream | None = None) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ValueError(f"{self.name}: expected (batch, {self.n_in}) input, got {x.shape}")
        self._input = x
        return x @ self.weights.T + self.bias

    def backward(self, upstream: Tensor) -> Tensor:
        if self._input is None:
            raise RuntimeError(f"{self.name}: backward called without a recorded forward")
        self._check_upstream(upstream, (self._input.shape[0], self.n_out))
        self.g_weights = upstream.T @ self._input
        self.g_bias = upstream.sum(axis=0)
        return upstream @ self.weights


class ReLU(Layer):
    def __init__(self, name: str = "relu"):
        super().__init__(name)
        self._mask = None
        self._out_shape = None

    def forward(self, x: Tensor, mode: str = TRAIN, rng: RngStream | None = None) -> Tensor:
        self._mask = x > 0
        self._out_shape = x.shape
        return np.maximum(x, x.dtype.type(0))

    def backward(self, upstream: Tensor) -> Tensor:
        self._check_upstream(upstream, self._out_shape)
        return np.where(self._mask, upstream, upstream.dtype.type(0))


class Sigmoid(Layer):
    def __init__(self, name: str = "sigmoid"):
        super().__init__(name)
        self._out = None

    def forward(self, x: Tensor, mode: str = TRAIN, rng: RngStream | None = None) -> Tensor:
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        self._out = out
        return out

    def backward(self, upstream: Tensor) -> Tensor:
        if self._out is None:
            raise RuntimeError(f"{self.name}: backward called without a recorded forward")
        self._check_upstream(upstream, self._out.shape)
        return upstream * self._out * (1.0 - self._out)


class Network:
    """Ordered layer stack with flat, name-prefixed parameter access.

    When ``input_grid`` is given, ``forward`` accepts (batch, *input_grid)
    arrays and inserts the single leading feature map the convolutional
    trunk expects.
    """

    def __init__(self, layers: list[Layer], input_grid: tuple[int, ...] | None = None,
                 dtype=DEFAULT_DTYPE):
        names = [layer.name for layer in layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")
        self.layers = list(layers)
        self.input_grid = tuple(input_grid) if input_grid is not None else None
        self.dtype = dtype

    def forward(self, x: Tensor, mode: str = TRAIN, rng: RngStream | None = None) -> Tensor:
        x = np.asarray(x, dtype=self.dtype)
        if self.input_grid is not None:
            if tuple(x.shape[1:]) != self.input_grid:
                raise ValueError(
                    f"expected input shape (batch, {', '.join(map(str, self.input_grid))}), "
                    f"got {x.shape}")
            x = x.reshape((x.shape[0], 1) + self.input_grid)
        for layer in self.layers:
            x = layer.forward(x, mode, rng)
        return x

    def backward(self, upstream: Tensor) -> Tensor:
        up = np.asarray(upstream, dtype=self.dtype)
        for layer in reversed(self.layers):
            up = layer.backward(up)
        if self.input_grid is not None:
            up = up.reshape((up.shape[0],) + self.input_grid)
        return up

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for layer in self.layers:
            for key, value in layer.params().items():
                out[f"{layer.name}.{key}"] = value
        return out

    def grads(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for layer in self.layers:
            for key, value in layer.grads().items():
                out[f"{layer.name}.{key}"] = value
        return out

    def state(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for layer in self.layers:
            for key, value in layer.state().items():
                out[f"{layer.name}.{key}"] = value
        return out

    def load_state(self, arrays: dict[str, Tensor]) -> None:
        expected = self.state()
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        if missing or extra:
            raise ValueError(f"state mismatch: missing {missing}, unexpected {extra}")
        for layer in self.layers:
            prefix = layer.name + "."
            layer.set_state({k[len(prefix):]: v for k, v in arrays.items()
                             if k.startswith(prefix)})

    def regularized_names(self) -> list[str]:
        return [f"{layer.name}.{key}" for layer in self.layers for key in layer.regularized]
