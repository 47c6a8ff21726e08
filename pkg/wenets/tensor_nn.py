"""Numeric kernels with analytic gradients, Kaiming init, Adam and gradient checking.

Conv inputs are batch-major ``[N, C, L]``; dense inputs are ``[N, F]``.
Every ``*_forward`` returns ``(output, cache)`` and the matching
``*_backward`` takes ``(upstream, cache)`` and returns
``(input_gradient, parameter_gradients)``.
"""
from __future__ import annotations

import contextlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, ClassVar, Iterator, Literal, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from wenets.errors import NumericalError, ShapeError

Mode = Literal["train", "eval"]

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8
BN_MOMENTUM = 0.1
BN_EPSILON = 1e-5
PRELU_INIT_SLOPE = 0.25
FD_STEP = 1e-5
FD_REFINEMENTS = (1.0, 0.1, 0.01)

logger = logging.getLogger(__name__)


@dataclass
class ExecutionOptions:
    deterministic: bool = True
    workers: int = 1
    check_finite: bool = False


_options = ExecutionOptions()


@contextlib.contextmanager
def execution(**changes: Any) -> Iterator[ExecutionOptions]:
    """Temporarily change kernel execution options."""
    saved = {name: getattr(_options, name) for name in changes}
    for name, value in changes.items():
        setattr(_options, name, value)
    try:
        yield _options
    finally:
        for name, value in saved.items():
            setattr(_options, name, value)


def configure_execution(deterministic: bool = True, workers: int = 1, check_finite: bool = False) -> None:
    _options.deterministic = deterministic
    _options.workers = max(1, workers)
    _options.check_finite = check_finite


def ensure_finite(values: np.ndarray, what: str) -> None:
    if _options.check_finite and not np.all(np.isfinite(values)):
        raise NumericalError(f"non-finite values in {what}")


def _parallel() -> bool:
    return not _options.deterministic and _options.workers > 1


# ---------------------------------------------------------------- layers


class Layer:
    """A stage with a forward map, its analytic backward, and optional parameters."""

    kind: ClassVar[str] = "layer"

    def parameters(self) -> dict[str, np.ndarray]:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x: np.ndarray, mode: Mode = "eval", rng: np.random.Generator | None = None):
        raise NotImplementedError

    def backward(self, dout: np.ndarray, cache: Any) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        raise NotImplementedError

    def param_count(self) -> int:
        return sum(int(value.size) for value in self.parameters().values())


@dataclass(eq=False)
class ConvLayer(Layer):
    """Same-padded stride-1 1-D convolution, weights ``[f_n, C_in, f_l]``."""

    kind: ClassVar[str] = "conv"
    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1

    def __post_init__(self) -> None:
        if self.stride != 1:
            raise ShapeError(f"only stride 1 is supported, got {self.stride}")
        if self.weights.ndim != 3 or self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(f"inconsistent conv shapes {self.weights.shape} / {self.bias.shape}")

    @classmethod
    def initialized(cls, c_in: int, f_n: int, f_l: int, rng: np.random.Generator, dtype=np.float32) -> ConvLayer:
        weights = kaiming_init((f_n, c_in, f_l), f_n * f_l, rng, dtype)
        return cls(weights, np.zeros(f_n, dtype=dtype))

    @property
    def f_n(self) -> int:
        return self.weights.shape[0]

    @property
    def c_in(self) -> int:
        return self.weights.shape[1]

    @property
    def f_l(self) -> int:
        return self.weights.shape[2]

    @property
    def padding(self) -> int:
        return self.f_l // 2

    def parameters(self) -> dict[str, np.ndarray]:
        return {"weights": self.weights, "bias": self.bias}

    def forward(self, x, mode="eval", rng=None):
        return conv1d_forward(x, self)

    def backward(self, dout, cache):
        return conv1d_backward(dout, cache)

    def __repr__(self) -> str:
        return f"C-{self.f_n}-{self.f_l}"


@dataclass(eq=False)
class BatchNormLayer(Layer):
    kind: ClassVar[str] = "batchnorm"
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    epsilon: float = BN_EPSILON

    @classmethod
    def initialized(cls, channels: int, dtype=np.float32) -> BatchNormLayer:
        return cls(
            np.ones(channels, dtype=dtype),
            np.zeros(channels, dtype=dtype),
            np.zeros(channels, dtype=dtype),
            np.ones(channels, dtype=dtype),
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def parameters(self) -> dict[str, np.ndarray]:
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x, mode="eval", rng=None):
        return batchnorm_forward(x, self, mode)

    def backward(self, dout, cache):
        return batchnorm_backward(dout, cache)

    def __repr__(self) -> str:
        return "B"


@dataclass(eq=False)
class PReLULayer(Layer):
    kind: ClassVar[str] = "prelu"
    slopes: np.ndarray

    @classmethod
    def initialized(cls, channels: int, dtype=np.float32) -> PReLULayer:
        return cls(np.full(channels, PRELU_INIT_SLOPE, dtype=dtype))

    def parameters(self) -> dict[str, np.ndarray]:
        return {"slopes": self.slopes}

    def forward(self, x, mode="eval", rng=None):
        return prelu_forward(x, self)

    def backward(self, dout, cache):
        return prelu_backward(dout, cache)

    def __repr__(self) -> str:
        return f"P-{self.slopes.shape[0]}"


@dataclass(eq=False)
class AvgPool(Layer):
    kind: ClassVar[str] = "avgpool"
    k: int

    def forward(self, x, mode="eval", rng=None):
        return avgpool1d(x, self.k), (self.k,)

    def backward(self, dout, cache):
        (k,) = cache
        return avgpool1d_backward(dout, k), {}

    def __repr__(self) -> str:
        return f"A-{self.k}"


@dataclass(eq=False)
class MaxPool(Layer):
    kind: ClassVar[str] = "maxpool"
    k: int

    def forward(self, x, mode="eval", rng=None):
        out, argmax = maxpool1d(x, self.k)
        return out, (argmax, x.shape)

    def backward(self, dout, cache):
        argmax, shape = cache
        return maxpool1d_backward(dout, argmax, shape), {}

    def __repr__(self) -> str:
        return f"M-{self.k}"


@dataclass(eq=False)
class DenseLayer(Layer):
    kind: ClassVar[str] = "dense"
    weights: np.ndarray
    bias: np.ndarray

    @classmethod
    def initialized(cls, d_i: int, d_o: int, rng: np.random.Generator, dtype=np.float32) -> DenseLayer:
        return cls(kaiming_init((d_o, d_i), d_o, rng, dtype), np.zeros(d_o, dtype=dtype))

    @property
    def d_i(self) -> int:
        return self.weights.shape[1]

    @property
    def d_o(self) -> int:
        return self.weights.shape[0]

    def parameters(self) -> dict[str, np.ndarray]:
        return {"weights": self.weights, "bias": self.bias}

    def forward(self, x, mode="eval", rng=None):
        return dense_forward(x, self.weights, self.bias), x

    def backward(self, dout, cache):
        return dense_backward(dout, cache, self.weights)

    def __repr__(self) -> str:
        return f"Dense {self.d_i} -> {self.d_o}"


@dataclass(eq=False)
class Dropout(Layer):
    kind: ClassVar[str] = "dropout"
    p: float = 0.5

    def forward(self, x, mode="eval", rng=None):
        return dropout_forward(x, self.p, mode, rng)

    def backward(self, dout, cache):
        return dropout_backward(dout, cache), {}

    def __repr__(self) -> str:
        return f"Dropout p={self.p}"


@dataclass(eq=False)
class Flatten(Layer):
    kind: ClassVar[str] = "flatten"

    def forward(self, x, mode="eval", rng=None):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dout, cache):
        return dout.reshape(cache), {}

    def __repr__(self) -> str:
        return "Flatten"


# ---------------------------------------------------------------- kernels


def _require_rank(x: np.ndarray, rank: int, what: str) -> None:
    if x.ndim != rank:
        raise ShapeError(f"{what} expects a rank-{rank} input, got shape {x.shape}")


def _conv_windows(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    left = layer.padding
    right = layer.f_l - 1 - left
    padded = np.pad(x, ((0, 0), (0, 0), (left, right)))
    return sliding_window_view(padded, layer.f_l, axis=2)


def _conv_block(windows: np.ndarray, weights: np.ndarray) -> np.ndarray:
    # [N, C, L, K] x [O, C, K] -> [N, L, O]
    return np.tensordot(windows, weights, axes=([1, 3], [1, 2]))


def conv1d_forward(x: np.ndarray, layer: ConvLayer) -> tuple[np.ndarray, tuple]:
    _require_rank(x, 3, "conv1d")
    if x.shape[1] != layer.c_in:
        raise ShapeError(f"conv1d channel mismatch: input has {x.shape[1]}, layer expects {layer.c_in}")
    if x.shape[2] < 1:
        raise ShapeError("conv1d input must hold at least one sample")

    windows = _conv_windows(x, layer)
    if _parallel() and x.shape[0] > 1:
        chunks = np.array_split(np.arange(x.shape[0]), min(_options.workers, x.shape[0]))
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            parts = list(pool.map(lambda idx: _conv_block(windows[idx], layer.weights), chunks))
        product = np.concatenate(parts, axis=0)
    else:
        product = _conv_block(windows, layer.weights)
    out = np.ascontiguousarray(product.transpose(0, 2, 1)) + layer.bias[None, :, None]
    return out, (x, layer)


def conv1d_backward(dout: np.ndarray, cache: tuple) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    x, layer = cache
    n, c_in, length = x.shape
    windows = _conv_windows(x, layer)
    grad_weights = np.tensordot(dout, windows, axes=([0, 2], [0, 2]))
    grad_bias = dout.sum(axis=(0, 2))

    grad_padded = np.zeros((n, c_in, length + layer.f_l - 1), dtype=dout.dtype)
    for k in range(layer.f_l):
        grad_padded[:, :, k : k + length] += np.matmul(layer.weights[:, :, k].T, dout)
    grad_x = grad_padded[:, :, layer.padding : layer.padding + length]
    return np.ascontiguousarray(grad_x), {"weights": grad_weights, "bias": grad_bias}


def _channel_axes(x: np.ndarray) -> tuple[tuple[int, ...], tuple[int, ...]]:
    if x.ndim == 3:
        return (0, 2), (1, -1, 1)
    if x.ndim == 2:
        return (0,), (1, -1)
    raise ShapeError(f"batchnorm expects [N, C, L] or [N, F], got shape {x.shape}")


def batchnorm_forward(x: np.ndarray, layer: BatchNormLayer, mode: Mode = "eval") -> tuple[np.ndarray, tuple]:
    axes, view = _channel_axes(x)
    if x.shape[1] != layer.channels:
        raise ShapeError(f"batchnorm channel mismatch: input has {x.shape[1]}, layer has {layer.channels}")
    gamma = layer.gamma.reshape(view)
    beta = layer.beta.reshape(view)

    if mode == "train":
        count = x.size // x.shape[1]
        if count < 2:
            raise ShapeError("train-mode batchnorm needs at least two values per channel")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        inv_std = 1.0 / np.sqrt(var + layer.epsilon)
        x_hat = (x - mean.reshape(view)) * inv_std.reshape(view)
        momentum = layer.momentum
        layer.running_mean[...] = (1.0 - momentum) * layer.running_mean + momentum * mean
        layer.running_var[...] = (1.0 - momentum) * layer.running_var + momentum * var * (count / (count - 1))
    elif mode == "eval":
        inv_std = 1.0 / np.sqrt(layer.running_var + layer.epsilon)
        x_hat = (x - layer.running_mean.reshape(view)) * inv_std.reshape(view)
    else:
        raise ValueError(f"unknown mode: {mode!r}")

    out = gamma * x_hat + beta
    return out.astype(x.dtype, copy=False), (x_hat, inv_std, layer, mode)


def batchnorm_backward(dout: np.ndarray, cache: tuple) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    x_hat, inv_std, layer, mode = cache
    axes, view = _channel_axes(dout)
    grad_gamma = (dout * x_hat).sum(axis=axes)
    grad_beta = dout.sum(axis=axes)
    grad_x_hat = dout * layer.gamma.reshape(view)

    if mode == "train":
        count = dout.size // dout.shape[1]
        grad_x = (inv_std.reshape(view) / count) * (
            count * grad_x_hat
            - grad_x_hat.sum(axis=axes).reshape(view)
            - x_hat * (grad_x_hat * x_hat).sum(axis=axes).reshape(view)
        )
    else:
        grad_x = grad_x_hat * inv_std.reshape(view)
    return grad_x.astype(dout.dtype, copy=False), {"gamma": grad_gamma, "beta": grad_beta}


def prelu_forward(x: np.ndarray, layer: PReLULayer) -> tuple[np.ndarray, tuple]:
    if x.ndim not in (2, 3):
        raise ShapeError(f"prelu expects [N, C, L] or [N, F], got shape {x.shape}")
    if x.shape[1] != layer.slopes.shape[0]:
        raise ShapeError(f"prelu channel mismatch: input has {x.shape[1]}, layer has {layer.slopes.shape[0]}")
    _, view = _channel_axes(x)
    slopes = layer.slopes.reshape(view)
    return np.where(x >= 0, x, slopes * x), (x, layer)


def prelu_backward(dout: np.ndarray, cache: tuple) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    x, layer = cache
    axes, view = _channel_axes(x)
    negative = x < 0
    grad_x = np.where(negative, layer.slopes.reshape(view) * dout, dout)
    grad_slopes = np.where(negative, dout * x, 0.0).sum(axis=axes).astype(dout.dtype, copy=False)
    return grad_x, {"slopes": grad_slopes}


def _pool_view(x: np.ndarray, k: int, what: str) -> np.ndarray:
    _require_rank(x, 3, what)
    n, c, length = x.shape
    if k < 1 or length % k:
        raise ShapeError(f"{what}: length {length} is not divisible by window {k}")
    return x.reshape(n, c, length // k, k)


def avgpool1d(x: np.ndarray, k: int) -> np.ndarray:
    return _pool_view(x, k, "avgpool1d").mean(axis=3)


def avgpool1d_backward(dout: np.ndarray, k: int) -> np.ndarray:
    return np.repeat(dout / k, k, axis=2)


def maxpool1d(x: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Windowwise maximum and the absolute sample index of each winner (lowest on ties)."""
    windows = _pool_view(x, k, "maxpool1d")
    local = windows.argmax(axis=3)
    out = np.take_along_axis(windows, local[..., None], axis=3)[..., 0]
    argmax = local + (np.arange(windows.shape[2]) * k)[None, None, :]
    return out, argmax


def maxpool1d_backward(dout: np.ndarray, argmax: np.ndarray, input_shape: tuple[int, ...]) -> np.ndarray:
    grad_x = np.zeros(input_shape, dtype=dout.dtype)
    np.put_along_axis(grad_x, argmax, dout, axis=2)
    return grad_x


def dense_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    _require_rank(x, 2, "dense")
    if x.shape[1] != weights.shape[1] or bias.shape != (weights.shape[0],):
        raise ShapeError(
            f"dense shape mismatch: input {x.shape}, weights {weights.shape}, bias {bias.shape}"
        )
    return x @ weights.T + bias


def dense_backward(dout: np.ndarray, x: np.ndarray, weights: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    return dout @ weights, {"weights": dout.T @ x, "bias": dout.sum(axis=0)}


def dropout_forward(
    x: np.ndarray, p: float, mode: Mode = "eval", rng: np.random.Generator | None = None
) -> tuple[np.ndarray, np.ndarray | None]:
    """Inverted dropout: survivors are scaled by 1/(1-p) so eval mode is the identity."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if mode == "eval" or p == 0.0:
        return x, None
    if rng is None:
        raise ValueError("train-mode dropout needs a random generator")
    keep = (rng.random(x.shape) >= p).astype(x.dtype)
    scaled_mask = keep * x.dtype.type(1.0 / (1.0 - p))
    return x * scaled_mask, scaled_mask


def dropout_backward(dout: np.ndarray, scaled_mask: np.ndarray | None) -> np.ndarray:
    return dout if scaled_mask is None else dout * scaled_mask


def kaiming_init(shape: tuple[int, ...], fan_out: int, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Zero-mean normal samples with standard deviation sqrt(2 / fan_out)."""
    if fan_out < 1:
        raise ValueError(f"fan_out must be positive, got {fan_out}")
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_out)).astype(dtype)


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    epsilon: float = ADAM_EPSILON


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    l2: float = 0.0,
    decay: Callable[[str], bool] | None = None,
) -> AdamState:
    """One in-place Adam update with coupled L2 (``g + l2 * w``) and bias correction.

    ``decay`` selects which parameter names receive the L2 term; all of them
    when omitted.
    """
    if state.t < 0:
        raise ValueError(f"Adam step counter must be non-negative, got {state.t}")
    state.t += 1
    t = state.t
    first_correction = 1.0 - state.beta1**t
    second_correction = 1.0 - state.beta2**t

    for name, weight in params.items():
        grad = grads[name]
        if grad.shape != weight.shape:
            raise ShapeError(f"gradient shape {grad.shape} does not match parameter {name} {weight.shape}")
        ensure_finite(grad, f"gradient of {name}")
        if l2 and (decay is None or decay(name)):
            grad = grad + l2 * weight
        m = state.m.setdefault(name, np.zeros_like(weight))
        v = state.v.setdefault(name, np.zeros_like(weight))
        m[...] = state.beta1 * m + (1.0 - state.beta1) * grad
        v[...] = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        m_hat = m / first_correction
        v_hat = v / second_correction
        weight -= lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return state


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def rows(self) -> list[tuple[str, float, bool]]:
        return [(name, error, error < self.tolerance) for name, error in self.errors.items()]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, scale: float) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|, 1e-3 * scale)."""
    floor = max(1e-3 * scale, 1e-12)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def numerical_gradient(loss_fn: Callable[[], float], array: np.ndarray, flat_indices: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of `loss_fn` w.r.t. the chosen entries of `array` (perturbed in place)."""
    flat = array.reshape(-1)
    if not np.shares_memory(flat, array):
        raise ValueError("finite differences need a contiguous array to perturb in place")
    estimates = np.empty(len(flat_indices), dtype=np.float64)
    for position, index in enumerate(flat_indices):
        original = flat[index]
        flat[index] = original + h
        upper = loss_fn()
        flat[index] = original - h
        lower = loss_fn()
        flat[index] = original
        estimates[position] = (upper - lower) / (2.0 * h)
    return estimates


def grad_check(
    loss_fn: Callable[[], float],
    arrays: Mapping[str, np.ndarray],
    analytic: Mapping[str, np.ndarray],
    tolerance: float = 1e-4,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    h: float = FD_STEP,
) -> GradCheckReport:
    """Compare analytic gradients with central finite differences, per named group.

    With `max_entries`, each group is sampled at that many entries (always
    including its largest analytic component) instead of exhaustively. Each
    entry is differenced at steps h, h/10 and h/100 and scored by the closest
    estimate, so a PReLU kink or max-pool switch inside one step does not
    count as a mismatch. Errors are relative to max(|analytic|, |numeric|),
    floored at 1e-3 of the group scale, where the group scale is the larger of
    the group's largest gradient and 1e-2 of the largest over all groups.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    flats = {name: np.asarray(analytic[name], dtype=np.float64).reshape(-1) for name in arrays}
    global_scale = max((float(np.max(np.abs(grad))) for grad in flats.values() if grad.size), default=0.0)
    errors = {}
    for name, array in arrays.items():
        if array.dtype != np.float64:
            raise ValueError(f"gradient checks run in 64-bit mode; {name} is {array.dtype}")
        grad = flats[name]
        if max_entries is None or grad.size <= max_entries:
            indices = np.arange(grad.size)
        else:
            picked = rng.choice(grad.size, size=max_entries - 1, replace=False)
            indices = np.unique(np.append(picked, np.argmax(np.abs(grad))))
        scale = max(float(np.max(np.abs(grad))) if grad.size else 0.0, 1e-2 * global_scale)
        entry_errors = np.full(len(indices), np.inf)
        for step in FD_REFINEMENTS:
            numeric = numerical_gradient(loss_fn, array, indices, h * step)
            entry_errors = np.minimum(entry_errors, relative_error(grad[indices], numeric, scale))
        errors[name] = float(np.max(entry_errors, initial=0.0))
        logger.debug("Gradient check %s: max relative error %.3e over %d entries.", name, errors[name], len(indices))
    return GradCheckReport(errors, tolerance)


def check_layer(
    layer: Layer,
    x: np.ndarray,
    mode: Mode = "train",
    tolerance: float = 1e-4,
    seed: int = 0,
    corrupt: bool = False,
) -> GradCheckReport:
    """Gradient-check one layer on input `x` against a random linear read-out.

    Buffers such as batch-norm running statistics are restored afterwards.
    With `corrupt`, analytic gradients are sign-flipped (detector sanity run).
    """
    readout_rng = np.random.default_rng(seed + 1)
    saved_buffers = {name: value.copy() for name, value in layer.buffers().items()}
    out, _ = layer.forward(x, mode, np.random.default_rng(seed))
    upstream = readout_rng.standard_normal(out.shape)

    def loss_fn() -> float:
        value, _ = layer.forward(x, mode, np.random.default_rng(seed))
        return float(np.sum(value * upstream))

    _, cache = layer.forward(x, mode, np.random.default_rng(seed))
    grad_x, grads = layer.backward(upstream, cache)
    arrays = {"input": x, **layer.parameters()}
    analytic = {"input": grad_x, **grads}
    if corrupt:
        analytic = {name: -value for name, value in analytic.items()}
    try:
        return grad_check(loss_fn, arrays, analytic, tolerance)
    finally:
        for name, value in saved_buffers.items():
            layer.buffers()[name][...] = value
