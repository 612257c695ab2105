"""Layers, parameters and the Adam optimizer used by both models."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import EmptyGradient, InvalidProbability, KernelTooLong, ShapeMismatch
from .tensor import Tensor, as_tensor, make_op, matmul, sigmoid, tanh

ADAM_DEFAULTS = {"lr": 1e-3, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8}


class Parameter:
    """A named trainable tensor together with its Adam moment buffers."""

    def __init__(self, data, name: str):
        self.tensor = Tensor(data, requires_grad=True, name=name)
        self.name = name
        self.adam_m = np.zeros(self.tensor.size)
        self.adam_v = np.zeros(self.tensor.size)
        self.step_count = 0

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.shape

    def zero_grad(self) -> None:
        self.tensor.grad = None

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def adam_step(
    params: list[Parameter],
    lr: float = ADAM_DEFAULTS["lr"],
    beta1: float = ADAM_DEFAULTS["beta1"],
    beta2: float = ADAM_DEFAULTS["beta2"],
    eps: float = ADAM_DEFAULTS["eps"],
) -> None:
    """One bias-corrected Adam update over ``params``; clears their gradients."""
    missing = [p.name for p in params if p.grad is None]
    if missing:
        raise EmptyGradient(f"no gradient for {', '.join(missing)}")
    for p in params:
        g = p.grad.reshape(-1)
        p.step_count += 1
        p.adam_m *= beta1
        p.adam_m += (1.0 - beta1) * g
        p.adam_v *= beta2
        p.adam_v += (1.0 - beta2) * g * g
        m_hat = p.adam_m / (1.0 - beta1**p.step_count)
        v_hat = p.adam_v / (1.0 - beta2**p.step_count)
        p.tensor.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).reshape(p.shape)
        p.zero_grad()


# -- layers ----------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` for x of shape [batch, d_in]."""
    x = as_tensor(x)
    if x.shape[-1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise ShapeMismatch(f"linear: input {x.shape}, weight {weight.shape}, bias {bias.shape}")
    return matmul(x, weight) + bias


def conv1d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Valid-mode, stride-1 1-D convolution (cross-correlation).

    x: [batch, c_in, length], kernels: [c_out, c_in, k], bias: [c_out]
    -> [batch, c_out, length - k + 1]
    """
    x = as_tensor(x)
    if x.ndim != 3 or kernels.ndim != 3 or x.shape[1] != kernels.shape[1]:
        raise ShapeMismatch(f"conv1d: input {x.shape}, kernels {kernels.shape}")
    if bias.shape != (kernels.shape[0],):
        raise ShapeMismatch(f"conv1d: bias {bias.shape} for {kernels.shape[0]} output channels")
    c_out, c_in, k = kernels.shape
    length = x.shape[2]
    if k < 1 or k > length:
        raise KernelTooLong(f"kernel size {k} exceeds input length {length}")
    l_out = length - k + 1
    # [batch, c_in, l_out, k] -> [batch, l_out, c_in*k]
    patches = sliding_window_view(x.data, k, axis=2).transpose(0, 2, 1, 3).reshape(
        x.shape[0], l_out, c_in * k
    )
    w = kernels.data.reshape(c_out, c_in * k)
    out = (patches @ w.T).transpose(0, 2, 1) + bias.data[None, :, None]

    def back(g):
        # g: [batch, c_out, l_out]
        gt = g.transpose(0, 2, 1)  # [batch, l_out, c_out]
        gw = np.tensordot(gt, patches, axes=([0, 1], [0, 1])).reshape(kernels.shape)
        gb = g.sum(axis=(0, 2))
        gp = (gt @ w).reshape(x.shape[0], l_out, c_in, k)
        gx = np.zeros_like(x.data)
        for j in range(k):
            gx[:, :, j : j + l_out] += gp[:, :, :, j].transpose(0, 2, 1)
        return gx, gw, gb

    return make_op(np.ascontiguousarray(out), (x, kernels, bias), back)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return make_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: zero with probability p, rescale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise InvalidProbability(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a seeded generator")
    scale = (rng.random(x.shape) >= p) / (1.0 - p)
    return make_op(x.data * scale, (x,), lambda g: (g * scale,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    out = shifted / shifted.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_op(out, (x,), back)


def attention_weights(x: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """Per-channel softmax scores [batch, channels] from a squeeze-excite bottleneck."""
    if x.ndim != 3 or w1.shape[0] != x.shape[1] or w2.shape != (w1.shape[1], x.shape[1]):
        raise ShapeMismatch(f"channel_attention: input {x.shape}, w1 {w1.shape}, w2 {w2.shape}")
    pooled = x.mean(axis=2)
    return softmax(matmul(relu(matmul(pooled, w1)), w2), axis=-1)


def channel_attention(x: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """Rescale each channel by its softmax score times the channel count.

    With uniform scores every channel is multiplied by exactly 1.
    """
    x = as_tensor(x)
    s = attention_weights(x, w1, w2)
    channels = x.shape[1]
    return x * (s * float(channels)).reshape(x.shape[0], channels, 1)


# -- recurrent -------------------------------------------------------------

@dataclass
class LstmState:
    hidden: Tensor
    cell: Tensor

    def __post_init__(self):
        if self.hidden.shape != self.cell.shape:
            raise ShapeMismatch(f"hidden {self.hidden.shape} vs cell {self.cell.shape}")

    @classmethod
    def zeros(cls, hidden_dim: int, batch: int | None = None) -> "LstmState":
        shape = (hidden_dim,) if batch is None else (batch, hidden_dim)
        return cls(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))


@dataclass
class LstmWeights:
    """Gate parameters, gates packed as [input, forget, candidate, output]."""

    w_input: Tensor  # [d_in, 4*hidden]
    w_hidden: Tensor  # [hidden, 4*hidden]
    bias: Tensor  # [4*hidden]
    hidden_dim: int = field(init=False)

    def __post_init__(self):
        self.hidden_dim = self.w_hidden.shape[0]
        four_h = 4 * self.hidden_dim
        if self.w_hidden.shape[1] != four_h or self.w_input.shape[1] != four_h or self.bias.shape != (four_h,):
            raise ShapeMismatch(
                f"lstm weights: w_input {self.w_input.shape}, w_hidden {self.w_hidden.shape}, bias {self.bias.shape}"
            )


def lstm_step(x: Tensor, state: LstmState, weights: LstmWeights) -> LstmState:
    """One LSTM cell update; works on [d_in] or batched [batch, d_in] inputs."""
    x = as_tensor(x)
    h_dim = weights.hidden_dim
    if x.shape[-1] != weights.w_input.shape[0] or state.hidden.shape[-1] != h_dim:
        raise ShapeMismatch(f"lstm_step: input {x.shape}, hidden {state.hidden.shape}, weights for {weights.w_input.shape}")
    z = matmul(x, weights.w_input) + matmul(state.hidden, weights.w_hidden) + weights.bias
    i = sigmoid(z[..., 0:h_dim])
    f = sigmoid(z[..., h_dim : 2 * h_dim])
    g = tanh(z[..., 2 * h_dim : 3 * h_dim])
    o = sigmoid(z[..., 3 * h_dim :])
    cell = f * state.cell + i * g
    return LstmState(hidden=o * tanh(cell), cell=cell)


def lstm_last_hidden(seq: Tensor, weights: LstmWeights) -> Tensor:
    """Run the cell over a [batch, time, d_in] sequence from a zero state."""
    state = LstmState.zeros(weights.hidden_dim, batch=seq.shape[0])
    for t in range(seq.shape[1]):
        state = lstm_step(seq[:, t, :], state, weights)
    return state.hidden
