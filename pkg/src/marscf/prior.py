"""Channel-autoregressive Gaussian prior driven by a stacked Conv-LSTM.

For a latent ``l`` of shape ``[B, C, H, W]`` the prior factorizes over
channels: channel ``j`` is Gaussian at every spatial location with mean and
log-scale emitted by the Conv-LSTM after it has consumed channels ``1..j-1``
(a learned start map stands in for channel 0). An optional conditioning
tensor ``r`` is convolved once and concatenated to the input of every step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import NumericalError
from .module import Module
from .tensor import Parameter, Tensor

LOG_SIGMA_MIN, LOG_SIGMA_MAX = -7.0, 7.0
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class SamplingTrace:
    """Bookkeeping filled in during sampling: one step per sampled channel."""

    channel_steps: int = 0
    steps_per_level: list[int] = field(default_factory=list)
    latents: list[np.ndarray] = field(default_factory=list)


class ConvLSTMCell(Module):
    def __init__(self, in_channels: int, hidden: int, rng: np.random.Generator,
                 kernel: int = 3, dtype=np.float64):
        self.in_channels = in_channels
        self.hidden = hidden
        fan_in = (in_channels + hidden) * kernel * kernel
        self.weight = Parameter(rng.normal(0.0, 1.0 / math.sqrt(fan_in),
                                           (4 * hidden, in_channels + hidden, kernel, kernel)), dtype=dtype)
        bias = np.zeros(4 * hidden)
        bias[hidden:2 * hidden] = 1.0  # forget gate starts open
        self.bias = Parameter(bias, dtype=dtype)

    def __call__(self, x: Tensor, state: tuple[Tensor, Tensor]) -> tuple[Tensor, Tensor]:
        h, c = state
        if x.shape[1] != self.in_channels or x.shape[2:] != h.shape[2:]:
            raise ValueError(f"ConvLSTM input {x.shape} does not match cell "
                             f"(in={self.in_channels}, state {h.shape})")
        n = self.hidden
        gates = T.conv2d(T.concat([x, h], axis=1), self.weight, self.bias)
        i = T.sigmoid(gates[:, :n])
        f = T.sigmoid(gates[:, n:2 * n])
        o = T.sigmoid(gates[:, 2 * n:3 * n])
        g = T.tanh(gates[:, 3 * n:])
        c = f * c + i * g
        return o * T.tanh(c), c


class ConvLSTM(Module):
    """A stack of Conv-LSTM cells; the output is the top cell's hidden state."""

    def __init__(self, in_channels: int, hidden: int, layers: int, rng: np.random.Generator,
                 kernel: int = 3, dtype=np.float64):
        self.hidden = hidden
        self.cells = [ConvLSTMCell(in_channels if k == 0 else hidden, hidden, rng, kernel, dtype)
                      for k in range(layers)]

    def initial_state(self, batch: int, height: int, width: int, dtype) -> list[tuple[Tensor, Tensor]]:
        zero = Tensor(np.zeros((batch, self.hidden, height, width), dtype=dtype))
        return [(zero, zero) for _ in self.cells]

    def step(self, x: Tensor, state):
        new_state = []
        for cell, s in zip(self.cells, state):
            h, c = cell(x, s)
            new_state.append((h, c))
            x = h
        return x, new_state


def convlstm_step(x: Tensor, state, lstm: ConvLSTM):
    """One recurrence step of ``lstm``: returns ``(output, new_state)``."""
    return lstm.step(x, state)


def gaussian_logpdf(x: Tensor, mu: Tensor, log_sigma: Tensor) -> Tensor:
    z = (x - mu) * T.exp(-log_sigma)
    return z * z * -0.5 - log_sigma - HALF_LOG_2PI


class LevelPrior(Module):
    """Autoregressive prior for one latent level of shape ``[channels, height, width]``.

    ``cond_channels == 0`` makes the prior unconditional (used for the top level).
    """

    def __init__(self, channels: int, height: int, width: int, cond_channels: int,
                 rng: np.random.Generator, hidden: int = 32, layers: int = 3, dtype=np.float64):
        self.channels = channels
        self.height, self.width = height, width
        self.cond_channels = cond_channels
        self.dtype = np.dtype(dtype)
        self.start = Parameter(np.zeros((1, 1, height, width)), dtype=dtype)
        step_in = 1
        if cond_channels:
            fan_in = cond_channels * 9
            self.cond_weight = Parameter(rng.normal(0.0, 1.0 / math.sqrt(fan_in),
                                                    (hidden, cond_channels, 3, 3)), dtype=dtype)
            self.cond_bias = Parameter(np.zeros(hidden), dtype=dtype)
            step_in += hidden
        self.lstm = ConvLSTM(step_in, hidden, layers, rng, dtype=dtype)
        self.head_weight = Parameter(np.zeros((2, hidden, 1, 1)), dtype=dtype)
        self.head_bias = Parameter(np.zeros(2), dtype=dtype)

    @property
    def conditional(self) -> bool:
        return self.cond_channels > 0

    def _conditioning(self, r: Tensor | None, batch: int) -> Tensor | None:
        if not self.conditional:
            if r is not None:
                raise ValueError("unconditional prior was given a conditioning tensor")
            return None
        if r is None:
            raise ValueError("conditional prior needs a conditioning tensor")
        if r.shape != (batch, self.cond_channels, self.height, self.width):
            raise ValueError(f"conditioning shape {r.shape} does not match "
                             f"[{batch}, {self.cond_channels}, {self.height}, {self.width}]")
        return T.conv2d(r, self.cond_weight, self.cond_bias)

    def emit(self, prev: Tensor, cond: Tensor | None, state):
        """Consume one channel and return ``(mu, log_sigma, state)`` for the next."""
        inp = prev if cond is None else T.concat([prev, cond], axis=1)
        out, state = self.lstm.step(inp, state)
        head = T.conv2d(out, self.head_weight, self.head_bias)
        mu = head[:, 0:1]
        log_sigma = T.clip(head[:, 1:2], LOG_SIGMA_MIN, LOG_SIGMA_MAX)
        return mu, log_sigma, state

    def _begin(self, batch: int):
        state = self.lstm.initial_state(batch, self.height, self.width, self.dtype)
        prev = T.expand(self.start, (batch, 1, self.height, self.width))
        return prev, state

    def channel_logprobs(self, l: Tensor, r: Tensor | None = None) -> Tensor:
        """Per-channel log-densities, shape ``[B, C]``."""
        B = l.shape[0]
        if l.shape[1:] != (self.channels, self.height, self.width):
            raise ValueError(f"latent shape {l.shape[1:]} does not match prior "
                             f"({self.channels}, {self.height}, {self.width})")
        cond = self._conditioning(r, B)
        prev, state = self._begin(B)
        terms = []
        for j in range(self.channels):
            mu, log_sigma, state = self.emit(prev, cond, state)
            x = l[:, j:j + 1]
            terms.append(T.reshape(T.tsum(gaussian_logpdf(x, mu, log_sigma), axis=(1, 2, 3)), (B, 1)))
            prev = x
        return T.concat(terms, axis=1)

    def logprob(self, l: Tensor, r: Tensor | None = None) -> Tensor:
        return T.tsum(self.channel_logprobs(l, r), axis=1)

    def sample(self, r: Tensor | None, batch: int, rng: np.random.Generator,
               temperature: float = 1.0, trace: SamplingTrace | None = None) -> Tensor:
        """Draw channels in order; all locations of a channel are drawn at once."""
        if temperature < 0:
            raise ValueError("temperature must be non-negative")
        with T.no_grad():
            cond = self._conditioning(r, batch)
            prev, state = self._begin(batch)
            channels = []
            for j in range(self.channels):
                mu, log_sigma, state = self.emit(prev, cond, state)
                if not (np.all(np.isfinite(mu.data)) and np.all(np.isfinite(log_sigma.data))):
                    raise NumericalError(f"prior emitted non-finite parameters at channel {j}")
                if temperature == 0:
                    x = mu.data
                else:
                    noise = rng.standard_normal(mu.shape).astype(self.dtype)
                    x = mu.data + temperature * np.exp(log_sigma.data) * noise
                prev = Tensor(x.astype(self.dtype))
                channels.append(prev)
                if trace is not None:
                    trace.channel_steps += 1
            if trace is not None:
                trace.steps_per_level.append(self.channels)
            return T.concat(channels, axis=1)
