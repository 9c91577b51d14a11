"""Multi-scale split-coupling flow with channel-autoregressive latent priors."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .layers import ActNorm, FlowStep, merge, split, squeeze, unsqueeze
from .module import Module
from .prior import LevelPrior, SamplingTrace
from .tensor import Tensor

COUPLINGS = ("affine", "mixlogcdf")


class ConfigError(ValueError):
    pass


@dataclass
class FlowConfig:
    channels: int = 1
    size: int = 8
    levels: int = 2
    couplings: int = 2
    coupling: str = "affine"
    width: int = 32
    components: int = 4
    prior_hidden: int = 32
    prior_layers: int = 3

    def validate(self) -> FlowConfig:
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        if self.channels < 1 or self.size < 1:
            raise ConfigError("channels and size must be positive")
        if self.size % (2 ** self.levels):
            raise ConfigError(f"image size {self.size} is not divisible by 2^{self.levels}")
        if self.couplings < 1:
            raise ConfigError("need at least one coupling per level")
        if self.coupling not in COUPLINGS:
            raise ConfigError(f"coupling must be one of {COUPLINGS}, got {self.coupling!r}")
        if self.width < 1 or self.components < 1 or self.prior_hidden < 1 or self.prior_layers < 1:
            raise ConfigError("width, components, prior_hidden and prior_layers must be positive")
        return self

    @property
    def dims(self) -> int:
        return self.channels * self.size * self.size

    def to_dict(self) -> dict:
        return asdict(self)


def channel_dims(config: FlowConfig) -> list[tuple[int, int, int]]:
    """Latent shapes ``[l_1, ..., l_{n-1}, h_n]`` as ``(channels, height, width)``."""
    config.validate()
    C, N, n = config.channels, config.size, config.levels
    shapes = [(2 ** i * C, N // 2 ** i, N // 2 ** i) for i in range(1, n)]
    shapes.append((2 ** (n + 1) * C, N // 2 ** n, N // 2 ** n))
    return shapes


def critical_path_steps(config: FlowConfig) -> int:
    """Sequential channel-sampling steps of one MARPS draw: ``C * (3 * 2^n - 2)``."""
    config.validate()
    return config.channels * (3 * 2 ** config.levels - 2)


def critical_path_bound(config: FlowConfig) -> int:
    return 3 * config.channels * config.size


class FlowLevel(Module):
    def __init__(self, steps: list[FlowStep], prior: LevelPrior):
        self.steps = steps
        self.prior = prior

    def forward(self, h: Tensor, init: bool = False) -> tuple[Tensor, Tensor]:
        total = None
        for step in self.steps:
            h, ld = step.forward(h, init=init)
            total = ld if total is None else total + ld
        return h, total

    def inverse(self, h: Tensor) -> tuple[Tensor, Tensor]:
        total = None
        for step in reversed(self.steps):
            h, ld = step.inverse(h)
            total = ld if total is None else total + ld
        return h, total


class MARSCF(Module):
    """Squeeze -> flow steps -> split at every level, with a prior on each split-off half.

    ``identity_init`` builds every invertible layer as the identity (actnorm
    marked initialized at zero), so the model reduces to its prior.
    """

    def __init__(self, config: FlowConfig, seed: int = 0, identity_init: bool = False,
                 dtype=np.float64):
        self.config = config.validate()
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        C, N, n = config.channels, config.size, config.levels
        self.levels = []
        for i in range(1, n + 1):
            flow_channels = 2 ** (i + 1) * C
            side = N // 2 ** i
            steps = [FlowStep(flow_channels, config.coupling, config.width, rng,
                              components=config.components, identity=identity_init, dtype=dtype)
                     for _ in range(config.couplings)]
            if i < n:
                prior = LevelPrior(flow_channels // 2, side, side, flow_channels // 2, rng,
                                   config.prior_hidden, config.prior_layers, dtype)
            else:
                prior = LevelPrior(flow_channels, side, side, 0, rng,
                                   config.prior_hidden, config.prior_layers, dtype)
            self.levels.append(FlowLevel(steps, prior))

    # -- bookkeeping -----------------------------------------------------------
    def actnorms(self) -> list[tuple[str, ActNorm]]:
        return [(name, m) for name, m in self.named_modules() if isinstance(m, ActNorm)]

    @property
    def initialized(self) -> bool:
        return all(m.initialized for _, m in self.actnorms())

    def latent_shapes(self) -> list[tuple[int, int, int]]:
        return channel_dims(self.config)

    def _check_input(self, x: Tensor) -> None:
        C, N = self.config.channels, self.config.size
        if x.ndim != 4 or x.shape[1:] != (C, N, N):
            raise ValueError(f"input shape {x.shape} does not match [B, {C}, {N}, {N}]")

    def _check_latents(self, z) -> int:
        shapes = self.latent_shapes()
        if len(z) != len(shapes):
            raise ValueError(f"expected {len(shapes)} latent levels, got {len(z)}")
        batch = z[0].shape[0]
        for got, want in zip(z, shapes):
            if got.shape != (batch, *want):
                raise ValueError(f"latent shape {got.shape} does not match [B, {', '.join(map(str, want))}]")
        return batch

    # -- density ---------------------------------------------------------------
    def forward(self, x: Tensor, init: bool = False) -> tuple[list[Tensor], Tensor]:
        """Return the latent pyramid and ``log p(x)`` per sample."""
        x = T.as_tensor(x)
        self._check_input(x)
        z, logp = [], None
        h = x
        last = len(self.levels) - 1
        for i, level in enumerate(self.levels):
            h = squeeze(h)
            h, ld = level.forward(h, init=init)
            if i < last:
                l, r = split(h)
                term = level.prior.logprob(l, r) + ld
                z.append(l)
                h = r
            else:
                term = level.prior.logprob(h) + ld
                z.append(h)
            logp = term if logp is None else logp + term
        return z, logp

    __call__ = forward

    def log_prob(self, x) -> Tensor:
        return self.forward(x)[1]

    def initialize(self, x) -> Tensor:
        """Run data-dependent initialization of every ActNorm on ``x``."""
        with T.no_grad():
            return self.forward(T.as_tensor(x), init=True)[1]

    def encode(self, x, return_logdet: bool = False):
        x = T.as_tensor(x)
        self._check_input(x)
        z, total = [], None
        h = x
        last = len(self.levels) - 1
        for i, level in enumerate(self.levels):
            h, ld = level.forward(squeeze(h))
            total = ld if total is None else total + ld
            if i < last:
                l, h = split(h)
                z.append(l)
            else:
                z.append(h)
        return (z, total) if return_logdet else z

    def decode(self, z, return_prior: bool = False):
        """Invert the flow; optionally also score ``z`` under the prior on the way down."""
        z = [T.as_tensor(t) for t in z]
        self._check_latents(z)
        n = len(self.levels)
        top = self.levels[-1]
        prior_logp = top.prior.logprob(z[-1]) if return_prior else None
        h, _ = top.inverse(z[-1])
        h = unsqueeze(h)
        for i in range(n - 2, -1, -1):
            level = self.levels[i]
            if return_prior:
                prior_logp = prior_logp + level.prior.logprob(z[i], h)
            h, _ = level.inverse(merge(z[i], h))
            h = unsqueeze(h)
        return (h, prior_logp) if return_prior else h

    def latent_logprob(self, z) -> Tensor:
        return self.decode(z, return_prior=True)[1]

    # -- sampling --------------------------------------------------------------
    def sample(self, batch: int, rng: np.random.Generator, temperature: float = 1.0,
               trace: SamplingTrace | None = None) -> Tensor:
        """Multi-scale autoregressive prior sampling, coarsest level first."""
        drawn = []
        with T.no_grad():
            top = self.levels[-1]
            h = top.prior.sample(None, batch, rng, temperature, trace)
            drawn.append(h)
            h = unsqueeze(top.inverse(h)[0])
            for level in reversed(self.levels[:-1]):
                r = h
                l = level.prior.sample(r, batch, rng, temperature, trace)
                drawn.append(l)
                h = unsqueeze(level.inverse(merge(l, r))[0])
        if trace is not None:
            trace.latents = [t.data for t in reversed(drawn)]
        return h


def marps_sample(model: MARSCF, batch: int, temperature: float = 1.0,
                 rng: np.random.Generator | None = None, trace: SamplingTrace | None = None) -> Tensor:
    rng = rng if rng is not None else np.random.default_rng()
    return model.sample(batch, rng, temperature, trace)


def flatten_latents(z) -> np.ndarray:
    """Concatenate ``l_1, ..., h_n`` row-major per sample into ``[B, D]``."""
    return np.concatenate([T.as_tensor(t).data.reshape(t.shape[0], -1) for t in z], axis=1)


def unflatten_latents(flat: np.ndarray, config: FlowConfig) -> list[Tensor]:
    out, offset = [], 0
    for shape in channel_dims(config):
        size = int(np.prod(shape))
        out.append(Tensor(flat[:, offset:offset + size].reshape(flat.shape[0], *shape)))
        offset += size
    if offset != flat.shape[1]:
        raise ValueError(f"flat latent width {flat.shape[1]} does not match {offset}")
    return out
