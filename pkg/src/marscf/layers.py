"""Invertible layers with exact log-determinants.

Every layer maps ``x -> (y, logdet)`` in ``forward`` and ``y -> (x, logdet)``
in ``inverse``, where ``logdet`` is a per-sample ``Tensor[B]`` holding
``log|det dy/dx|`` (forward) or ``log|det dx/dy|`` (inverse).
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from . import tensor as T
from .module import Module
from .tensor import Parameter, Tensor

SCALE_CLAMP = 2.0
SINGULAR_TOL = 1e-12
BISECTION_TOL = 1e-10
BISECTION_MAX_ITER = 200
BISECTION_BRACKET = 15.0


class NumericalError(RuntimeError):
    """Raised when an inverse cannot be computed to the required accuracy."""


def _constant_logdet(value: Tensor, batch: int) -> Tensor:
    return T.expand(T.reshape(value, (1,)), (batch,))


# ---------------------------------------------------------------------------
# Permutations
# ---------------------------------------------------------------------------

def squeeze(x: Tensor) -> Tensor:
    """Space-to-depth: each 2x2 block becomes 4 channels (TL, TR, BL, BR) per source channel."""
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"squeeze needs even spatial size, got {H}x{W}")
    y = T.reshape(x, (B, C, H // 2, 2, W // 2, 2))
    y = T.transpose(y, (0, 1, 3, 5, 2, 4))
    return T.reshape(y, (B, 4 * C, H // 2, W // 2))


def unsqueeze(x: Tensor) -> Tensor:
    """Depth-to-space, the exact inverse of :func:`squeeze`."""
    B, C, H, W = x.shape
    if C % 4:
        raise ValueError(f"unsqueeze needs a channel count divisible by 4, got {C}")
    y = T.reshape(x, (B, C // 4, 2, 2, H, W))
    y = T.transpose(y, (0, 1, 4, 2, 5, 3))
    return T.reshape(y, (B, C // 4, 2 * H, 2 * W))


def split(h: Tensor) -> tuple[Tensor, Tensor]:
    C = h.shape[1]
    if C % 2:
        raise ValueError(f"split needs an even channel count, got {C}")
    return h[:, : C // 2], h[:, C // 2:]


def merge(l: Tensor, r: Tensor) -> Tensor:
    return T.concat([l, r], axis=1)


# ---------------------------------------------------------------------------
# ActNorm
# ---------------------------------------------------------------------------

class ActNorm(Module):
    """Per-channel ``y = (x + bias) * exp(logscale)`` with data-dependent init."""

    def __init__(self, channels: int, dtype=np.float64):
        self.channels = channels
        self.logscale = Parameter(np.zeros((1, channels, 1, 1)), dtype=dtype)
        self.bias = Parameter(np.zeros((1, channels, 1, 1)), dtype=dtype)
        self.initialized = False

    def initialize(self, x: Tensor) -> None:
        if self.initialized:
            return
        data = x.data
        mean = data.mean(axis=(0, 2, 3), keepdims=True)
        std = data.std(axis=(0, 2, 3), keepdims=True)
        self.bias.data[...] = -mean
        self.logscale.data[...] = -np.log(std + 1e-6)
        self.initialized = True

    def forward(self, x: Tensor, init: bool = False) -> tuple[Tensor, Tensor]:
        if not self.initialized:
            if not init:
                raise RuntimeError("ActNorm used before data-dependent initialization")
            self.initialize(x)
        B, _, H, W = x.shape
        y = (x + self.bias) * T.exp(self.logscale)
        return y, _constant_logdet(T.tsum(self.logscale) * float(H * W), B)

    def inverse(self, y: Tensor) -> tuple[Tensor, Tensor]:
        if not self.initialized:
            raise RuntimeError("ActNorm inverse requested before initialization")
        B, _, H, W = y.shape
        x = y * T.exp(-self.logscale) - self.bias
        return x, _constant_logdet(T.tsum(self.logscale) * float(-H * W), B)


# ---------------------------------------------------------------------------
# Invertible 1x1 convolution
# ---------------------------------------------------------------------------

class InvConv1x1(Module):
    """Channel mixing by ``W = P L U`` with a fixed permutation ``P``.

    ``L`` is unit lower-triangular; ``U`` is upper-triangular with its diagonal
    stored as ``sign * exp(log_diag)``.
    """

    def __init__(self, channels: int, rng: np.random.Generator | None = None,
                 identity: bool = False, dtype=np.float64):
        self.channels = channels
        if identity or rng is None:
            w = np.eye(channels)
        else:
            w, _ = np.linalg.qr(rng.standard_normal((channels, channels)))
        p, l, u = scipy.linalg.lu(w)
        diag = np.diag(u)
        self.perm = p.astype(dtype)
        self.sign = np.sign(diag).astype(dtype)
        self.lower = Parameter(np.tril(l, -1), dtype=dtype)
        self.upper = Parameter(np.triu(u, 1), dtype=dtype)
        self.log_diag = Parameter(np.log(np.abs(diag)), dtype=dtype)
        self._lower_mask = np.tril(np.ones((channels, channels)), -1).astype(dtype)
        self._upper_mask = np.triu(np.ones((channels, channels)), 1).astype(dtype)
        self._eye = np.eye(channels, dtype=dtype)

    def _check(self) -> None:
        mags = np.exp(self.log_diag.data)
        if np.any(mags < SINGULAR_TOL) or not np.all(np.isfinite(mags)):
            raise NumericalError(f"invertible 1x1 conv is numerically singular: min |U_cc| = {mags.min():.3e}")

    def factors(self) -> tuple[Tensor, Tensor]:
        lower = self.lower * self._lower_mask + self._eye
        diag = T.reshape(T.exp(self.log_diag), (1, self.channels))
        upper = self.upper * self._upper_mask + (self._eye * self.sign[None, :]) * diag
        return lower, upper

    def weight(self) -> Tensor:
        lower, upper = self.factors()
        return T.matmul(T.matmul(Tensor(self.perm), lower), upper)

    def forward(self, x: Tensor, init: bool = False) -> tuple[Tensor, Tensor]:
        self._check()
        B, _, H, W = x.shape
        y = T.channel_mix(x, self.weight())
        return y, _constant_logdet(T.tsum(self.log_diag) * float(H * W), B)

    def inverse(self, y: Tensor) -> tuple[Tensor, Tensor]:
        """Undo the mixing with two triangular solves; differentiable in ``y`` only."""
        self._check()
        B, C, H, W = y.shape
        lower = np.tril(self.lower.data, -1) + self._eye
        upper = np.triu(self.upper.data, 1) + np.diag(self.sign * np.exp(self.log_diag.data))
        perm = self.perm

        def solve(rhs):  # rhs [C, n]
            tmp = scipy.linalg.solve_triangular(lower, perm.T @ rhs, lower=True, unit_diagonal=True)
            return scipy.linalg.solve_triangular(upper, tmp, lower=False)

        def solve_transposed(rhs):  # W^{-T} rhs = P L^{-T} U^{-T} rhs
            tmp = scipy.linalg.solve_triangular(upper, rhs, lower=False, trans="T")
            return perm @ scipy.linalg.solve_triangular(lower, tmp, lower=True, unit_diagonal=True, trans="T")

        flat = y.data.transpose(1, 0, 2, 3).reshape(C, -1)
        x = solve(flat).reshape(C, B, H, W).transpose(1, 0, 2, 3).astype(y.dtype)

        def vjp(g):
            gf = g.transpose(1, 0, 2, 3).reshape(C, -1)
            return (solve_transposed(gf).reshape(C, B, H, W).transpose(1, 0, 2, 3).astype(g.dtype),)

        x = T.custom(np.ascontiguousarray(x), (y,), vjp, "invconv_inverse")
        logdet = Tensor(np.full(B, -H * W * self.log_diag.data.sum(), dtype=y.dtype))
        return x, logdet


# ---------------------------------------------------------------------------
# Couplings
# ---------------------------------------------------------------------------

class ParamNet(Module):
    """3x3 conv -> ReLU -> 1x1 conv -> ReLU -> 3x3 conv, the last layer zero-initialized."""

    def __init__(self, in_channels: int, out_channels: int, width: int,
                 rng: np.random.Generator, dtype=np.float64):
        self.w1 = Parameter(rng.normal(0.0, 0.05, (width, in_channels, 3, 3)), dtype=dtype)
        self.b1 = Parameter(np.zeros(width), dtype=dtype)
        self.w2 = Parameter(rng.normal(0.0, 0.05, (width, width, 1, 1)), dtype=dtype)
        self.b2 = Parameter(np.zeros(width), dtype=dtype)
        self.w3 = Parameter(np.zeros((out_channels, width, 3, 3)), dtype=dtype)
        self.b3 = Parameter(np.zeros(out_channels), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        h = T.relu(T.conv2d(x, self.w1, self.b1))
        h = T.relu(T.conv2d(h, self.w2, self.b2))
        return T.conv2d(h, self.w3, self.b3)


def soft_clamp(s: Tensor, alpha: float = SCALE_CLAMP) -> Tensor:
    """``alpha * tanh(s / alpha)``: identity near zero, bounded by ``alpha``."""
    return T.tanh(s * (1.0 / alpha)) * alpha


def affine_forward(xb: Tensor, log_scale: Tensor, shift: Tensor) -> tuple[Tensor, Tensor]:
    """``y = x * exp(log_scale) + shift`` with its per-sample logdet."""
    y = xb * T.exp(log_scale) + shift
    return y, T.tsum(log_scale, axis=(1, 2, 3))


def _check_even(x: Tensor, name: str) -> None:
    if x.ndim != 4 or x.shape[1] % 2:
        raise ValueError(f"{name} needs [B,C,H,W] input with even C, got {x.shape}")


class AffineCoupling(Module):
    """Transform the second channel half by a scale and shift predicted from the first."""

    def __init__(self, channels: int, width: int, rng: np.random.Generator, dtype=np.float64):
        if channels % 2:
            raise ValueError(f"affine coupling needs an even channel count, got {channels}")
        self.channels = channels
        self.net = ParamNet(channels // 2, channels, width, rng, dtype)

    def _params(self, xa: Tensor) -> tuple[Tensor, Tensor]:
        h = self.net(xa)
        half = self.channels // 2
        return soft_clamp(h[:, :half]), h[:, half:]

    def forward(self, x: Tensor, init: bool = False) -> tuple[Tensor, Tensor]:
        _check_even(x, "affine coupling")
        xa, xb = split(x)
        log_scale, shift = self._params(xa)
        yb, logdet = affine_forward(xb, log_scale, shift)
        return merge(xa, yb), logdet

    def inverse(self, y: Tensor) -> tuple[Tensor, Tensor]:
        _check_even(y, "affine coupling")
        ya, yb = split(y)
        log_scale, shift = self._params(ya)
        xb = (yb - shift) * T.exp(-log_scale)
        return merge(ya, xb), -T.tsum(log_scale, axis=(1, 2, 3))


class MixLogCDFCoupling(Module):
    """Elementwise ``logit(mixture-of-logistics CDF)`` followed by an affine map.

    For each element of the second half the parameter network emits K mixture
    logits, K means, K log-scales and an outer log-scale/shift pair.
    """

    def __init__(self, channels: int, width: int, rng: np.random.Generator,
                 components: int = 4, dtype=np.float64):
        if channels % 2:
            raise ValueError(f"MixLogCDF coupling needs an even channel count, got {channels}")
        self.channels = channels
        self.components = components
        self.net = ParamNet(channels // 2, (channels // 2) * (3 * components + 2), width, rng, dtype)

    def mixture_params(self, xa: Tensor):
        B, half, H, W = xa.shape
        K = self.components
        h = T.reshape(self.net(xa), (B, 3 * K + 2, half, H, W))
        logits = T.transpose(h[:, :K], (0, 2, 1, 3, 4))           # B,half,K,H,W
        means = T.transpose(h[:, K:2 * K], (0, 2, 1, 3, 4))
        log_scales = T.transpose(h[:, 2 * K:3 * K], (0, 2, 1, 3, 4))
        a = soft_clamp(h[:, 3 * K])
        b = h[:, 3 * K + 1]
        log_pi = logits - T.logsumexp(logits, axis=2, keepdims=True)
        return log_pi, means, log_scales, a, b

    @staticmethod
    def _logit_cdf_terms(x: Tensor, log_pi, means, log_scales):
        """Return ``(logit CDF, log pdf - log cdf - log(1-cdf))`` elementwise."""
        u = (T.reshape(x, (x.shape[0], x.shape[1], 1, x.shape[2], x.shape[3])) - means) * T.exp(-log_scales)
        ls_pos = T.log_sigmoid(u)
        ls_neg = T.log_sigmoid(-u)
        log_cdf = T.logsumexp(log_pi + ls_pos, axis=2)
        log_sf = T.logsumexp(log_pi + ls_neg, axis=2)
        log_pdf = T.logsumexp(log_pi + ls_pos + ls_neg - log_scales, axis=2)
        return log_cdf - log_sf, log_pdf - log_cdf - log_sf

    def forward(self, x: Tensor, init: bool = False) -> tuple[Tensor, Tensor]:
        _check_even(x, "MixLogCDF coupling")
        xa, xb = split(x)
        log_pi, means, log_scales, a, b = self.mixture_params(xa)
        z, log_slope = self._logit_cdf_terms(xb, log_pi, means, log_scales)
        yb = z * T.exp(a) + b
        return merge(xa, yb), T.tsum(log_slope + a, axis=(1, 2, 3))

    def inverse(self, y: Tensor) -> tuple[Tensor, Tensor]:
        _check_even(y, "MixLogCDF coupling")
        ya, yb = split(y)
        log_pi, means, log_scales, a, b = self.mixture_params(ya)
        target = (yb - b) * T.exp(-a)
        root = self._bisect(target.data, log_pi.data, means.data, log_scales.data)
        # One Newton correction from the bisection root: its value is the root
        # refined, and its gradient is the implicit-function gradient.
        x0 = Tensor(root)
        z0, slope0 = self._logit_cdf_terms(x0, log_pi, means, log_scales)
        xb = x0 - (z0 - target) * Tensor(np.exp(-slope0.data))
        _, log_slope = self._logit_cdf_terms(xb, log_pi, means, log_scales)
        return merge(ya, xb), -T.tsum(log_slope + a, axis=(1, 2, 3))

    def _bisect(self, target, log_pi, means, log_scales) -> np.ndarray:
        def f(x):
            with T.no_grad():
                z, _ = self._logit_cdf_terms(Tensor(x), Tensor(log_pi), Tensor(means), Tensor(log_scales))
            return z.data - target

        lo = np.full(target.shape, -BISECTION_BRACKET, dtype=target.dtype)
        hi = np.full(target.shape, BISECTION_BRACKET, dtype=target.dtype)
        for _ in range(60):
            low_bad = f(lo) > 0
            high_bad = f(hi) < 0
            if not (low_bad.any() or high_bad.any()):
                break
            lo = np.where(low_bad, 2.0 * lo, lo)
            hi = np.where(high_bad, 2.0 * hi, hi)
        else:
            raise NumericalError("MixLogCDF inverse: could not bracket the root")
        for _ in range(BISECTION_MAX_ITER):
            mid = 0.5 * (lo + hi)
            above = f(mid) > 0
            hi = np.where(above, mid, hi)
            lo = np.where(above, lo, mid)
            # brackets narrower than the float spacing cannot shrink further
            done = (hi - lo < BISECTION_TOL) | (hi - lo <= 2 * np.spacing(np.maximum(np.abs(lo), np.abs(hi))))
            if np.all(done):
                return 0.5 * (lo + hi)
        width = np.max(hi - lo)
        raise NumericalError(
            f"MixLogCDF inverse did not converge in {BISECTION_MAX_ITER} iterations "
            f"(bracket width {width:.3e}, tolerance {BISECTION_TOL:.1e})")


# ---------------------------------------------------------------------------
# Flow step
# ---------------------------------------------------------------------------

class FlowStep(Module):
    """ActNorm -> invertible 1x1 conv -> coupling."""

    def __init__(self, channels: int, coupling: str, width: int, rng: np.random.Generator,
                 components: int = 4, identity: bool = False, dtype=np.float64):
        self.actnorm = ActNorm(channels, dtype)
        self.invconv = InvConv1x1(channels, rng, identity=identity, dtype=dtype)
        if coupling == "affine":
            self.coupling = AffineCoupling(channels, width, rng, dtype)
        elif coupling == "mixlogcdf":
            self.coupling = MixLogCDFCoupling(channels, width, rng, components, dtype)
        else:
            raise ValueError(f"unknown coupling kind {coupling!r}")
        if identity:
            self.actnorm.initialized = True

    @property
    def layers(self):
        return (self.actnorm, self.invconv, self.coupling)

    def forward(self, x: Tensor, init: bool = False) -> tuple[Tensor, Tensor]:
        total = None
        for layer in self.layers:
            x, ld = layer.forward(x, init=init)
            total = ld if total is None else total + ld
        return x, total

    def inverse(self, y: Tensor) -> tuple[Tensor, Tensor]:
        total = None
        for layer in reversed(self.layers):
            y, ld = layer.inverse(y)
            total = ld if total is None else total + ld
        return y, total
