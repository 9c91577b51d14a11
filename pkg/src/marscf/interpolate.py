"""Latent interpolation: straight lines, and lines projected toward high prior density.

The projection of a waypoint ``z`` minimizes, over ``zbar``,

    |zbar - z| - lambda1 * log p(zbar) + lambda2 * min(|decode(zbar) - xA|, |decode(zbar) - xB|)

with Euclidean norms over flattened tensors. The optimizer starts at ``z`` and
the best iterate seen is returned, so the objective never increases.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import MARSCF
from .optim import Adamax
from .tensor import Parameter, Tensor


@dataclass
class InterpConfig:
    steps: int = 5
    lambda1: float = 0.35
    lambda2: float = 0.35
    lr: float = 5e-2
    iterations: int = 100
    seed: int = 0

    def validate(self) -> InterpConfig:
        if self.steps < 1:
            raise ValueError("need at least one interpolation step")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be non-negative")
        if self.iterations < 0 or self.lr < 0:
            raise ValueError("iterations and lr must be non-negative")
        return self


@dataclass
class Projection:
    latents: list[np.ndarray]
    initial_objective: np.ndarray
    objective: np.ndarray
    trajectory: list[np.ndarray] = field(default_factory=list)


@dataclass
class InterpolationPath:
    images: np.ndarray            # [k, C, N, N] decoded projected waypoints
    linear_images: np.ndarray     # [k, C, N, N] decoded linear waypoints
    endpoints: np.ndarray         # [2, C, N, N] decoded endpoint latents
    alphas: np.ndarray
    objective: np.ndarray         # per waypoint, projected
    linear_objective: np.ndarray  # per waypoint, at the linear point


def _arrays(z) -> list[np.ndarray]:
    return [np.asarray(T.as_tensor(t).data) for t in z]


def linear_interp(z_a, z_b, alpha: float) -> list[np.ndarray]:
    """Per-level convex combination ``(1 - alpha) * z_a + alpha * z_b``."""
    a, b = _arrays(z_a), _arrays(z_b)
    if len(a) != len(b) or any(x.shape != y.shape for x, y in zip(a, b)):
        raise ValueError("latent pyramids have different shapes")
    if alpha == 0:
        return [x.copy() for x in a]
    if alpha == 1:
        return [y.copy() for y in b]
    return [(1.0 - alpha) * x + alpha * y for x, y in zip(a, b)]


def _flat(parts: list[Tensor]) -> Tensor:
    return T.concat([T.reshape(p, (p.shape[0], -1)) for p in parts], axis=1)


def interpolation_objective(model: MARSCF, zbar, anchor, x_a, x_b,
                            lambda1: float, lambda2: float) -> Tensor:
    """Per-sample value of the projection objective, shape ``[B]``."""
    zbar = [T.as_tensor(t) for t in zbar]
    anchor_term = T.safe_norm(_flat([z - np.asarray(a) for z, a in zip(zbar, _arrays(anchor))]), axis=1)
    x, prior_logp = model.decode(zbar, return_prior=True)
    B = x.shape[0]
    dist_a = T.safe_norm(T.reshape(x - np.broadcast_to(np.asarray(x_a), x.shape), (B, -1)), axis=1)
    dist_b = T.safe_norm(T.reshape(x - np.broadcast_to(np.asarray(x_b), x.shape), (B, -1)), axis=1)
    return anchor_term - prior_logp * lambda1 + T.minimum(dist_a, dist_b) * lambda2


def project_interp(model: MARSCF, z_init, x_a, x_b, config: InterpConfig) -> Projection:
    """Minimize the projection objective for a batch of independent waypoints."""
    config.validate()
    x_a = np.asarray(T.as_tensor(x_a).data)
    x_b = np.asarray(T.as_tensor(x_b).data)
    anchor = _arrays(z_init)
    if not all(np.all(np.isfinite(a)) for a in anchor):
        raise ValueError("interpolation objective is not finite at the initial point")
    zbar = [Parameter(a, dtype=model.dtype) for a in anchor]
    was_trainable = [p.requires_grad for p in model.parameters()]
    model.set_requires_grad(False)
    try:
        opt = Adamax(zbar, lr=config.lr)
        best = [a.astype(model.dtype, copy=True) for a in anchor]
        initial = None
        best_obj = None
        trajectory = []
        for it in range(config.iterations + 1):
            obj = interpolation_objective(model, zbar, anchor, x_a, x_b, config.lambda1, config.lambda2)
            values = obj.data.copy()
            trajectory.append(values)
            if initial is None:
                if not np.all(np.isfinite(values)):
                    raise ValueError("interpolation objective is not finite at the initial point")
                initial = values.copy()
                best_obj = values.copy()
            else:
                improved = np.isfinite(values) & (values < best_obj)
                for b_lat, z in zip(best, zbar):
                    b_lat[improved] = z.data[improved]
                best_obj = np.where(improved, values, best_obj)
            if it == config.iterations:
                break
            opt.zero_grad()
            T.backward(T.tsum(obj))
            opt.step()
    finally:
        for p, flag in zip(model.parameters(), was_trainable):
            p.requires_grad = flag
    return Projection(latents=best, initial_objective=initial, objective=best_obj, trajectory=trajectory)


def interpolate_path(model: MARSCF, x_a, x_b, config: InterpConfig) -> InterpolationPath:
    """Encode both images, project ``k`` evenly spaced linear waypoints, decode them."""
    config.validate()
    x_a = np.asarray(T.as_tensor(x_a).data)
    x_b = np.asarray(T.as_tensor(x_b).data)
    if x_a.ndim == 3:
        x_a, x_b = x_a[None], x_b[None]
    k = config.steps
    with T.no_grad():
        z_a = _arrays(model.encode(Tensor(x_a)))
        z_b = _arrays(model.encode(Tensor(x_b)))
        endpoints = model.decode([np.concatenate([a, b]) for a, b in zip(z_a, z_b)]).data
    alphas = np.arange(1, k + 1) / (k + 1)
    waypoints = [linear_interp(z_a, z_b, float(a)) for a in alphas]
    z_lin = [np.concatenate([w[level] for w in waypoints]) for level in range(len(z_a))]
    proj = project_interp(model, z_lin, x_a, x_b, config)
    with T.no_grad():
        images = model.decode(proj.latents).data
        linear_images = model.decode(z_lin).data
    return InterpolationPath(images=images, linear_images=linear_images, endpoints=endpoints,
                             alphas=alphas, objective=proj.objective,
                             linear_objective=proj.initial_objective)
