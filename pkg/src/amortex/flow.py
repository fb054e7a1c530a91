"""Conditional affine coupling flow between parameter blocks and latent
Gaussian variables.

The flow maps an unconstrained parameter vector to a latent z given a summary
vector, with an exactly invertible forward/inverse pair and a triangular
Jacobian whose log-determinant is the sum of the active log-scales.  Blocks
alternate half masks so every coordinate is transformed at least once every
two blocks.  Log-scales are soft-clamped, and conditioner output layers start
at zero so an untrained flow is the identity.

Parameters live on bounded or Gaussian prior supports; ``SupportTransform``
moves them to and from the unconstrained space the flow operates on, which
also guarantees that inverse draws respect the prior support.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import NumericError

__all__ = [
    "SupportTransform",
    "CouplingFlow",
    "flow_forward",
    "flow_inverse",
    "flow_loss",
]

DTYPE = torch.float64


@dataclass(frozen=True)
class SupportTransform:
    """Per-parameter bijections onto the real line.

    kinds[i] is ("bounded", lo, hi) -> logit((x - lo) / (hi - lo)) or
    ("gaussian", mean, sd) -> (x - mean) / sd.
    """

    names: tuple
    kinds: tuple

    def __post_init__(self):
        if len(self.names) != len(self.kinds):
            raise ValueError("one transform per parameter name")
        for kind in self.kinds:
            if kind[0] not in ("bounded", "gaussian"):
                raise ValueError(f"unknown support kind {kind[0]!r}")

    @property
    def dim(self) -> int:
        return len(self.names)

    @classmethod
    def from_prior(cls, prior, names) -> "SupportTransform":
        kinds = []
        for name in names:
            dist = prior.dist_for(name)
            if dist.kind == "uniform":
                kinds.append(("bounded", float(dist.a), float(dist.b)))
            else:
                kinds.append(("gaussian", float(dist.a), float(dist.b)))
        return cls(tuple(names), tuple(kinds))

    def forward(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        out = np.empty_like(theta)
        for i, kind in enumerate(self.kinds):
            x = theta[..., i]
            if kind[0] == "bounded":
                lo, hi = kind[1], kind[2]
                p = np.clip((x - lo) / (hi - lo), 1e-15, 1.0 - 1e-15)
                out[..., i] = np.log(p) - np.log1p(-p)
            else:
                out[..., i] = (x - kind[1]) / kind[2]
        return out

    def inverse(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        out = np.empty_like(u)
        for i, kind in enumerate(self.kinds):
            x = u[..., i]
            if kind[0] == "bounded":
                lo, hi = kind[1], kind[2]
                out[..., i] = lo + (hi - lo) / (1.0 + np.exp(-x))
            else:
                out[..., i] = kind[1] + kind[2] * x
        return out

    def to_table(self) -> list:
        return [[name, *kind] for name, kind in zip(self.names, self.kinds)]

    @classmethod
    def from_table(cls, table) -> "SupportTransform":
        names = tuple(row[0] for row in table)
        kinds = tuple((row[1], float(row[2]), float(row[3])) for row in table)
        return cls(names, kinds)


class _Conditioner(nn.Module):
    """Dense net from (masked input ++ condition) to one value per coordinate.

    The output layer is zero-initialized so a fresh block is the identity.
    """

    def __init__(self, dim, cond_dim, hidden, generator=None):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim + cond_dim, hidden, dtype=DTYPE),
            nn.GELU(),
            nn.Linear(hidden, hidden, dtype=DTYPE),
            nn.GELU(),
            nn.Linear(hidden, dim, dtype=DTYPE),
        )
        for layer in (self.net[0], self.net[2]):
            nn.init.xavier_uniform_(layer.weight, generator=generator)
            nn.init.zeros_(layer.bias)
        nn.init.zeros_(self.net[4].weight)
        nn.init.zeros_(self.net[4].bias)

    def forward(self, masked, cond):
        return self.net(torch.cat([masked, cond], dim=-1))


class _CouplingBlock(nn.Module):
    def __init__(self, dim, cond_dim, hidden, mask, clamp, generator=None):
        super().__init__()
        self.register_buffer("mask", torch.as_tensor(mask, dtype=DTYPE))
        self.clamp = float(clamp)
        self.scale_net = _Conditioner(dim, cond_dim, hidden, generator)
        self.shift_net = _Conditioner(dim, cond_dim, hidden, generator)

    def _scale_shift(self, kept, cond):
        raw = self.scale_net(kept, cond)
        s = self.clamp * torch.tanh(raw / self.clamp)
        t = self.shift_net(kept, cond)
        active = 1.0 - self.mask
        return s * active, t * active

    def forward(self, x, cond):
        kept = x * self.mask
        s, t = self._scale_shift(kept, cond)
        y = kept + (1.0 - self.mask) * (x * torch.exp(s) + t)
        return y, s.sum(dim=-1)

    def inverse(self, y, cond):
        kept = y * self.mask
        s, t = self._scale_shift(kept, cond)
        return kept + (1.0 - self.mask) * ((y - t) * torch.exp(-s))


def _half_masks(dim, n_blocks):
    first = math.ceil(dim / 2)
    base = np.zeros(dim)
    base[:first] = 1.0
    masks = []
    for i in range(n_blocks):
        masks.append(base if i % 2 == 0 else 1.0 - base)
    return masks


class CouplingFlow(nn.Module):
    """Stack of conditional affine coupling blocks with alternating masks."""

    def __init__(self, dim, cond_dim, n_blocks=6, hidden=64, clamp=3.0, generator=None):
        super().__init__()
        if dim < 1:
            raise ValueError("flow dimension must be at least 1")
        self.dim = dim
        self.cond_dim = cond_dim
        self.n_blocks = n_blocks
        self.hidden = hidden
        self.clamp = float(clamp)
        self.blocks = nn.ModuleList(
            _CouplingBlock(dim, cond_dim, hidden, mask, clamp, generator)
            for mask in _half_masks(dim, n_blocks)
        )

    def config(self) -> dict:
        return {
            "dim": self.dim,
            "cond_dim": self.cond_dim,
            "n_blocks": self.n_blocks,
            "hidden": self.hidden,
            "clamp": self.clamp,
        }

    def forward(self, theta_u, cond):
        z = theta_u
        logdet = torch.zeros(theta_u.shape[:-1], dtype=DTYPE, device=theta_u.device)
        for i, block in enumerate(self.blocks):
            z, block_logdet = block(z, cond)
            if not torch.all(torch.isfinite(z)):
                raise NumericError(f"non-finite activation in coupling block {i}")
            logdet = logdet + block_logdet
        return z, logdet

    def inverse(self, z, cond):
        x = z
        for i in reversed(range(self.n_blocks)):
            x = self.blocks[i].inverse(x, cond)
            if not torch.all(torch.isfinite(x)):
                raise NumericError(f"non-finite activation in coupling block {i}")
        return x


def _as_batch(array, dim):
    tensor = torch.as_tensor(np.asarray(array, dtype=float), dtype=DTYPE)
    if tensor.ndim == 1:
        tensor = tensor.unsqueeze(0)
    if tensor.shape[-1] != dim:
        raise ValueError(f"expected trailing dimension {dim}, got {tuple(tensor.shape)}")
    return tensor


def flow_forward(flow: CouplingFlow, theta_u, cond):
    """Numpy-facing forward pass: returns (z, logdet) without gradients."""
    theta_t = _as_batch(theta_u, flow.dim)
    cond_t = _as_batch(cond, flow.cond_dim)
    if not torch.all(torch.isfinite(theta_t)):
        raise ValueError("flow input must be finite")
    with torch.no_grad():
        z, logdet = flow(theta_t, cond_t)
    z = z.numpy()
    logdet = logdet.numpy()
    if np.ndim(theta_u) == 1:
        return z[0], float(logdet[0])
    return z, logdet


def flow_inverse(flow: CouplingFlow, z, cond):
    """Numpy-facing inverse pass."""
    z_t = _as_batch(z, flow.dim)
    cond_t = _as_batch(cond, flow.cond_dim)
    if not torch.all(torch.isfinite(z_t)):
        raise ValueError("latent input must be finite")
    with torch.no_grad():
        theta_u = flow.inverse(z_t, cond_t)
    theta_u = theta_u.numpy()
    return theta_u[0] if np.ndim(z) == 1 else theta_u


def flow_loss(flow: CouplingFlow, theta_u: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
    """Per-batch mean of 0.5 ||f(theta; cond)||^2 - log|det J|."""
    if theta_u.shape[0] < 1:
        raise ValueError("empty batch")
    z, logdet = flow(theta_u, cond)
    return (0.5 * z.square().sum(dim=-1) - logdet).mean()
