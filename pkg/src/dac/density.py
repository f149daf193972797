"""Cluster-conditional densities.

Two heads: a diagonal Gaussian parameterized by (mu, log-variance), and a
context-conditioned normalizing flow built from masked autoregressive
blocks, giving exact log densities via the change-of-variables formula.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .blocks import Linear, glorot
from .tensor import Tensor

LOG_2PI = float(np.log(2.0 * np.pi))
LOG_VAR_RANGE = 14.0  # keeps exp(log_var) and its reciprocal finite in float32
LOG_SCALE_RANGE = 7.0  # flow scale clamp; the density stays exactly normalized


@dataclass
class GaussianTheta:
    """Diagonal Gaussian cluster parameters; variance is exp(log_var)."""

    mu: np.ndarray
    log_var: np.ndarray

    @classmethod
    def from_vector(cls, vec):
        vec = np.asarray(vec).reshape(-1)
        d = vec.size // 2
        return cls(mu=vec[:d].copy(), log_var=vec[d:].copy())


def gaussian_log_density_t(x: Tensor, theta: Tensor) -> Tensor:
    """Log density of x[B, n, d] under per-set Gaussians theta[B, 2d] -> [B, n]."""
    d = x.shape[-1]
    mu = theta[:, None, :d]
    lv = T.clip(theta[:, None, d:], -LOG_VAR_RANGE, LOG_VAR_RANGE)
    diff = T.sub(x, mu)
    quad = T.mul(T.square(diff), T.exp(-lv))
    per_dim = (quad + lv + LOG_2PI) * (-0.5)
    return T.tsum(per_dim, axis=-1)


def gaussian_log_density(x, theta: GaussianTheta) -> float:
    """Scalar convenience wrapper for a single point and cluster."""
    vec = np.concatenate([theta.mu, theta.log_var])
    xt = Tensor(np.asarray(x, dtype=np.float64).reshape(1, 1, -1), dtype=np.float64)
    tt = Tensor(vec.reshape(1, -1), dtype=np.float64)
    return float(gaussian_log_density_t(xt, tt).data[0, 0])


class MadeBlock:
    """One autoregressive step: mu_i, log sigma_i depend on x_{<i} and context.

    Connectivity masks enforce the ordering; dimension 1 is left untouched
    (identity with unit scale), matching a base-normal first conditional.
    """

    def __init__(self, dim, hidden, context_dim, rng):
        if dim < 2:
            raise ValueError("autoregressive block needs dim >= 2")
        self.dim = dim
        in_deg = np.arange(1, dim + 1)
        hid_deg = (np.arange(hidden) % (dim - 1)) + 1
        out_deg = np.arange(2, dim + 1)  # params emitted for dims 2..D
        self.mask_in = (in_deg[:, None] <= hid_deg[None, :]).astype(np.float64)
        m2 = (hid_deg[:, None] < out_deg[None, :]).astype(np.float64)
        self.mask_out = np.concatenate([m2, m2], axis=1)  # mu block then log-scale block

        self.w1 = Tensor(glorot(rng, dim, hidden), requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True)
        self.ctx = Linear(context_dim, hidden, rng)
        # zero-initialized outputs make the block start as the identity map
        self.w2 = Tensor(np.zeros((hidden, 2 * (dim - 1))), requires_grad=True)
        self.b2 = Tensor(np.zeros(2 * (dim - 1)), requires_grad=True)

    def shift_and_scale(self, x: Tensor, context: Tensor | None):
        """Autoregressive (mu, log sigma), each shaped like x (dim-1 slot zero)."""
        b, n, d = x.shape
        h = T.linear(x, T.mul(self.w1, Tensor(self.mask_in, dtype=self.w1.dtype)), self.b1)
        if context is not None:
            h = h + self.ctx(context)[:, None, :]
        h = T.relu(h)
        out = T.linear(h, T.mul(self.w2, Tensor(self.mask_out, dtype=self.w2.dtype)), self.b2)
        zeros = Tensor(np.zeros((b, n, 1), dtype=out.dtype))
        mu = T.concat([zeros, out[:, :, : d - 1]], axis=-1)
        logs = T.concat([zeros, T.clip(out[:, :, d - 1:], -LOG_SCALE_RANGE, LOG_SCALE_RANGE)], axis=-1)
        return mu, logs

    def forward(self, x: Tensor, context: Tensor | None):
        """Pull x back one step: u = (x - mu) / sigma; returns (u, sum log sigma)."""
        mu, logs = self.shift_and_scale(x, context)
        u = T.mul(T.sub(x, mu), T.exp(T.neg(logs)))
        return u, T.tsum(logs, axis=-1)

    def named_params(self, prefix):
        yield f"{prefix}.w1", self.w1
        yield f"{prefix}.b1", self.b1
        yield from self.ctx.named_params(f"{prefix}.ctx")
        yield f"{prefix}.w2", self.w2
        yield f"{prefix}.b2", self.b2


class MafStack:
    """Stack of autoregressive blocks with dimension-order reversal between them."""

    def __init__(self, dim=2, blocks=4, hidden=64, context_dim=128, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dim = dim
        self.context_dim = context_dim
        self.blocks = [MadeBlock(dim, hidden, context_dim, rng) for _ in range(blocks)]

    def log_density_t(self, x: Tensor, context: Tensor | None) -> Tensor:
        """Exact log density of x[B, n, d] given context[B, c] -> [B, n]."""
        z = x
        total = None
        for i, block in enumerate(self.blocks):
            if i > 0:
                z = T.reverse(z, axis=-1)
            z, logdet = block.forward(z, context)
            total = logdet if total is None else total + logdet
        base = T.tsum((T.square(z) + LOG_2PI) * (-0.5), axis=-1)
        return base - total

    def named_params(self, prefix):
        for i, block in enumerate(self.blocks):
            yield from block.named_params(f"{prefix}.made{i}")


def maf_log_density(x, context, stack: MafStack) -> float:
    """Scalar convenience wrapper for a single point under one context vector."""
    xt = Tensor(np.asarray(x, dtype=np.float64).reshape(1, 1, -1), dtype=np.float64)
    ct = Tensor(np.asarray(context, dtype=np.float64).reshape(1, -1), dtype=np.float64)
    return float(stack.log_density_t(xt, ct).data[0, 0])
